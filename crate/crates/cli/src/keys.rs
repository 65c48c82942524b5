//! Key files on disk.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use dabih_core::crypto::compact::{compact_export, expand_compact_key, COMPACT_HEADER};
use dabih_core::{Digest, PrivateKey};

use crate::error::{CliError, CliResult};

/// Paths written by [`keygen`].
#[derive(Debug, Clone)]
pub struct GeneratedKey {
    pub private: PathBuf,
    pub public: PathBuf,
    pub compact: Option<PathBuf>,
    pub fingerprint: Digest,
}

/// Writes `bytes` to a new file readable by the owner only.
pub fn write_private(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let mut opts = OpenOptions::new();
    opts.write(true).create(true).truncate(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        opts.mode(0o600);
    }
    let mut file = opts.open(path)?;
    file.write_all(bytes)?;
    file.sync_all()?;
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Generates a 4096-bit key pair: the PKCS#8 private key at `out`, the
/// public key at `<out>.pub` and, with `compact`, the compact text payload
/// at `<out>.compact`.
pub fn keygen(out: &Path, compact: bool, force: bool) -> CliResult<GeneratedKey> {
    let public = with_suffix(out, ".pub");
    let compact_path = compact.then(|| with_suffix(out, ".compact"));
    if !force {
        for p in [Some(out), Some(public.as_path()), compact_path.as_deref()].into_iter().flatten() {
            if p.exists() {
                return Err(CliError::Usage(format!("{} exists; pass --force to overwrite", p.display())));
            }
        }
    }
    let key = PrivateKey::generate()?;
    write_private(out, key.to_pkcs8_pem()?.as_bytes())?;
    fs::write(&public, key.public().to_pem())?;
    if let Some(p) = &compact_path {
        write_private(p, compact_export(&key)?.as_bytes())?;
    }
    Ok(GeneratedKey {
        private: out.to_path_buf(),
        public,
        compact: compact_path,
        fingerprint: key.fingerprint(),
    })
}

/// Loads a private key in PKCS#8 PEM or DER form, or the compact text form.
pub fn load_private_key(path: &Path) -> CliResult<PrivateKey> {
    let bytes = zeroize::Zeroizing::new(fs::read(path)?);
    let text = std::str::from_utf8(&bytes).unwrap_or("");
    if text.trim_start().starts_with(COMPACT_HEADER) {
        return Ok(expand_compact_key(text)?);
    }
    Ok(PrivateKey::from_bytes(&bytes)?)
}

/// A warning when the key file is readable by group or others.
pub fn permission_warning(path: &Path) -> Option<String> {
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        let mode = fs::metadata(path).ok()?.permissions().mode();
        if mode & 0o077 != 0 {
            return Some(format!(
                "warning: private key {} is accessible by other users (mode {:o}); run chmod 600",
                path.display(),
                mode & 0o777
            ));
        }
    }
    #[cfg(not(unix))]
    let _ = path;
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(name: &str) -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/testdata").join(name)
    }

    #[test]
    fn loads_pem_and_compact_forms() {
        let dir = tempfile::tempdir().unwrap();
        let pem = load_private_key(&fixture("alice.pem")).unwrap();
        let compact = dir.path().join("alice.compact");
        write_private(&compact, compact_export(&pem).unwrap().as_bytes()).unwrap();
        assert_eq!(load_private_key(&compact).unwrap().fingerprint(), pem.fingerprint());
        let garbage = dir.path().join("garbage");
        fs::write(&garbage, "not a key").unwrap();
        assert!(load_private_key(&garbage).is_err());
    }

    #[cfg(unix)]
    #[test]
    fn permission_check() {
        use std::os::unix::fs::PermissionsExt;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k");
        write_private(&path, b"x").unwrap();
        assert_eq!(fs::metadata(&path).unwrap().permissions().mode() & 0o777, 0o600);
        assert!(permission_warning(&path).is_none());
        fs::set_permissions(&path, fs::Permissions::from_mode(0o644)).unwrap();
        assert!(permission_warning(&path).unwrap().contains("chmod 600"));
    }

    #[test]
    fn keygen_refuses_to_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("key.pem");
        fs::write(&out, "existing").unwrap();
        assert!(matches!(keygen(&out, false, false), Err(CliError::Usage(_))));
        assert_eq!(fs::read_to_string(&out).unwrap(), "existing");
    }
}
