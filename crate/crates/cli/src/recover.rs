//! Offline recovery from a recovery file, the chunk files and a root key.
//! Needs neither the server nor its database.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use dabih_core::crypto::dataset_hash;
use dabih_core::storage::chunk_file_name;
use dabih_core::{decapsulate, open_chunk, Digest, PrivateKey, RecoveryFile};

use crate::download::Downloaded;
use crate::error::{chunk_error, CliError, CliResult};

pub fn read_recovery_file(path: &Path) -> CliResult<RecoveryFile> {
    let bytes = fs::read(path)?;
    let recovery: RecoveryFile = serde_json::from_slice(&bytes)
        .map_err(|e| CliError::Integrity(format!("{}: {e}", path.display())))?;
    recovery.validate()?;
    Ok(recovery)
}

/// Decrypts the dataset described by `recovery` from `chunks_dir` into `out`.
pub fn recover(recovery: &RecoveryFile, chunks_dir: &Path, root_key: &PrivateKey, out: &Path) -> CliResult<Downloaded> {
    let fingerprint = root_key.fingerprint();
    let envelope = recovery.envelope_for(&fingerprint).ok_or_else(|| {
        CliError::NoEnvelope(format!(
            "no matching root envelope for key {fingerprint} in the recovery file of {}",
            recovery.mnemonic
        ))
    })?;
    let key = decapsulate(root_key, &envelope)?;
    if key.fingerprint() != recovery.key_fingerprint {
        return Err(CliError::Integrity("root envelope holds a different dataset key".into()));
    }

    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(parent)?;
    let mut digests: Vec<Digest> = Vec::with_capacity(recovery.chunks.len());
    let mut size = 0u64;
    {
        let mut writer = BufWriter::new(tmp.as_file_mut());
        for chunk in &recovery.chunks {
            let path = chunks_dir.join(chunk_file_name(chunk.index));
            let ciphertext = fs::read(&path).map_err(|e| {
                CliError::Integrity(format!("chunk {}: cannot read {}: {e}", chunk.index, path.display()))
            })?;
            let plain = open_chunk(&key, &chunk.to_sealed(ciphertext)?).map_err(chunk_error)?;
            digests.push(Digest::of(&plain));
            size += plain.len() as u64;
            writer.write_all(&plain)?;
        }
        writer.flush()?;
    }
    let actual = dataset_hash(&digests).map_err(|_| CliError::Integrity("recovery file lists no chunks".into()))?;
    if actual != recovery.dataset_hash || size != recovery.size {
        return Err(CliError::Integrity("recovered file does not match the dataset hash".into()));
    }
    tmp.as_file().sync_all()?;
    tmp.persist(out).map_err(|e| CliError::Io(e.error))?;
    Ok(Downloaded {
        path: out.to_path_buf(),
        size,
        dataset_hash: actual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use dabih_core::storage::{RecoveryChunk, RootEnvelope, RECOVERY_VERSION};
    use dabih_core::{encapsulate, seal_chunk, DatasetKey};
    use std::path::PathBuf;

    fn fixture(name: &str) -> PrivateKey {
        let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/testdata").join(name);
        PrivateKey::from_bytes(&fs::read(p).unwrap()).unwrap()
    }

    /// Builds a dataset on disk without any server code.
    fn dataset(dir: &Path, data: &[u8], chunk: usize, root: &PrivateKey) -> RecoveryFile {
        let key = DatasetKey::generate();
        let mut chunks = Vec::new();
        for (i, part) in data.chunks(chunk).enumerate() {
            let sealed = seal_chunk(&key, i as u64, part).unwrap();
            fs::write(dir.join(chunk_file_name(i as u64)), &sealed.ciphertext).unwrap();
            chunks.push(RecoveryChunk::from_sealed(&sealed));
        }
        let envelope = encapsulate(root.public(), &key).unwrap();
        let digests: Vec<Digest> = chunks.iter().map(|c| c.plain_hash).collect();
        RecoveryFile {
            version: RECOVERY_VERSION,
            mnemonic: "brave_hopper".into(),
            filename: "f.bin".into(),
            size: data.len() as u64,
            dataset_hash: dataset_hash(&digests).unwrap(),
            key_fingerprint: key.fingerprint(),
            chunks,
            root_envelopes: vec![RootEnvelope {
                fingerprint: envelope.recipient_fingerprint,
                ciphertext: envelope.ciphertext,
            }],
        }
    }

    #[test]
    fn recovers_and_rejects_foreign_keys_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let root = fixture("root.pem");
        let data: Vec<u8> = (0..3000u32).map(|i| (i * 7 % 251) as u8).collect();
        let recovery = dataset(dir.path(), &data, 1024, &root);
        let out = dir.path().join("out.bin");
        let got = recover(&recovery, dir.path(), &root, &out).unwrap();
        assert_eq!(fs::read(&out).unwrap(), data);
        assert_eq!(got.dataset_hash, recovery.dataset_hash);

        let err = recover(&recovery, dir.path(), &fixture("bob.pem"), &dir.path().join("x")).unwrap_err();
        assert!(matches!(err, CliError::NoEnvelope(_)));
        assert!(err.to_string().contains("no matching root envelope"));

        let path = dir.path().join(chunk_file_name(1));
        let mut bytes = fs::read(&path).unwrap();
        bytes[5] ^= 0x40;
        fs::write(&path, bytes).unwrap();
        let err = recover(&recovery, dir.path(), &root, &dir.path().join("y")).unwrap_err();
        assert!(matches!(err, CliError::Integrity(_)));
        assert!(err.to_string().contains("chunk 1"), "{err}");
        assert!(!dir.path().join("y").exists());
    }
}
