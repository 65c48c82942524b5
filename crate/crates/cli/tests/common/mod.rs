#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dabih_cli::Client;
use dabih_core::api::LoginRequest;
use dabih_core::{DatasetKey, PrivateKey};
use dabih_server::{RunningServer, ServerConfig};
use tempfile::TempDir;

pub const BIN: &str = env!("CARGO_BIN_EXE_dabih");

pub fn testdata(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/testdata").join(name)
}

pub struct User {
    pub id: String,
    pub token: String,
    pub key_path: PathBuf,
    pub key: PrivateKey,
}

pub struct Fixture {
    pub dir: TempDir,
    pub server: Option<RunningServer>,
    pub url: String,
    pub admin: User,
}

fn login(url: &str, user: &str) -> String {
    Client::new(url, None)
        .login(&LoginRequest {
            user_id: user.into(),
            name: user.into(),
            email: format!("{user}@example.org"),
            password: format!("{user}-password"),
        })
        .unwrap()
        .token
}

impl Fixture {
    pub fn new(roots: &[&str]) -> Self {
        Self::with_config(roots, |_| {})
    }

    pub fn with_config(roots: &[&str], tweak: impl FnOnce(&mut ServerConfig)) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut config = ServerConfig {
            storage_root: dir.path().join("server/storage"),
            database_path: dir.path().join("server/dabih.sqlite"),
            root_keys: roots.iter().map(|r| testdata(&format!("{r}.pub.pem"))).collect(),
            admins: vec!["admin".into()],
            ..ServerConfig::default()
        };
        tweak(&mut config);
        fs::create_dir_all(dir.path().join("server")).unwrap();
        fs::create_dir_all(dir.path().join("home")).unwrap();
        let server = RunningServer::start(config).unwrap();
        let url = server.url();
        let admin = User {
            id: "admin".into(),
            token: login(&url, "admin"),
            key_path: PathBuf::new(),
            key: load_key("erin"),
        };
        let mut f = Self {
            dir,
            server: Some(server),
            url,
            admin,
        };
        f.admin = f.user_with_key("admin", "erin");
        f
    }

    pub fn storage(&self) -> PathBuf {
        self.dir.path().join("server/storage")
    }

    pub fn database(&self) -> PathBuf {
        self.dir.path().join("server/dabih.sqlite")
    }

    pub fn work(&self, name: &str) -> PathBuf {
        let p = self.dir.path().join("work").join(name);
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        p
    }

    pub fn client(&self, token: &str) -> Client {
        Client::new(&self.url, Some(token.to_string()))
    }

    /// Logs in `user`, enrolls the fixture key `key_name` and has the admin
    /// enable it.
    pub fn user_with_key(&self, user: &str, key_name: &str) -> User {
        let token = login(&self.url, user);
        let key_path = self.dir.path().join(format!("home/{user}.pem"));
        fs::copy(testdata(&format!("{key_name}.pem")), &key_path).unwrap();
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            fs::set_permissions(&key_path, fs::Permissions::from_mode(0o600)).unwrap();
        }
        let key = load_key(key_name);
        let info = self.client(&token).enroll_key(&key.public().to_pem()).unwrap();
        self.client(&self.admin.token).enable_key(&info.fingerprint).unwrap();
        User {
            id: user.into(),
            token,
            key_path,
            key,
        }
    }

    /// Runs the `dabih` binary with a clean environment.
    pub fn dabih(&self, token: &str, key: Option<&Path>, args: &[&str]) -> Output {
        let mut cmd = Command::new(BIN);
        cmd.env_clear()
            .env("HOME", self.dir.path().join("home"))
            .env("PATH", std::env::var_os("PATH").unwrap_or_default())
            .args(["--server", &self.url, "--token", token, "--quiet"]);
        if let Some(k) = key {
            cmd.arg("--key").arg(k);
        }
        cmd.args(args).output().unwrap()
    }

    /// Runs `dabih` as `user`, asserting success; returns stdout.
    pub fn run_ok(&self, user: &User, args: &[&str]) -> String {
        let out = self.dabih(&user.token, Some(&user.key_path), args);
        assert!(
            out.status.success(),
            "dabih {args:?} failed with {:?}\nstdout: {}\nstderr: {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    /// Uploads one file through the binary; returns (mnemonic, hash hex).
    pub fn upload(&self, user: &User, path: &Path, extra: &[&str]) -> (String, String) {
        let mut args = vec!["upload", path.to_str().unwrap()];
        args.extend_from_slice(extra);
        let out = self.run_ok(user, &args);
        let line = out.lines().next().expect("upload prints one line per file");
        let mut parts = line.split_whitespace();
        (parts.next().unwrap().to_string(), parts.next().unwrap().to_string())
    }

    pub fn download(&self, user: &User, mnemonic: &str, out: &Path, extra: &[&str]) -> Vec<u8> {
        let mut args = vec!["download", mnemonic, "-o", out.to_str().unwrap(), "--force"];
        args.extend_from_slice(extra);
        self.run_ok(user, &args);
        fs::read(out).unwrap()
    }

    pub fn dataset_key(&self, user: &User, mnemonic: &str) -> DatasetKey {
        dabih_cli::download::dataset_key(&self.client(&user.token), mnemonic, &user.key)
            .unwrap()
            .1
    }

    pub fn stop_server(&mut self) {
        if let Some(s) = self.server.take() {
            s.stop().unwrap();
        }
    }
}

pub fn load_key(name: &str) -> PrivateKey {
    PrivateKey::from_bytes(&fs::read(testdata(&format!("{name}.pem"))).unwrap()).unwrap()
}

/// Deterministic pseudo-random bytes (xorshift64*).
pub fn bytes(len: usize, seed: u64) -> Vec<u8> {
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let mut out = Vec::with_capacity(len + 8);
    while out.len() < len {
        s ^= s >> 12;
        s ^= s << 25;
        s ^= s >> 27;
        out.extend_from_slice(&s.wrapping_mul(0x2545_F491_4F6C_DD1D).to_le_bytes());
    }
    out.truncate(len);
    out
}

pub fn write_file(path: &Path, data: &[u8]) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    fs::write(path, data).unwrap();
}

pub fn files_below(dir: &Path) -> Vec<PathBuf> {
    walkdir(dir)
}

fn walkdir(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    if let Ok(entries) = fs::read_dir(dir) {
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                out.extend(walkdir(&p));
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

pub fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    haystack.windows(needle.len()).any(|w| w == needle)
}

/// SHA-256 dataset hash written out independently of the crates under test.
pub fn dataset_hash_oracle(data: &[u8], chunk_size: usize) -> String {
    use sha2::{Digest as _, Sha256};
    let mut outer = Sha256::new();
    for chunk in data.chunks(chunk_size) {
        outer.update(Sha256::digest(chunk));
    }
    outer
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
