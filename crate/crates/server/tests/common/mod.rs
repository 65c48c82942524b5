#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use dabih_core::api::{encode_key, LoginRequest, StartUploadRequest};
use dabih_core::{decapsulate, Digest, PrivateKey};
use dabih_server::auth::Caller;
use dabih_server::{Dabih, ServerConfig};
use tempfile::TempDir;

pub fn testdata(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/testdata").join(name)
}

pub fn private_key(name: &str) -> &'static PrivateKey {
    static KEYS: OnceLock<std::sync::Mutex<std::collections::HashMap<String, &'static PrivateKey>>> =
        OnceLock::new();
    let map = KEYS.get_or_init(Default::default);
    let mut map = map.lock().unwrap();
    map.entry(name.to_string()).or_insert_with(|| {
        let bytes = std::fs::read(testdata(&format!("{name}.pem"))).unwrap();
        Box::leak(Box::new(PrivateKey::from_bytes(&bytes).unwrap()))
    })
}

pub fn public_pem(name: &str) -> String {
    std::fs::read_to_string(testdata(&format!("{name}.pub.pem"))).unwrap()
}

pub struct Env {
    pub dir: TempDir,
    pub svc: Arc<Dabih>,
    pub admin: Caller,
}

pub fn config(dir: &Path, roots: &[&str]) -> ServerConfig {
    ServerConfig {
        storage_root: dir.join("storage"),
        database_path: dir.join("dabih.sqlite"),
        root_keys: roots.iter().map(|r| testdata(&format!("{r}.pub.pem"))).collect(),
        admins: vec!["admin".into()],
        ..ServerConfig::default()
    }
}

impl Env {
    pub fn new(roots: &[&str]) -> Self {
        Self::with_config(|c| {
            let _ = c;
        }, roots)
    }

    pub fn with_config(tweak: impl FnOnce(&mut ServerConfig), roots: &[&str]) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = config(dir.path(), roots);
        tweak(&mut cfg);
        let svc = Arc::new(Dabih::open(cfg).unwrap());
        let admin = login(&svc, "admin");
        Self { dir, svc, admin }
    }

    pub fn storage(&self) -> PathBuf {
        self.dir.path().join("storage")
    }

    /// Logs `user` in and enrolls and enables the fixture key of the same name.
    pub fn user_with_key(&self, user: &str) -> Caller {
        let caller = login(&self.svc, user);
        let info = self.svc.enroll_key(&caller, &public_pem(user)).unwrap();
        self.svc.enable_key(&self.admin, &info.fingerprint).unwrap();
        caller
    }

    pub fn upload(&self, caller: &Caller, name: &str, data: &[u8]) -> String {
        upload_with(&self.svc, caller, name, data, None)
    }

    pub fn key_for(&self, caller: &Caller, mnemonic: &str, key_name: &str) -> String {
        let env = self.svc.get_envelope(caller, mnemonic, None).unwrap();
        encode_key(&decapsulate(private_key(key_name), &env).unwrap())
    }

    pub fn download_server_side(&self, caller: &Caller, mnemonic: &str, key: &str) -> Vec<u8> {
        let dl = self.svc.prepare_download(caller, mnemonic, key).unwrap();
        let mut out = Vec::new();
        dl.run(|c| {
            out.extend_from_slice(&c.unwrap());
            true
        });
        out
    }

    pub fn download_client_side(&self, caller: &Caller, mnemonic: &str, key_name: &str) -> Vec<u8> {
        let env = self.svc.get_envelope(caller, mnemonic, None).unwrap();
        let key = decapsulate(private_key(key_name), &env).unwrap();
        let info = self.svc.get_dataset(caller, mnemonic).unwrap();
        let mut out = Vec::new();
        for i in 0..info.chunks {
            let (row, ct) = self.svc.download_chunk(caller, mnemonic, i).unwrap();
            out.extend(dabih_core::open_chunk(&key, &row.to_sealed(ct)).unwrap());
        }
        out
    }
}

pub fn login(svc: &Dabih, user: &str) -> Caller {
    let resp = svc
        .login(&LoginRequest {
            user_id: user.into(),
            name: user.into(),
            email: format!("{user}@example.org"),
            password: format!("{user}-password"),
        })
        .unwrap();
    svc.authenticate(&resp.token).unwrap()
}

pub fn upload_with(svc: &Dabih, caller: &Caller, name: &str, data: &[u8], chunk_size: Option<u64>) -> String {
    let start = svc
        .start_upload(
            caller,
            &StartUploadRequest {
                filename: name.into(),
                size: data.len() as u64,
                chunk_size,
                first_chunk_hash: None,
            },
        )
        .unwrap();
    for (i, chunk) in data.chunks(start.chunk_size as usize).enumerate() {
        svc.upload_chunk(caller, &start.mnemonic, i as u64, &Digest::of(chunk), chunk)
            .unwrap();
    }
    svc.finish_upload(caller, &start.mnemonic).unwrap();
    start.mnemonic
}

/// Deterministic pseudo-random bytes.
pub fn bytes(len: usize, seed: u64) -> Vec<u8> {
    let mut x = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..len)
        .map(|_| {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            (x >> 24) as u8
        })
        .collect()
}

/// Every regular file below `dir`, recursively.
pub fn files_below(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let Ok(entries) = std::fs::read_dir(&d) else { continue };
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

/// Bitwise reflected CRC-32 (polynomial 0xEDB88320).
pub fn crc32_oracle(data: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in data {
        crc ^= b as u32;
        for _ in 0..8 {
            crc = if crc & 1 != 0 { (crc >> 1) ^ 0xEDB8_8320 } else { crc >> 1 };
        }
    }
    !crc
}
