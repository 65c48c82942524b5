//! Storage for sealed chunks and recovery files.
//!
//! Layout of the shipped filesystem backend:
//!
//! ```text
//! <root>/<mnemonic>/chunk_<index>
//! <root>/<mnemonic>/recovery.json
//! ```
//!
//! Only ciphertext ever reaches this layer. The recovery file carries every
//! chunk's IV, hash and checksum together with the dataset key encapsulated
//! to each root key, which is enough to decrypt a dataset offline with one
//! root private key and no database.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::api::{format_crc32, parse_crc32};
use crate::crypto::envelope::KeyEnvelope;
use crate::crypto::{dataset_hash, ChunkSealed, Digest, IV_LEN};
use crate::mnemonic::is_valid_mnemonic;

pub const RECOVERY_FILE_NAME: &str = "recovery.json";
pub const RECOVERY_VERSION: u32 = 1;
const STAGED_SUFFIX: &str = ".staged";

#[derive(Debug, thiserror::Error)]
pub enum StorageError {
    #[error("chunk {index} of {mnemonic} not found")]
    NotFound { mnemonic: String, index: u64 },
    #[error("chunk {index} of {mnemonic} already stored")]
    Duplicate { mnemonic: String, index: u64 },
    #[error("no recovery file for {0}")]
    RecoveryNotFound(String),
    #[error("invalid dataset name {0:?}")]
    InvalidName(String),
    #[error("malformed recovery file: {0}")]
    InvalidRecovery(String),
    #[error("recovery file encoding: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Backend for ciphertext chunks and recovery documents.
///
/// Re-encryption writes replacement chunks as *staged* copies first and
/// swaps them in with [`ChunkStore::commit_staged`] once the metadata
/// transaction has committed.
pub trait ChunkStore: Send + Sync {
    /// Stores a new chunk; fails with `Duplicate` if the index exists.
    fn put_chunk(&self, mnemonic: &str, index: u64, ciphertext: &[u8]) -> Result<u64, StorageError>;
    fn get_chunk(&self, mnemonic: &str, index: u64) -> Result<Vec<u8>, StorageError>;
    fn stage_chunk(&self, mnemonic: &str, index: u64, ciphertext: &[u8]) -> Result<u64, StorageError>;
    fn get_staged(&self, mnemonic: &str, index: u64) -> Result<Vec<u8>, StorageError>;
    fn list_staged(&self, mnemonic: &str) -> Result<Vec<u64>, StorageError>;
    fn commit_staged(&self, mnemonic: &str, index: u64) -> Result<(), StorageError>;
    fn discard_staged(&self, mnemonic: &str) -> Result<(), StorageError>;
    /// Removes a single chunk, e.g. one written for an upload that failed
    /// before its metadata was recorded.
    fn remove_chunk(&self, mnemonic: &str, index: u64) -> Result<(), StorageError>;
    fn write_recovery(&self, mnemonic: &str, recovery: &RecoveryFile) -> Result<(), StorageError>;
    fn read_recovery(&self, mnemonic: &str) -> Result<RecoveryFile, StorageError>;
    /// Removes chunks and recovery file. Idempotent.
    fn delete_dataset_files(&self, mnemonic: &str) -> Result<(), StorageError>;
    /// Names of all dataset directories present in the backend.
    fn list_datasets(&self) -> Result<Vec<String>, StorageError>;
}

pub fn chunk_file_name(index: u64) -> String {
    format!("chunk_{index}")
}

/// Filesystem backed [`ChunkStore`].
#[derive(Debug)]
pub struct FsStore {
    root: PathBuf,
    recovery_lock: Mutex<()>,
}

impl FsStore {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self, StorageError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self {
            root,
            recovery_lock: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn dataset_dir(&self, mnemonic: &str) -> Result<PathBuf, StorageError> {
        if !is_valid_mnemonic(mnemonic) {
            return Err(StorageError::InvalidName(mnemonic.to_string()));
        }
        Ok(self.root.join(mnemonic))
    }

    fn chunk_path(&self, mnemonic: &str, index: u64) -> Result<PathBuf, StorageError> {
        Ok(self.dataset_dir(mnemonic)?.join(chunk_file_name(index)))
    }

    fn staged_path(&self, mnemonic: &str, index: u64) -> Result<PathBuf, StorageError> {
        Ok(self
            .dataset_dir(mnemonic)?
            .join(format!("{}{STAGED_SUFFIX}", chunk_file_name(index))))
    }
}

fn write_synced(file: &mut File, bytes: &[u8]) -> io::Result<()> {
    file.write_all(bytes)?;
    file.sync_all()
}

fn sync_dir(dir: &Path) -> io::Result<()> {
    File::open(dir)?.sync_all()
}

impl ChunkStore for FsStore {
    fn put_chunk(&self, mnemonic: &str, index: u64, ciphertext: &[u8]) -> Result<u64, StorageError> {
        let path = self.chunk_path(mnemonic, index)?;
        fs::create_dir_all(path.parent().expect("chunk has a parent"))?;
        let mut file = match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                return Err(StorageError::Duplicate {
                    mnemonic: mnemonic.to_string(),
                    index,
                })
            }
            Err(e) => return Err(e.into()),
        };
        if let Err(e) = write_synced(&mut file, ciphertext) {
            let _ = fs::remove_file(&path);
            return Err(e.into());
        }
        Ok(ciphertext.len() as u64)
    }

    fn get_chunk(&self, mnemonic: &str, index: u64) -> Result<Vec<u8>, StorageError> {
        let path = self.chunk_path(mnemonic, index)?;
        fs::read(&path).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => StorageError::NotFound {
                mnemonic: mnemonic.to_string(),
                index,
            },
            _ => e.into(),
        })
    }

    fn stage_chunk(&self, mnemonic: &str, index: u64, ciphertext: &[u8]) -> Result<u64, StorageError> {
        let path = self.staged_path(mnemonic, index)?;
        let mut file = File::create(&path)?;
        write_synced(&mut file, ciphertext)?;
        Ok(ciphertext.len() as u64)
    }

    fn get_staged(&self, mnemonic: &str, index: u64) -> Result<Vec<u8>, StorageError> {
        let path = self.staged_path(mnemonic, index)?;
        fs::read(&path).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => StorageError::NotFound {
                mnemonic: mnemonic.to_string(),
                index,
            },
            _ => e.into(),
        })
    }

    fn list_staged(&self, mnemonic: &str) -> Result<Vec<u64>, StorageError> {
        let dir = self.dataset_dir(mnemonic)?;
        let entries = match fs::read_dir(&dir) {
            Ok(entries) => entries,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        let mut staged = Vec::new();
        for entry in entries {
            let name = entry?.file_name();
            let Some(name) = name.to_str() else { continue };
            if let Some(index) = name
                .strip_prefix("chunk_")
                .and_then(|rest| rest.strip_suffix(STAGED_SUFFIX))
                .and_then(|n| n.parse().ok())
            {
                staged.push(index);
            }
        }
        staged.sort_unstable();
        Ok(staged)
    }

    fn commit_staged(&self, mnemonic: &str, index: u64) -> Result<(), StorageError> {
        let from = self.staged_path(mnemonic, index)?;
        let to = self.chunk_path(mnemonic, index)?;
        fs::rename(&from, &to)?;
        sync_dir(to.parent().expect("chunk has a parent"))?;
        Ok(())
    }

    fn discard_staged(&self, mnemonic: &str) -> Result<(), StorageError> {
        for index in self.list_staged(mnemonic)? {
            match fs::remove_file(self.staged_path(mnemonic, index)?) {
                Ok(()) => {}
                Err(e) if e.kind() == io::ErrorKind::NotFound => {}
                Err(e) => return Err(e.into()),
            }
        }
        Ok(())
    }

    fn remove_chunk(&self, mnemonic: &str, index: u64) -> Result<(), StorageError> {
        match fs::remove_file(self.chunk_path(mnemonic, index)?) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(e.into()),
        }
    }

    fn write_recovery(&self, mnemonic: &str, recovery: &RecoveryFile) -> Result<(), StorageError> {
        let dir = self.dataset_dir(mnemonic)?;
        let json = serde_json::to_vec_pretty(recovery)?;
        let _guard = self.recovery_lock.lock().unwrap_or_else(|e| e.into_inner());
        fs::create_dir_all(&dir)?;
        let tmp = dir.join(format!("{RECOVERY_FILE_NAME}.tmp"));
        let mut file = File::create(&tmp)?;
        write_synced(&mut file, &json)?;
        fs::rename(&tmp, dir.join(RECOVERY_FILE_NAME))?;
        sync_dir(&dir)?;
        Ok(())
    }

    fn read_recovery(&self, mnemonic: &str) -> Result<RecoveryFile, StorageError> {
        let path = self.dataset_dir(mnemonic)?.join(RECOVERY_FILE_NAME);
        match fs::read(&path) {
            Ok(bytes) => Ok(serde_json::from_slice(&bytes)?),
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                Err(StorageError::RecoveryNotFound(mnemonic.to_string()))
            }
            Err(e) => Err(e.into()),
        }
    }

    fn delete_dataset_files(&self, mnemonic: &str) -> Result<(), StorageError> {
        match fs::remove_dir_all(self.dataset_dir(mnemonic)?) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(e.into()),
        }
    }

    fn list_datasets(&self) -> Result<Vec<String>, StorageError> {
        let mut names = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let entry = entry?;
            if entry.file_type()?.is_dir() {
                if let Some(name) = entry.file_name().to_str() {
                    if is_valid_mnemonic(name) {
                        names.push(name.to_string());
                    }
                }
            }
        }
        names.sort();
        Ok(names)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveryChunk {
    pub index: u64,
    /// 16 byte IV, hex.
    pub iv: String,
    pub plain_hash: Digest,
    /// CRC-32 of the ciphertext, 8 hex digits.
    pub crc32: String,
    pub plain_size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RootEnvelope {
    pub fingerprint: Digest,
    #[serde(with = "crate::api::base64_bytes")]
    pub ciphertext: Vec<u8>,
}

/// Per-dataset offline recovery document (`recovery.json`, version 1).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveryFile {
    pub version: u32,
    pub mnemonic: String,
    pub filename: String,
    pub size: u64,
    pub dataset_hash: Digest,
    pub key_fingerprint: Digest,
    pub chunks: Vec<RecoveryChunk>,
    pub root_envelopes: Vec<RootEnvelope>,
}

impl RecoveryChunk {
    pub fn from_sealed(sealed: &ChunkSealed) -> Self {
        Self {
            index: sealed.index,
            iv: hex::encode(sealed.iv),
            plain_hash: sealed.plain_hash,
            crc32: format_crc32(sealed.crc32),
            plain_size: sealed.plain_size,
        }
    }

    /// Combines this metadata with stored ciphertext.
    pub fn to_sealed(&self, ciphertext: Vec<u8>) -> Result<ChunkSealed, StorageError> {
        let mut iv = [0u8; IV_LEN];
        hex::decode_to_slice(&self.iv, &mut iv)
            .map_err(|_| StorageError::InvalidRecovery(format!("chunk {}: bad iv", self.index)))?;
        let crc32 = parse_crc32(&self.crc32)
            .ok_or_else(|| StorageError::InvalidRecovery(format!("chunk {}: bad crc32", self.index)))?;
        Ok(ChunkSealed {
            index: self.index,
            iv,
            ciphertext,
            plain_hash: self.plain_hash,
            crc32,
            plain_size: self.plain_size,
        })
    }
}

impl RecoveryFile {
    /// Checks version, chunk ordering and the dataset hash.
    pub fn validate(&self) -> Result<(), StorageError> {
        if self.version != RECOVERY_VERSION {
            return Err(StorageError::InvalidRecovery(format!(
                "unsupported version {}",
                self.version
            )));
        }
        for (expected, chunk) in self.chunks.iter().enumerate() {
            if chunk.index != expected as u64 {
                return Err(StorageError::InvalidRecovery(format!(
                    "chunk list out of order at position {expected}"
                )));
            }
        }
        let hashes: Vec<Digest> = self.chunks.iter().map(|c| c.plain_hash).collect();
        let computed = dataset_hash(&hashes)
            .map_err(|_| StorageError::InvalidRecovery("no chunks".into()))?;
        if computed != self.dataset_hash {
            return Err(StorageError::InvalidRecovery("dataset hash does not match chunk hashes".into()));
        }
        let total: u64 = self.chunks.iter().map(|c| c.plain_size).sum();
        if total != self.size {
            return Err(StorageError::InvalidRecovery("chunk sizes do not add up to file size".into()));
        }
        Ok(())
    }

    /// The root envelope addressed to `fingerprint`, if any.
    pub fn envelope_for(&self, fingerprint: &Digest) -> Option<KeyEnvelope> {
        self.root_envelopes
            .iter()
            .find(|e| &e.fingerprint == fingerprint)
            .map(|e| KeyEnvelope {
                recipient_fingerprint: e.fingerprint,
                ciphertext: e.ciphertext.clone(),
                key_fingerprint: self.key_fingerprint,
            })
    }
}
