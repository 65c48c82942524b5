//! JSON wire types for the `/api/v1` HTTP API, shared by server and client.
//!
//! Chunk bodies travel as raw bytes; their metadata travels in the
//! `x-dabih-*` headers below. Digests are lowercase hex, binary blobs and
//! clear dataset keys are standard base64.

use std::fmt;
use std::str::FromStr;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use zeroize::Zeroizing;

use crate::crypto::{CryptoError, DatasetKey, Digest};

pub const API_PREFIX: &str = "/api/v1";

pub const HEADER_PLAIN_HASH: &str = "x-dabih-plain-hash";
pub const HEADER_IV: &str = "x-dabih-iv";
pub const HEADER_CRC32: &str = "x-dabih-crc32";
pub const HEADER_PLAIN_SIZE: &str = "x-dabih-plain-size";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Permission {
    Read,
    Write,
}

impl Permission {
    pub fn as_str(&self) -> &'static str {
        match self {
            Permission::Read => "read",
            Permission::Write => "write",
        }
    }

    /// Write access includes everything read access allows.
    pub fn allows(&self, needed: Permission) -> bool {
        *self >= needed
    }
}

impl fmt::Display for Permission {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Permission {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "read" => Ok(Permission::Read),
            "write" => Ok(Permission::Write),
            other => Err(format!("unknown permission {other:?}, expected read or write")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetState {
    Uploading,
    Complete,
    Deleted,
}

impl DatasetState {
    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetState::Uploading => "uploading",
            DatasetState::Complete => "complete",
            DatasetState::Deleted => "deleted",
        }
    }
}

impl FromStr for DatasetState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uploading" => Ok(DatasetState::Uploading),
            "complete" => Ok(DatasetState::Complete),
            "deleted" => Ok(DatasetState::Deleted),
            other => Err(format!("unknown dataset state {other:?}")),
        }
    }
}

/// Structured error body returned by every failing endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<serde_json::Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoginRequest {
    pub user_id: String,
    pub name: String,
    pub email: String,
    pub password: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserInfo {
    pub user_id: String,
    pub name: String,
    pub email: String,
    pub is_admin: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoginResponse {
    pub token: String,
    pub expires_at: i64,
    pub user: UserInfo,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnrollKeyRequest {
    /// SubjectPublicKeyInfo PEM.
    pub public_key: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyInfo {
    pub fingerprint: Digest,
    pub owner: Option<String>,
    pub enabled: bool,
    pub is_root: bool,
    pub created_at: i64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StartUploadRequest {
    pub filename: String,
    pub size: u64,
    /// Plaintext bytes per chunk; the server default when absent.
    #[serde(default)]
    pub chunk_size: Option<u64>,
    #[serde(default)]
    pub first_chunk_hash: Option<Digest>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuplicateHint {
    pub mnemonic: String,
    pub dataset_hash: Digest,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StartUploadResponse {
    pub mnemonic: String,
    pub chunk_size: u64,
    #[serde(default)]
    pub duplicate: Option<DuplicateHint>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChunkReceipt {
    pub index: u64,
    pub crc32: String,
    pub stored_size: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinishResponse {
    pub mnemonic: String,
    pub dataset_hash: Digest,
    pub key_fingerprint: Digest,
    pub chunks: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkHashEntry {
    pub index: u64,
    pub plain_hash: Digest,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IncompleteUpload {
    pub mnemonic: String,
    pub filename: String,
    pub size: u64,
    pub chunk_size: u64,
    pub chunks: Vec<ChunkHashEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub mnemonic: String,
    pub filename: String,
    pub size: u64,
    pub owner: String,
    pub state: DatasetState,
    pub dataset_hash: Option<Digest>,
    pub key_fingerprint: Option<Digest>,
    /// The caller's access level. Admins listing foreign datasets see `None`.
    pub permission: Option<Permission>,
    pub chunks: u64,
    /// Plaintext bytes per chunk; every chunk but the last has this size.
    pub chunk_size: u64,
    pub created_at: i64,
}

/// A clear dataset key sent by a client that decapsulated it locally.
#[derive(Clone, Serialize, Deserialize)]
pub struct KeyRequest {
    pub key: String,
}

impl KeyRequest {
    pub fn new(key: &DatasetKey) -> Self {
        Self {
            key: encode_key(key),
        }
    }
}

impl fmt::Debug for KeyRequest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("KeyRequest { key: <redacted> }")
    }
}

#[derive(Clone, Serialize, Deserialize)]
pub struct ShareRequest {
    pub key: String,
    pub user: String,
    pub permission: Permission,
}

impl fmt::Debug for ShareRequest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ShareRequest")
            .field("user", &self.user)
            .field("permission", &self.permission)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShareResponse {
    pub user: String,
    pub permission: Permission,
    pub envelopes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReencryptResponse {
    pub key_fingerprint: Digest,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TokenRequest {
    #[serde(default)]
    pub ttl_secs: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenResponse {
    pub token: String,
    pub expires_at: i64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RevokeTokenRequest {
    pub token: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventInfo {
    pub id: i64,
    pub timestamp: i64,
    pub actor: String,
    pub action: String,
    pub mnemonic: Option<String>,
    pub detail: String,
}

pub fn encode_key(key: &DatasetKey) -> String {
    STANDARD.encode(key.as_bytes())
}

pub fn decode_key(s: &str) -> Result<DatasetKey, CryptoError> {
    let bytes = Zeroizing::new(STANDARD.decode(s).map_err(|_| CryptoError::InvalidLength {
        expected: 32,
        actual: 0,
    })?);
    DatasetKey::from_slice(&bytes)
}

pub fn format_crc32(crc: u32) -> String {
    format!("{crc:08x}")
}

pub fn parse_crc32(s: &str) -> Option<u32> {
    if s.len() != 8 {
        return None;
    }
    u32::from_str_radix(s, 16).ok()
}

/// Serde adapter for `Vec<u8>` as standard base64.
pub mod base64_bytes {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        STANDARD.decode(s).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_implies_read() {
        assert!(Permission::Write.allows(Permission::Read));
        assert!(Permission::Write.allows(Permission::Write));
        assert!(Permission::Read.allows(Permission::Read));
        assert!(!Permission::Read.allows(Permission::Write));
    }

    #[test]
    fn key_transport_roundtrip() {
        let key = DatasetKey::generate();
        assert_eq!(decode_key(&encode_key(&key)).unwrap(), key);
        assert!(decode_key("AAAA").is_err());
        assert!(!format!("{:?}", KeyRequest::new(&key)).contains(&encode_key(&key)));
    }

    #[test]
    fn crc32_hex_form() {
        assert_eq!(format_crc32(0x0000_00ff), "000000ff");
        assert_eq!(parse_crc32("cbf43926"), Some(0xcbf4_3926));
        assert_eq!(parse_crc32("ff"), None);
    }
}
