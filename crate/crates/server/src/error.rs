use dabih_core::api::ApiError;
use dabih_core::{CryptoError, StorageError};
use serde_json::{json, Value};

use crate::db::DbError;

/// Failures of service operations. Each maps to a stable machine-readable
/// code and an HTTP status.
#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("authentication required")]
    Unauthorized,
    #[error("{0}")]
    Forbidden(String),
    #[error("{0} not found")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("invalid key: {0}")]
    InvalidKey(String),
    #[error("chunk hash does not match the uploaded bytes")]
    HashMismatch,
    #[error("key fingerprint does not match the dataset key")]
    FingerprintMismatch,
    #[error("chunks missing: {0:?}")]
    MissingChunks(Vec<u64>),
    #[error("chunk of {size} bytes exceeds the limit of {limit}")]
    ChunkTooLarge { size: u64, limit: u64 },
    #[error("request body too large: {0}")]
    PayloadTooLarge(String),
    #[error("no key envelope for the caller")]
    NoEnvelope,
    #[error("{0} has no enabled public key")]
    NoEnabledKey(String),
    #[error("stored data failed verification: {0}")]
    Integrity(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::Unauthorized => "unauthorized",
            ServiceError::Forbidden(_) => "forbidden",
            ServiceError::NotFound(_) => "not_found",
            ServiceError::Conflict(_) => "conflict",
            ServiceError::BadRequest(_) => "bad_request",
            ServiceError::InvalidKey(_) => "invalid_key",
            ServiceError::HashMismatch => "hash_mismatch",
            ServiceError::FingerprintMismatch => "fingerprint_mismatch",
            ServiceError::MissingChunks(_) => "missing_chunks",
            ServiceError::ChunkTooLarge { .. } => "chunk_too_large",
            ServiceError::PayloadTooLarge(_) => "payload_too_large",
            ServiceError::NoEnvelope => "no_envelope",
            ServiceError::NoEnabledKey(_) => "no_enabled_key",
            ServiceError::Integrity(_) => "integrity",
            ServiceError::Internal(_) => "internal",
        }
    }

    pub fn status(&self) -> u16 {
        match self {
            ServiceError::Unauthorized => 401,
            ServiceError::Forbidden(_) | ServiceError::NoEnabledKey(_) => 403,
            ServiceError::NotFound(_) | ServiceError::NoEnvelope => 404,
            ServiceError::Conflict(_) | ServiceError::MissingChunks(_) => 409,
            ServiceError::BadRequest(_) | ServiceError::InvalidKey(_) => 400,
            ServiceError::ChunkTooLarge { .. } | ServiceError::PayloadTooLarge(_) => 413,
            ServiceError::HashMismatch | ServiceError::FingerprintMismatch => 422,
            ServiceError::Integrity(_) | ServiceError::Internal(_) => 500,
        }
    }

    fn detail(&self) -> Option<Value> {
        match self {
            ServiceError::MissingChunks(missing) => Some(json!({ "missing": missing })),
            ServiceError::ChunkTooLarge { size, limit } => Some(json!({ "size": size, "limit": limit })),
            _ => None,
        }
    }

    pub fn to_api(&self) -> ApiError {
        ApiError {
            code: self.code().to_string(),
            message: self.to_string(),
            detail: self.detail(),
        }
    }

    pub fn forbidden() -> Self {
        ServiceError::Forbidden("insufficient permission".into())
    }
}

impl From<DbError> for ServiceError {
    fn from(e: DbError) -> Self {
        match e {
            DbError::Conflict(m) => ServiceError::Conflict(m),
            DbError::NotFound(m) => ServiceError::NotFound(m),
            other => ServiceError::Internal(other.to_string()),
        }
    }
}

impl From<StorageError> for ServiceError {
    fn from(e: StorageError) -> Self {
        match e {
            StorageError::NotFound { mnemonic, index } => {
                ServiceError::Integrity(format!("chunk {index} of {mnemonic} is missing from storage"))
            }
            StorageError::Duplicate { mnemonic, index } => {
                ServiceError::Conflict(format!("chunk {index} of {mnemonic} already stored"))
            }
            StorageError::InvalidName(name) => ServiceError::BadRequest(format!("invalid identifier {name:?}")),
            other => ServiceError::Internal(other.to_string()),
        }
    }
}

impl From<CryptoError> for ServiceError {
    fn from(e: CryptoError) -> Self {
        match e {
            CryptoError::KeyTooSmall { .. }
            | CryptoError::UnsupportedKey(_)
            | CryptoError::KeyParse(_) => ServiceError::InvalidKey(e.to_string()),
            CryptoError::ChecksumMismatch { .. }
            | CryptoError::InvalidPadding { .. }
            | CryptoError::HashMismatch { .. }
            | CryptoError::MalformedChunk { .. } => ServiceError::Integrity(e.to_string()),
            CryptoError::InvalidLength { .. } => ServiceError::BadRequest(e.to_string()),
            other => ServiceError::Internal(other.to_string()),
        }
    }
}

pub type ServiceResult<T> = Result<T, ServiceError>;
