use std::io;

use dabih_core::api::ApiError;
use dabih_core::{CryptoError, StorageError};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const OTHER: i32 = 1;
    pub const AUTH: i32 = 2;
    pub const INTEGRITY: i32 = 3;
    pub const NOT_FOUND: i32 = 4;
    pub const NETWORK: i32 = 5;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("server rejected the request: {} ({})", .error.message, .error.code)]
    Api { status: u16, error: ApiError },
    #[error("network error: {0}")]
    Network(String),
    #[error("integrity check failed: {0}")]
    Integrity(String),
    #[error("{0}")]
    NoEnvelope(String),
    #[error("{0}")]
    Usage(String),
    #[error("upload interrupted")]
    Interrupted,
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error("{0}")]
    Config(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Api { status, error } => match (*status, error.code.as_str()) {
                (401, _) => exit::AUTH,
                (_, "hash_mismatch" | "fingerprint_mismatch" | "integrity") => exit::INTEGRITY,
                (403 | 404, _) => exit::NOT_FOUND,
                _ => exit::OTHER,
            },
            CliError::Network(_) => exit::NETWORK,
            CliError::Integrity(_) => exit::INTEGRITY,
            CliError::NoEnvelope(_) => exit::NOT_FOUND,
            CliError::Crypto(e) if is_integrity(e) => exit::INTEGRITY,
            _ => exit::OTHER,
        }
    }

    /// The server's error code, for API failures.
    pub fn api_code(&self) -> Option<&str> {
        match self {
            CliError::Api { error, .. } => Some(&error.code),
            _ => None,
        }
    }
}

fn is_integrity(e: &CryptoError) -> bool {
    matches!(
        e,
        CryptoError::ChecksumMismatch { .. }
            | CryptoError::InvalidPadding { .. }
            | CryptoError::HashMismatch { .. }
            | CryptoError::MalformedChunk { .. }
    )
}

impl From<StorageError> for CliError {
    fn from(e: StorageError) -> Self {
        match e {
            StorageError::Io(e) => CliError::Io(e),
            other => CliError::Integrity(other.to_string()),
        }
    }
}

/// Chunk verification failures become integrity errors.
pub(crate) fn chunk_error(e: CryptoError) -> CliError {
    if is_integrity(&e) {
        CliError::Integrity(e.to_string())
    } else {
        CliError::Crypto(e)
    }
}

pub type CliResult<T> = Result<T, CliError>;
