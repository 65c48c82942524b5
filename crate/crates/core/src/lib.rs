//! Core building blocks for dabih, an encrypted data storage and sharing
//! platform built on two-stage envelope encryption.
//!
//! File data is split into chunks and sealed with a per-dataset AES-256-CBC
//! key ([`DatasetKey`]). That key is never stored in clear: it is
//! encapsulated with RSA-4096-OAEP to every authorized public key
//! ([`KeyEnvelope`]). Granting access means re-encapsulating the key to a new
//! recipient, so the server never needs to see plaintext at rest.
//!
//! This crate is shared by the server and the command line client:
//!
//! - [`crypto`]: chunk sealing, hashing, key encapsulation, PKCS#8 import and
//!   the compact private-key text format used for QR codes.
//! - [`mnemonic`]: human friendly `adjective_name` dataset identifiers.
//! - [`storage`]: the chunk store and the per-dataset offline recovery file.
//! - [`api`]: JSON wire types of the HTTP API.
//! - [`chunking`]: splitting readers into chunks and computing dataset hashes.

pub mod api;
pub mod chunking;
pub mod crypto;
pub mod mnemonic;
pub mod storage;

pub use crypto::{
    compact::CompactPrivateKey,
    envelope::{decapsulate, encapsulate, KeyEnvelope},
    keys::{import_pkcs8, ImportedKey, PrivateKey, PublicKey, MIN_MODULUS_BITS},
    open_chunk, seal_chunk, ChunkSealed, CryptoError, DatasetKey, Digest,
};
pub use mnemonic::WordLists;
pub use storage::{ChunkStore, FsStore, RecoveryFile, StorageError};

/// Default chunk size: 2 MiB.
pub const DEFAULT_CHUNK_SIZE: usize = 2 * 1024 * 1024;
