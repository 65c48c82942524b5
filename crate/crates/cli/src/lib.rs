//! The dabih command line client.
//!
//! Uploads are hashed locally, checked for duplicates and resumed where an
//! earlier run stopped. Downloads are decrypted and verified on the client
//! by default. Offline recovery works from a recovery file, the chunk files
//! and a root private key alone.

pub mod archive;
pub mod cli;
pub mod client;
pub mod config;
pub mod download;
pub mod error;
pub mod keys;
pub mod recover;
pub mod upload;

pub use cli::run;
pub use client::Client;
pub use error::{CliError, CliResult};
