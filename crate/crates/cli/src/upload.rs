//! Chunked upload with duplicate detection and resume.
//!
//! Per file the client hashes every chunk locally, then:
//!
//! 1. looks for an incomplete upload of the same name, size and chunk size
//!    whose received chunks match the local hashes, and resumes it by sending
//!    only the missing chunks;
//! 2. otherwise starts a new upload with the first chunk's hash. When the
//!    server answers with a matching dataset whose full hash equals the local
//!    dataset hash, the new upload is cancelled and the file is reported as a
//!    duplicate.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{Seek, SeekFrom};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use dabih_core::api::{IncompleteUpload, StartUploadRequest};
use dabih_core::chunking::{hash_reader, read_full, FileHash};
use dabih_core::{Digest, DEFAULT_CHUNK_SIZE};

use crate::client::Client;
use crate::error::{CliError, CliResult};

/// Attempts per chunk when the server reports a transfer hash mismatch or
/// the connection fails.
pub const CHUNK_ATTEMPTS: usize = 3;

#[derive(Debug, Clone)]
pub struct UploadOptions {
    /// Plaintext bytes per chunk; [`DEFAULT_CHUNK_SIZE`] when unset.
    pub chunk_size: Option<u64>,
    pub workers: usize,
    /// Skip files the server already holds.
    pub dedupe: bool,
}

impl Default for UploadOptions {
    fn default() -> Self {
        Self {
            chunk_size: None,
            workers: 4,
            dedupe: true,
        }
    }
}

/// Progress report after each stored chunk.
#[derive(Debug, Clone, Copy)]
pub struct ChunkEvent<'a> {
    pub name: &'a str,
    pub index: u64,
    pub done: u64,
    pub total: u64,
}

/// Progress callback; returning `false` stops the upload, leaving it
/// resumable.
pub type Progress<'a> = &'a (dyn Fn(ChunkEvent<'_>) -> bool + Sync);

pub fn no_progress(_: ChunkEvent<'_>) -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UploadOutcome {
    Uploaded {
        mnemonic: String,
        dataset_hash: Digest,
        /// Indices sent in this run, ascending.
        transferred: Vec<u64>,
        resumed: bool,
    },
    Duplicate {
        existing: String,
        dataset_hash: Digest,
    },
}

impl UploadOutcome {
    pub fn dataset_hash(&self) -> Digest {
        match self {
            UploadOutcome::Uploaded { dataset_hash, .. } | UploadOutcome::Duplicate { dataset_hash, .. } => {
                *dataset_hash
            }
        }
    }
}

/// Hashes `path` the way the server does.
pub fn hash_file(path: &Path, chunk_size: usize) -> CliResult<FileHash> {
    let file = File::open(path)?;
    hash_reader(std::io::BufReader::with_capacity(1 << 16, file), chunk_size).map_err(|e| {
        if e.kind() == std::io::ErrorKind::InvalidInput {
            CliError::Usage(format!("{} is empty; empty files cannot be uploaded", path.display()))
        } else {
            CliError::Io(e)
        }
    })
}

fn resumable<'a>(incomplete: &'a [IncompleteUpload], name: &str, local: &FileHash, chunk_size: u64) -> Option<&'a IncompleteUpload> {
    incomplete
        .iter()
        .filter(|u| u.filename == name && u.size == local.size && u.chunk_size == chunk_size)
        .filter(|u| {
            u.chunks
                .iter()
                .all(|c| local.chunk_hashes.get(c.index as usize) == Some(&c.plain_hash))
        })
        .max_by_key(|u| u.chunks.len())
}

/// Uploads one file under the dataset name `name`.
pub fn upload_file(
    client: &Client,
    path: &Path,
    name: &str,
    opts: &UploadOptions,
    progress: Progress<'_>,
) -> CliResult<UploadOutcome> {
    let mut chunk_size = opts.chunk_size.unwrap_or(DEFAULT_CHUNK_SIZE as u64);
    if chunk_size == 0 {
        return Err(CliError::Usage("chunk size must be positive".into()));
    }
    let mut local = hash_file(path, chunk_size as usize)?;

    let incomplete = client.list_incomplete()?;
    if let Some(session) = resumable(&incomplete, name, &local, chunk_size) {
        let have: BTreeSet<u64> = session.chunks.iter().map(|c| c.index).collect();
        let todo: Vec<u64> = (0..local.chunk_hashes.len() as u64).filter(|i| !have.contains(i)).collect();
        return send_and_finish(client, path, name, &session.mnemonic, chunk_size, &local, todo, true, opts, progress);
    }

    let size = local.size;
    let start = |chunk_size: u64, first: Digest| {
        client.start_upload(&StartUploadRequest {
            filename: name.to_string(),
            size,
            chunk_size: Some(chunk_size),
            first_chunk_hash: Some(first),
        })
    };
    let started = match start(chunk_size, local.chunk_hashes[0]) {
        // The server allows smaller chunks only: retry with its limit.
        Err(CliError::Api { error, .. }) if error.code == "chunk_too_large" && opts.chunk_size.is_none() => {
            let limit = error
                .detail
                .as_ref()
                .and_then(|d| d.get("limit"))
                .and_then(|l| l.as_u64())
                .filter(|l| *l > 0)
                .ok_or(CliError::Api { status: 413, error })?;
            chunk_size = limit;
            local = hash_file(path, chunk_size as usize)?;
            start(chunk_size, local.chunk_hashes[0])?
        }
        other => other?,
    };
    if let Some(hint) = &started.duplicate {
        if opts.dedupe && hint.dataset_hash == local.dataset_hash {
            client.cancel_upload(&started.mnemonic)?;
            return Ok(UploadOutcome::Duplicate {
                existing: hint.mnemonic.clone(),
                dataset_hash: hint.dataset_hash,
            });
        }
    }
    let todo = (0..local.chunk_hashes.len() as u64).collect();
    send_and_finish(client, path, name, &started.mnemonic, chunk_size, &local, todo, false, opts, progress)
}

#[allow(clippy::too_many_arguments)]
fn send_and_finish(
    client: &Client,
    path: &Path,
    name: &str,
    mnemonic: &str,
    chunk_size: u64,
    local: &FileHash,
    todo: Vec<u64>,
    resumed: bool,
    opts: &UploadOptions,
    progress: Progress<'_>,
) -> CliResult<UploadOutcome> {
    let total = local.chunk_hashes.len() as u64;
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let failure: Mutex<Option<CliError>> = Mutex::new(None);
    let sent: Mutex<Vec<u64>> = Mutex::new(Vec::new());
    let already = total - todo.len() as u64;

    let worker = || -> CliResult<()> {
        let mut file = File::open(path)?;
        let mut buf = vec![0u8; chunk_size as usize];
        while !stop.load(Ordering::SeqCst) {
            let Some(&index) = todo.get(next.fetch_add(1, Ordering::SeqCst)) else {
                break;
            };
            file.seek(SeekFrom::Start(index * chunk_size))?;
            let n = read_full(&mut file, &mut buf)?;
            let data = &buf[..n];
            let hash = Digest::of(data);
            if hash != local.chunk_hashes[index as usize] {
                return Err(CliError::Integrity(format!(
                    "{} changed while uploading (chunk {index})",
                    path.display()
                )));
            }
            send_chunk(client, mnemonic, index, &hash, data)?;
            let done = {
                let mut sent = sent.lock().unwrap();
                sent.push(index);
                already + sent.len() as u64
            };
            if !progress(ChunkEvent {
                name,
                index,
                done,
                total,
            }) {
                stop.store(true, Ordering::SeqCst);
            }
        }
        Ok(())
    };

    std::thread::scope(|s| {
        for _ in 0..opts.workers.max(1) {
            s.spawn(|| {
                if let Err(e) = worker() {
                    stop.store(true, Ordering::SeqCst);
                    failure.lock().unwrap().get_or_insert(e);
                }
            });
        }
    });

    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }
    let mut transferred = sent.into_inner().unwrap();
    transferred.sort_unstable();
    if transferred.len() != todo.len() {
        return Err(CliError::Interrupted);
    }
    let finished = client.finish_upload(mnemonic)?;
    if finished.dataset_hash != local.dataset_hash {
        return Err(CliError::Integrity(format!(
            "server dataset hash {} differs from local hash {}",
            finished.dataset_hash, local.dataset_hash
        )));
    }
    Ok(UploadOutcome::Uploaded {
        mnemonic: mnemonic.to_string(),
        dataset_hash: finished.dataset_hash,
        transferred,
        resumed,
    })
}

fn send_chunk(client: &Client, mnemonic: &str, index: u64, hash: &Digest, data: &[u8]) -> CliResult<()> {
    let mut attempt = 1;
    loop {
        match client.upload_chunk(mnemonic, index, hash, data) {
            Ok(_) => return Ok(()),
            Err(e @ (CliError::Network(_) | CliError::Api { .. })) if attempt < CHUNK_ATTEMPTS && retryable(&e) => {
                attempt += 1;
                std::thread::sleep(std::time::Duration::from_millis(200 * attempt as u64));
            }
            Err(e) => return Err(e),
        }
    }
}

fn retryable(e: &CliError) -> bool {
    match e {
        CliError::Network(_) => true,
        CliError::Api { error, .. } => error.code == "hash_mismatch",
        _ => false,
    }
}

/// One upload unit resolved from the command line paths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target {
    File { path: PathBuf, name: String },
    Archive { dir: PathBuf, name: String },
}

impl Target {
    pub fn name(&self) -> &str {
        match self {
            Target::File { name, .. } | Target::Archive { name, .. } => name,
        }
    }
}

fn display_name(path: &Path) -> CliResult<String> {
    let canonical = path.canonicalize()?;
    canonical
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .ok_or_else(|| CliError::Usage(format!("{} has no file name", path.display())))
}

/// Expands command line paths. Directories need `recursive` (one dataset
/// per file, named by relative path) or `zip` (one archive dataset).
pub fn collect_targets(paths: &[PathBuf], recursive: bool, zip: bool) -> CliResult<Vec<Target>> {
    let mut out = Vec::new();
    for path in paths {
        let meta = std::fs::metadata(path)?;
        if meta.is_file() {
            out.push(Target::File {
                path: path.clone(),
                name: display_name(path)?,
            });
        } else if meta.is_dir() && zip {
            out.push(Target::Archive {
                dir: path.clone(),
                name: format!("{}.zip", display_name(path)?),
            });
        } else if meta.is_dir() && recursive {
            let base = display_name(path)?;
            for entry in walkdir::WalkDir::new(path).sort_by_file_name() {
                let entry = entry.map_err(|e| CliError::Io(e.into()))?;
                if !entry.file_type().is_file() {
                    continue;
                }
                let rel = entry.path().strip_prefix(path).expect("walkdir yields paths below its root");
                let rel: Vec<_> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
                out.push(Target::File {
                    path: entry.path().to_path_buf(),
                    name: format!("{base}/{}", rel.join("/")),
                });
            }
        } else if meta.is_dir() {
            return Err(CliError::Usage(format!(
                "{} is a directory; pass --recursive or --zip",
                path.display()
            )));
        } else {
            return Err(CliError::Usage(format!("{} is not a regular file", path.display())));
        }
    }
    Ok(out)
}

/// Uploads a target, zipping directories into a temporary archive first.
pub fn upload_target(
    client: &Client,
    target: &Target,
    opts: &UploadOptions,
    progress: Progress<'_>,
) -> CliResult<UploadOutcome> {
    match target {
        Target::File { path, name } => upload_file(client, path, name, opts, progress),
        Target::Archive { dir, name } => {
            let mut archive = tempfile::NamedTempFile::new()?;
            crate::archive::zip_directory(dir, archive.as_file_mut())?;
            upload_file(client, archive.path(), name, opts, progress)
        }
    }
}
