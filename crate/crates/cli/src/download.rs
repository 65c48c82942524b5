//! Downloads with local decryption, and server-side decryption.
//!
//! Both modes write to a temporary file next to the destination and move it
//! into place only after every chunk hash and the dataset hash verified.

use std::fs;
use std::io::{BufWriter, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use dabih_core::api::DatasetInfo;
use dabih_core::chunking::hash_reader;
use dabih_core::crypto::dataset_hash;
use dabih_core::{decapsulate, open_chunk, DatasetKey, Digest, PrivateKey};
use tempfile::NamedTempFile;

use crate::client::Client;
use crate::error::{chunk_error, CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Downloaded {
    pub path: PathBuf,
    pub size: u64,
    pub dataset_hash: Digest,
}

/// Fetches the caller's envelope and opens it with `key`.
pub fn dataset_key(client: &Client, mnemonic: &str, key: &PrivateKey) -> CliResult<(DatasetInfo, DatasetKey)> {
    let info = client.get_dataset(mnemonic)?;
    let envelope = client.get_envelope(mnemonic, Some(&key.fingerprint()))?;
    let dataset_key = decapsulate(key, &envelope)?;
    if Some(dataset_key.fingerprint()) != info.key_fingerprint {
        return Err(CliError::Integrity(format!(
            "the key in the envelope does not match dataset {mnemonic}"
        )));
    }
    Ok((info, dataset_key))
}

/// The default output path: the dataset's base file name in `dir`.
pub fn default_output(dir: &Path, info: &DatasetInfo) -> PathBuf {
    let base = info
        .filename
        .rsplit(['/', '\\'])
        .find(|s| !s.is_empty() && *s != "." && *s != "..")
        .unwrap_or(&info.mnemonic);
    dir.join(base)
}

fn temp_near(out: &Path) -> CliResult<NamedTempFile> {
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    Ok(NamedTempFile::new_in(parent)?)
}

fn expected_hash(info: &DatasetInfo) -> CliResult<Digest> {
    info.dataset_hash
        .ok_or_else(|| CliError::Integrity(format!("dataset {} has no hash", info.mnemonic)))
}

/// Progress callback: chunks done, chunk total.
pub type Progress<'a> = &'a (dyn Fn(u64, u64) + Sync);

/// Downloads ciphertext chunks and decrypts them locally, `workers` at a
/// time. Chunks are verified (CRC-32, plaintext hash) and written in index
/// order.
pub fn download_local(
    client: &Client,
    mnemonic: &str,
    key: &PrivateKey,
    out: &Path,
    workers: usize,
    progress: Progress<'_>,
) -> CliResult<Downloaded> {
    let (info, dataset_key) = dataset_key(client, mnemonic, key)?;
    let expected = expected_hash(&info)?;
    let mut tmp = temp_near(out)?;
    let mut digests = Vec::with_capacity(info.chunks as usize);
    let mut size = 0u64;
    {
        let mut writer = BufWriter::new(tmp.as_file_mut());
        let batch = workers.max(1) as u64;
        let done = AtomicU64::new(0);
        let mut start = 0;
        while start < info.chunks {
            let end = (start + batch).min(info.chunks);
            let results: Vec<CliResult<Vec<u8>>> = std::thread::scope(|s| {
                let handles: Vec<_> = (start..end)
                    .map(|index| {
                        let dataset_key = &dataset_key;
                        let done = &done;
                        s.spawn(move || {
                            let sealed = client.download_chunk(mnemonic, index)?;
                            let plain = open_chunk(dataset_key, &sealed).map_err(chunk_error)?;
                            progress(done.fetch_add(1, Ordering::SeqCst) + 1, info.chunks);
                            Ok(plain)
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("download worker panicked")).collect()
            });
            for plain in results {
                let plain = plain?;
                digests.push(Digest::of(&plain));
                size += plain.len() as u64;
                writer.write_all(&plain)?;
            }
            start = end;
        }
        writer.flush()?;
    }
    let actual = dataset_hash(&digests).map_err(|_| CliError::Integrity("dataset has no chunks".into()))?;
    if actual != expected || size != info.size {
        return Err(CliError::Integrity(format!(
            "reassembled file does not match dataset {mnemonic}"
        )));
    }
    tmp.as_file().sync_all()?;
    tmp.persist(out).map_err(|e| CliError::Io(e.error))?;
    Ok(Downloaded {
        path: out.to_path_buf(),
        size,
        dataset_hash: actual,
    })
}

/// Sends the opened dataset key to the server, which streams the plaintext.
/// The result is re-hashed chunk by chunk before it is moved into place.
pub fn download_server_side(client: &Client, mnemonic: &str, key: &PrivateKey, out: &Path) -> CliResult<Downloaded> {
    let (info, dataset_key) = dataset_key(client, mnemonic, key)?;
    let expected = expected_hash(&info)?;
    let mut tmp = temp_near(out)?;
    let size = {
        let mut writer = BufWriter::new(tmp.as_file_mut());
        let n = client.server_download(mnemonic, &dataset_key, &mut writer)?;
        writer.flush()?;
        n
    };
    if size != info.size {
        return Err(CliError::Integrity(format!(
            "received {size} bytes, dataset {mnemonic} has {}",
            info.size
        )));
    }
    let file = tmp.as_file_mut();
    file.seek(SeekFrom::Start(0))?;
    let chunk_size = info.chunk_size.max(1) as usize;
    let local = hash_reader(std::io::BufReader::new(&*file), chunk_size)?;
    if local.dataset_hash != expected {
        return Err(CliError::Integrity(format!(
            "received data does not match the hash of dataset {mnemonic}"
        )));
    }
    file.sync_all()?;
    tmp.persist(out).map_err(|e| CliError::Io(e.error))?;
    Ok(Downloaded {
        path: out.to_path_buf(),
        size,
        dataset_hash: local.dataset_hash,
    })
}

/// Refuses to clobber an existing file unless `force` is set.
pub fn check_destination(out: &Path, force: bool) -> CliResult<()> {
    if !force && fs::symlink_metadata(out).is_ok() {
        return Err(CliError::Usage(format!("{} exists; pass --force to overwrite", out.display())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use dabih_core::api::DatasetState;

    fn info(filename: &str) -> DatasetInfo {
        DatasetInfo {
            mnemonic: "calm_turing".into(),
            filename: filename.into(),
            size: 1,
            owner: "a".into(),
            state: DatasetState::Complete,
            dataset_hash: None,
            key_fingerprint: None,
            permission: None,
            chunks: 1,
            chunk_size: 1,
            created_at: 0,
        }
    }

    #[test]
    fn output_names_stay_inside_the_directory() {
        let d = Path::new("/out");
        assert_eq!(default_output(d, &info("report.pdf")), Path::new("/out/report.pdf"));
        assert_eq!(default_output(d, &info("proj/b/z.txt")), Path::new("/out/z.txt"));
        assert_eq!(default_output(d, &info("../../etc/passwd")), Path::new("/out/passwd"));
        assert_eq!(default_output(d, &info("..")), Path::new("/out/calm_turing"));
    }

    #[test]
    fn destination_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x");
        check_destination(&p, false).unwrap();
        fs::write(&p, "x").unwrap();
        assert!(check_destination(&p, false).is_err());
        check_destination(&p, true).unwrap();
    }
}
