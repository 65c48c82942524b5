//! Splitting byte streams into fixed-size chunks and hashing them the same
//! way the server does.

use std::io::{self, Read};

use crate::crypto::{dataset_hash, Digest};

/// Reads up to `buf.len()` bytes, looping over short reads. Returns the
/// number of bytes read; less than `buf.len()` only at end of input.
pub fn read_full<R: Read>(reader: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

/// Iterator over `chunk_size` slices of a reader. The last chunk may be
/// shorter; an empty reader yields nothing.
pub struct Chunks<R> {
    reader: R,
    chunk_size: usize,
    done: bool,
}

impl<R: Read> Chunks<R> {
    pub fn new(reader: R, chunk_size: usize) -> Self {
        assert!(chunk_size > 0, "chunk size must be positive");
        Self {
            reader,
            chunk_size,
            done: false,
        }
    }
}

impl<R: Read> Iterator for Chunks<R> {
    type Item = io::Result<Vec<u8>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let mut buf = vec![0u8; self.chunk_size];
        match read_full(&mut self.reader, &mut buf) {
            Ok(0) => {
                self.done = true;
                None
            }
            Ok(n) => {
                if n < self.chunk_size {
                    self.done = true;
                    buf.truncate(n);
                }
                Some(Ok(buf))
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileHash {
    pub chunk_hashes: Vec<Digest>,
    pub dataset_hash: Digest,
    pub size: u64,
}

/// Hashes every chunk of `reader` and derives the dataset hash.
///
/// Empty input has no chunks and therefore no dataset hash; this is reported
/// as `InvalidInput`.
pub fn hash_reader<R: Read>(reader: R, chunk_size: usize) -> io::Result<FileHash> {
    let mut chunk_hashes = Vec::new();
    let mut size = 0u64;
    for chunk in Chunks::new(reader, chunk_size) {
        let chunk = chunk?;
        size += chunk.len() as u64;
        chunk_hashes.push(Digest::of(&chunk));
    }
    let dataset_hash = dataset_hash(&chunk_hashes)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
    Ok(FileHash {
        chunk_hashes,
        dataset_hash,
        size,
    })
}

/// Number of chunks a file of `size` bytes is split into.
pub fn chunk_count(size: u64, chunk_size: usize) -> u64 {
    size.div_ceil(chunk_size as u64)
}
