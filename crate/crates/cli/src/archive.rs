//! Deterministic zip archives of directories.
//!
//! Entries are path-sorted and carry fixed timestamps and permissions, so
//! zipping the same tree twice yields identical bytes and duplicate
//! detection works across runs.

use std::fs::File;
use std::io::{self, Seek, Write};
use std::path::Path;

use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, DateTime, ZipWriter};

use crate::error::{CliError, CliResult};

fn zip_error(e: zip::result::ZipError) -> CliError {
    match e {
        zip::result::ZipError::Io(e) => CliError::Io(e),
        other => CliError::Io(io::Error::other(other)),
    }
}

pub fn zip_directory<W: Write + Seek>(dir: &Path, out: W) -> CliResult<W> {
    let options = SimpleFileOptions::default()
        .compression_method(CompressionMethod::Deflated)
        .last_modified_time(DateTime::default())
        .unix_permissions(0o644)
        .large_file(true);
    let dir_options = options.unix_permissions(0o755);
    let mut zip = ZipWriter::new(out);
    for entry in walkdir::WalkDir::new(dir).min_depth(1).sort_by_file_name() {
        let entry = entry.map_err(|e| CliError::Io(e.into()))?;
        let rel = entry.path().strip_prefix(dir).expect("walkdir yields paths below its root");
        let name: Vec<_> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
        let name = name.join("/");
        if entry.file_type().is_dir() {
            zip.add_directory(name, dir_options).map_err(zip_error)?;
        } else if entry.file_type().is_file() {
            zip.start_file(name, options).map_err(zip_error)?;
            io::copy(&mut File::open(entry.path())?, &mut zip)?;
        }
    }
    zip.finish().map_err(zip_error)
}
