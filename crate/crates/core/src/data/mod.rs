//! Synthetic phantom volumes, on-disk formats and dataset manifests.

mod checkpoint;
mod manifest;
mod phantom;
mod volume;

use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::ModelError;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use manifest::{split_manifest, Manifest, ManifestRecord, Split, SplitCounts, SubjectEntry};
pub use phantom::{generate_phantom_dataset, generate_subject, PhantomConfig};
pub use volume::{load_volume, normalize_unit, save_volume, Volume, VOLUME_MAGIC};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: &'static str, found: String },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("truncated payload: header needs {expected} bytes, file has {found}")]
    Truncated { expected: usize, found: usize },
    #[error("payload size mismatch: header needs {expected} bytes, file has {found}")]
    SizeMismatch { expected: usize, found: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid data config: {0}")]
    InvalidConfig(String),
    #[error("unsatisfiable phantom constraints: {0}")]
    Unsatisfiable(String),
    #[error("split requests {requested} labeled subjects but only {available} exist")]
    OverSubscribed { requested: usize, available: usize },
    #[error("duplicate subject id {0:?}")]
    DuplicateSubject(String),
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

/// Writes `bytes` next to `path` and renames into place, so readers never see
/// a partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

/// Parses `key=value` tokens of a header line (after the magic).
pub(crate) fn header_fields(line: &str) -> Result<Vec<(&str, &str)>> {
    line.split_ascii_whitespace()
        .map(|tok| tok.split_once('=').ok_or_else(|| DataError::Header(format!("token {tok:?} is not key=value"))))
        .collect()
}

pub(crate) fn field<'a>(fields: &[(&str, &'a str)], key: &str) -> Result<&'a str> {
    fields
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| *v)
        .ok_or_else(|| DataError::Header(format!("missing field {key:?}")))
}

pub(crate) fn parse_num<N: std::str::FromStr>(key: &str, value: &str) -> Result<N> {
    value.parse().map_err(|_| DataError::Header(format!("field {key}={value:?} is not a number")))
}

/// Splits a file into its first line (without newline) and the rest.
pub(crate) fn split_header<'a>(bytes: &'a [u8], magic: &'static str) -> Result<(&'a str, &'a [u8])> {
    let end = bytes.iter().position(|&b| b == b'\n');
    let head = &bytes[..end.unwrap_or(bytes.len().min(64))];
    let found = String::from_utf8_lossy(head.split(|&b| b == b' ').next().unwrap_or(&[])).into_owned();
    if found != magic {
        return Err(DataError::BadMagic { expected: magic, found });
    }
    let end = end.ok_or_else(|| DataError::Header("header line not terminated".into()))?;
    let line = std::str::from_utf8(&bytes[..end]).map_err(|_| DataError::Header("header is not UTF-8".into()))?;
    Ok((&line[magic.len()..], &bytes[end + 1..]))
}

pub(crate) fn check_token(what: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(|c| c.is_whitespace() || c == '=') {
        return Err(DataError::InvalidConfig(format!("{what} {s:?} must be non-empty without whitespace or '='")));
    }
    Ok(())
}
