use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures while reading or validating one of the binary file formats.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated input: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated { offset: usize, needed: usize, available: usize },
    #[error("payload length mismatch: extents imply {expected} bytes, found {found}")]
    PayloadLength { expected: usize, found: usize },
    #[error("invalid extents {0:?}")]
    Extents(Vec<u32>),
    #[error("non-finite value at element {0}")]
    NonFinite(usize),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { stored: u32, computed: u32 },
    #[error("entry name is not valid UTF-8")]
    Utf8,
    #[error("duplicate entry {0:?}")]
    DuplicateEntry(String),
    #[error("missing entry {0:?}")]
    MissingEntry(String),
    #[error("unexpected entry {0:?}")]
    UnexpectedEntry(String),
    #[error("shape mismatch for {name:?}: checkpoint {found:?}, model {expected:?}")]
    EntryShape { name: String, expected: [usize; 4], found: [usize; 4] },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid gradient oracle: {0}")]
    OracleInvalid(String),
    #[error("invalid value: {0}")]
    Value(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("{path}: {source}")]
    File { path: PathBuf, source: FormatError },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for failures caused by bad user input (configuration, shapes,
    /// malformed files, inconsistent datasets) as opposed to runtime faults.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Shape(_)
                | Error::Config(_)
                | Error::Value(_)
                | Error::Dataset(_)
                | Error::File { .. }
                | Error::Format(_)
                | Error::Io { .. }
        )
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
pub(crate) use config_err;
pub(crate) use shape_err;
