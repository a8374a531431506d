use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures from binary container files (feature bundles and checkpoints).
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected \"PSTP\", found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported format version {found} (this build reads version {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("truncated payload: expected {expected} bytes, file has {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("trailing data: expected {expected} bytes, file has {actual}")]
    TrailingBytes { expected: u64, actual: u64 },
    #[error("malformed manifest: {0}")]
    Manifest(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("tape error: {0}")]
    Tape(String),
    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, source: FormatError) -> Self {
        Error::Format { path: path.into(), source }
    }

    /// The inner format error, if this is one.
    pub fn as_format(&self) -> Option<&FormatError> {
        match self {
            Error::Format { source, .. } => Some(source),
            _ => None,
        }
    }
}
