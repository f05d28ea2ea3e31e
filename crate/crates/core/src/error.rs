use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Checkpoint failures, kept distinct so callers can tell corruption modes apart.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CheckpointError {
    #[error("bad magic: expected \"GALR\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("payload length mismatch: directory expects {expected} bytes, file holds {actual}")]
    PayloadLengthMismatch { expected: u64, actual: u64 },
    #[error("directory mismatch: {0}")]
    DirectoryMismatch(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("training diverged at epoch {epoch}, step {step}: {reason}")]
    Divergence {
        epoch: usize,
        step: usize,
        reason: String,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short stable tag used as a machine-greppable prefix by the CLI.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Usage(_) => "usage",
            Error::Config(_) => "config",
            Error::Input(_) => "input",
            Error::Format(_) => "format",
            Error::NonFinite { .. } => "non-finite",
            Error::Divergence { .. } => "divergence",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}
pub(crate) use dim_err;
