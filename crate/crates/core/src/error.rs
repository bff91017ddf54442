use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid split fractions {0:?}: must be non-negative and sum to 1")]
    InvalidFractions([f64; 3]),

    #[error("corpus of {size} documents is too small for fractions {fractions:?}")]
    CorpusTooSmall { size: usize, fractions: [f64; 3] },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("batch normalization in train mode needs a batch of at least 2 rows, got {0}")]
    BatchTooSmall(usize),

    #[error("no embedding for document id {0:?}")]
    UnknownDocument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic {0:?}, not a model checkpoint")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("file truncated while reading {0}")]
    Truncated(String),

    #[error("tensor {name}: {message}")]
    Shape { name: String, message: String },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("{0} trailing bytes after last tensor")]
    TrailingBytes(usize),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(context: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            context: context.into(),
            expected,
            actual,
        }
    }
}
