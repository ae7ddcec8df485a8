use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can surface.
///
/// The CLI maps [`Error::Config`] to exit code 1 and everything else to 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    Dimension {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid label {index} for a head of size {size}")]
    InvalidLabel { index: usize, size: usize },

    #[error("buffer `{name}` overflow at capacity {capacity}")]
    BufferOverflow { name: String, capacity: usize },

    #[error("difficulty measurement: action `{0}` has fewer than the required test transitions")]
    UncoveredAction(String),

    #[error("unknown user action `{0}` for curriculum split")]
    UnknownAction(String),

    #[error("empty batch passed to {0}")]
    EmptyBatch(&'static str),

    #[error("degenerate corpus: {0}")]
    DegenerateCorpus(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
