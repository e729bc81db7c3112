use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the benchmark library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    Domain(String),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("unsupported operation: {0}")]
    Capability(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("sampler stalled: {0}")]
    Stalled(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.to_string(),
        }
    }
}
