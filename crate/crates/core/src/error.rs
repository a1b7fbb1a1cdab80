use std::path::PathBuf;

use thiserror::Error;

use crate::layout::ValidationReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid layout: {0}")]
    InvalidLayout(ValidationReport),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("unknown concept `{0}`")]
    UnknownConcept(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("checksum mismatch in shard `{shard}`")]
    Checksum { shard: String },

    #[error("non-finite loss at step {step}")]
    NonFinite { step: u64 },

    #[error("training diverged at step {step}: loss {loss} stayed above 10x the initial loss {initial}")]
    Diverged { step: u64, loss: f64, initial: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
