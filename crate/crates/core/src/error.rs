use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("wav: {msg} at byte {offset}")]
    Wav { offset: usize, msg: String },

    #[error("midi: {msg} at byte {offset}")]
    Midi { offset: usize, msg: String },

    #[error("checkpoint: {msg} at byte {offset}")]
    Checkpoint { offset: usize, msg: String },

    #[error("grid file: {msg} at byte {offset}")]
    Grid { offset: usize, msg: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value at node #{index} ({op})")]
    NonFinite { index: usize, op: String },

    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error("gradient check failed: {0}")]
    Gradcheck(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("config: {0}")]
    Config(String),

    #[error("missing dependency: {0}")]
    Dependency(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for NaN/Inf during computation and failed gradient checks.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::NonFiniteLoss { .. } | Error::Gradcheck(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
