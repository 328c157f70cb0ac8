use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("unsupported primitive `{0}`")]
    UnsupportedPrimitive(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value produced by `{op}`")]
    NumericDomain { op: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("insufficient data: need at least {needed} steps, have {available}")]
    InsufficientData { needed: usize, available: usize },

    #[error("{path}: row {row}, column {column}: {message}")]
    Load {
        path: PathBuf,
        row: usize,
        column: usize,
        message: String,
    },

    #[error("{path}: timestamps not strictly ascending at row {row}")]
    Ordering { path: PathBuf, row: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("memory cap of {limit} bytes exceeded")]
    OutOfMemory { limit: usize },

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
