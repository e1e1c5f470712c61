use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, hyperparameters or layer wiring that can never work.
    #[error("configuration error: {0}")]
    Config(String),

    /// Bad input values (labels out of range, empty batches, invalid distributions).
    #[error("input error: {0}")]
    Input(String),

    /// A forward result contained NaN or infinity.
    #[error("numeric error: non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// API misuse, e.g. running backward twice on one tape.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("ingestion error in {path}: {field}: {message}")]
    Ingestion {
        path: PathBuf,
        field: &'static str,
        message: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
}
