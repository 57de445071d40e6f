use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),

    #[error("unknown config key `{0}`")]
    UnknownConfigKey(String),

    #[error("{path}:{line}: {msg}")]
    Record { path: PathBuf, line: usize, msg: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("training diverged at step {step}: non-finite total loss")]
    Diverged { step: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("judge: {0}")]
    Judge(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape { expected: expected.to_string(), got: got.to_string() }
    }
}
