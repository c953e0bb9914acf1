use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),

    #[error("unsupported format: {0}")]
    Unsupported(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("corrupt container {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("checkpoint mismatch: field `{field}` is {found} in the checkpoint but {expected} was requested")]
    ArchitectureMismatch {
        field: String,
        expected: String,
        found: String,
    },

    #[error("non-finite loss in term `{term}` at step {step}")]
    NonFinite { term: &'static str, step: u64 },

    #[error("f0 out of range: {0}")]
    F0Range(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short, stable identifier for the error family; the CLI prints it so
    /// failures can be grepped.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Wav(_) => "wav",
            Error::Unsupported(_) => "unsupported",
            Error::InvalidInput(_) => "invalid-input",
            Error::Shape(_) => "shape",
            Error::Corrupt { .. } => "corrupt",
            Error::ArchitectureMismatch { .. } => "architecture-mismatch",
            Error::NonFinite { .. } => "non-finite",
            Error::F0Range(_) => "f0-range",
            Error::Json(_) => "json",
            Error::Tensor(_) => "tensor",
        }
    }
}
