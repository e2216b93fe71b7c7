use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid {field}: {message}")]
    Invalid { field: String, message: String },

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("training diverged at step {step}: loss={loss}")]
    NonFinite { step: usize, loss: f64 },

    #[error("{0}")]
    Protocol(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Invalid { field: field.into(), message: message.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
