use thiserror::Error;

/// Errors surfaced by the core library.
///
/// `Validation` covers malformed inputs (bad shapes, non-finite values,
/// out-of-range labels); `Numerical` covers failures that arise during an
/// otherwise well-formed computation (divergent integration, singular
/// systems). Callers that map errors to process exit codes rely on this
/// distinction.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid input: {0}")]
    Validation(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub fn validation(msg: impl Into<String>) -> Self {
        CoreError::Validation(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        CoreError::Numerical(msg.into())
    }
}
