use thiserror::Error;

/// Errors raised by the reward-model laboratory.
#[derive(Debug, Error)]
pub enum WarmError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Something stopped being finite; `index` says where.
    #[error("numerical failure in {context} at index {index}")]
    NumericalFailure { context: &'static str, index: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl WarmError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        WarmError::InvalidArgument(msg.into())
    }
}

impl From<serde_json::Error> for WarmError {
    fn from(e: serde_json::Error) -> Self {
        WarmError::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, WarmError>;
