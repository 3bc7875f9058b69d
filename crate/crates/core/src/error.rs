use thiserror::Error;

/// Errors produced across the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum HlqError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("value error: {0}")]
    Value(String),
    #[error("state error: {0}")]
    State(String),
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },
    #[error("io error: {0}")]
    Io(String),
}

impl HlqError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        HlqError::Dimension(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        HlqError::Parameter(msg.into())
    }

    pub(crate) fn format(offset: usize, reason: impl Into<String>) -> Self {
        HlqError::Format {
            offset,
            reason: reason.into(),
        }
    }
}

impl From<std::io::Error> for HlqError {
    fn from(e: std::io::Error) -> Self {
        HlqError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, HlqError>;
