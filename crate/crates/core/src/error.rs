use thiserror::Error;

/// Errors surfaced by scene construction, rendering, guidance, and I/O.
#[derive(Debug, Error)]
pub enum GsError {
    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("score provider error: {0}")]
    Provider(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image encode error: {0}")]
    Image(#[from] image::ImageError),
}

impl GsError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        GsError::InvalidArgument(msg.into())
    }

    pub fn empty(msg: impl Into<String>) -> Self {
        GsError::EmptyInput(msg.into())
    }
}
