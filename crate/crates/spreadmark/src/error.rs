use thiserror::Error;

/// Errors raised by the toolkit.
#[derive(Error, Debug)]
pub enum Error {
    /// Inconsistent codec or training configuration.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// An argument violates an operation's preconditions.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Tensor or image shapes do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A loss or activation became non-finite during training.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
