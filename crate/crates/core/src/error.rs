//! Crate-wide error type.

/// Errors produced by tensor ops, geometry, file formats and the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shapes of the operands do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    /// A scalar or structural argument is outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// A NaN or infinity was found where the contract requires finite values.
    #[error("non-finite value: {0}")]
    NonFinite(String),
    /// Training aborted because the loss left the finite range.
    #[error("training diverged: {0}")]
    Diverged(String),
    /// A file did not conform to its expected format.
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
