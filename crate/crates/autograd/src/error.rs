use thiserror::Error;

/// Errors raised by tensor construction and the differentiable ops.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("numerical error: {0}")]
    Numerical(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(TensorError::Shape(msg.into()))
}
