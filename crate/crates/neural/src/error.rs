use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NeuralError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFiniteValue { op: &'static str },
    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
}

pub type Result<T> = std::result::Result<T, NeuralError>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(NeuralError::ShapeMismatch {
        op,
        detail: detail.into(),
    })
}
