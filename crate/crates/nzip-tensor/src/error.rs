use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    /// Incompatible shapes for an elementwise or broadcast operation.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    /// Structural violation of an operation's dimension contract.
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("backward() requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("value out of range: {0}")]
    Range(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;
