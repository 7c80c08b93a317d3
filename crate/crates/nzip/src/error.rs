use thiserror::Error;

#[derive(Debug, Error)]
pub enum NzipError {
    #[error(transparent)]
    Tensor(#[from] nzip_tensor::TensorError),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed data: {0}")]
    Format(String),
    #[error("unsupported format version {0}")]
    VersionMismatch(u16),
    #[error("model digest mismatch: stream was written with model {expected}, loaded model is {actual}")]
    DigestMismatch { expected: String, actual: String },
    #[error("truncated stream: {0}")]
    Truncated(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("image error: {0}")]
    Image(String),
}

pub type Result<T> = std::result::Result<T, NzipError>;
