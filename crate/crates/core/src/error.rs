use lt_autodiff::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LtError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("{op} is not defined for the {variant} variant")]
    Variant {
        op: &'static str,
        variant: &'static str,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("stream out of order: step {got} after {prev}")]
    OutOfOrder { prev: usize, got: usize },
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Incompatible(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LtError>;

pub(crate) fn invalid(msg: impl Into<String>) -> LtError {
    LtError::InvalidArgument(msg.into())
}
