use limm_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LimmError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("{source_name}:{line}: {msg}")]
    Parse { source_name: String, line: usize, msg: String },

    #[error("image {path}: {msg}")]
    Image { path: String, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<LimmError> for TensorError {
    fn from(e: LimmError) -> Self {
        match e {
            LimmError::Tensor(t) => t,
            other => TensorError::InvalidArgument(other.to_string()),
        }
    }
}

pub type Result<T, E = LimmError> = std::result::Result<T, E>;

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::LimmError::InvalidArgument(format!($($arg)*))
    };
}
pub(crate) use invalid;
