use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A primitive produced NaN or an infinity.
    #[error("numeric error in {op}: non-finite value at flat index {index}")]
    Numeric { op: &'static str, index: usize },

    #[error("malformed tensor file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::TensorError::InvalidArgument(format!($($arg)*))
    };
}
pub(crate) use invalid;
