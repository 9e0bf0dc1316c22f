use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A file did not match its expected layout.
    #[error("format error: {0}")]
    Format(String),

    /// A value inside an otherwise well-formed file was rejected.
    #[error("data error at row {row}: {msg}")]
    Data { row: usize, msg: String },

    #[error("index {index} out of range for {len} items")]
    Index { index: usize, len: usize },

    #[error("invalid argument: {0}")]
    Argument(String),

    /// Optimization produced a non-finite value or otherwise could not continue.
    #[error("training error: {0}")]
    Training(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! arg_err {
    ($($t:tt)*) => {
        $crate::error::Error::Argument(format!($($t)*))
    };
}
pub(crate) use arg_err;
