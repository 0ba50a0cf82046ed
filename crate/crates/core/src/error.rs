use thiserror::Error;

/// Errors produced by tensor operations, model assembly and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dim(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("malformed tensor file: {0}")]
    Format(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! dim_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Dim(format!($($arg)*))
    };
}

macro_rules! ensure_dim {
    ($cond:expr, $($arg:tt)*) => {
        let holds: bool = $cond;
        if !holds {
            return Err($crate::error::Error::Dim(format!($($arg)*)));
        }
    };
}

pub(crate) use dim_err;
pub(crate) use ensure_dim;
