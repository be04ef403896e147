use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("matrix is not positive definite (last jitter tried: {jitter:e})")]
    Singular { jitter: f64 },
    #[error("sequence too short: {0}")]
    TooShort(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("class `{0}` has no training sequence")]
    MissingClass(String),
    #[error("objective became non-finite at iteration {iteration}")]
    Divergence { iteration: usize },
    #[error("metric undefined: {0}")]
    Undefined(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(alloc::format!($($arg)*)) };
}
pub(crate) use shape_err;
