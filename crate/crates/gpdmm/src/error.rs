use std::path::PathBuf;

use thiserror::Error;

/// Application errors, grouped by the exit code they map to.
#[derive(Debug, Error)]
pub enum AppError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Data { path: PathBuf, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] gpdmm_core::Error),
}

impl AppError {
    pub fn data(path: impl Into<PathBuf>, message: impl Into<String>) -> AppError {
        AppError::Data {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> AppError {
        AppError::Io { path: path.into(), source }
    }

    /// 1 usage, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        use gpdmm_core::Error as E;
        match self {
            AppError::Usage(_) | AppError::Config(_) => 1,
            AppError::Data { .. } | AppError::Io { .. } => 2,
            AppError::Core(e) => match e {
                E::Singular { .. } | E::NonFinite(_) | E::Divergence { .. } | E::Undefined(_) => 3,
                _ => 2,
            },
        }
    }
}

pub type AppResult<T> = Result<T, AppError>;
