use std::path::PathBuf;

use bbd_core::blackbox::ApiError;
use bbd_core::trainer::TrainError;

use crate::brf::BrfError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error("integrity: {0}")]
    Integrity(String),
    #[error("{0}")]
    Quota(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Other(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit status for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Integrity(_) => 3,
            Error::Quota(_) => 4,
            Error::Transport(_) => 5,
            Error::Io { .. } | Error::Other(_) => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}

impl From<ApiError> for Error {
    fn from(e: ApiError) -> Self {
        match e {
            ApiError::Quota { .. } => Error::Quota(e.to_string()),
            ApiError::Transport(m) => Error::Transport(m),
            other => Error::Other(other.to_string()),
        }
    }
}

impl From<TrainError> for Error {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Api(a) => a.into(),
            TrainError::Config(m) => Error::Config(m),
            TrainError::MissingCache(_) => Error::Config(e.to_string()),
            other => Error::Other(other.to_string()),
        }
    }
}

impl From<BrfError> for Error {
    fn from(e: BrfError) -> Self {
        Error::Integrity(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Integrity(e.to_string())
    }
}
