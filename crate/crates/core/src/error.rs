use std::path::PathBuf;

use crate::autodiff::AutodiffError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("malformed caption at slot {slot}: {reason}")]
    MalformedCaption { slot: usize, reason: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{}: {reason}", path.display())]
    Data { path: PathBuf, reason: String },
    #[error("{} at byte offset {offset}: {reason}", path.display())]
    Format { path: PathBuf, offset: u64, reason: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("numeric failure: {0}")]
    Numeric(String),
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
    Internal,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn data(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => ErrorClass::Config,
            Error::Data { .. }
            | Error::Format { .. }
            | Error::Io { .. }
            | Error::InvalidSpec(_)
            | Error::MalformedCaption { .. } => ErrorClass::Data,
            Error::Numeric(_) | Error::Autodiff(AutodiffError::NonFinite { .. }) => ErrorClass::Numeric,
            Error::Autodiff(_) => ErrorClass::Internal,
        }
    }
}
