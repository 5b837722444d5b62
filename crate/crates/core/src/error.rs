use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("indivisible split: {0}")]
    IndivisibleSplit(String),
    #[error("{0}")]
    Data(String),
    #[error("malformed image header at byte {offset}: {reason}")]
    MalformedImage { offset: usize, reason: String },
    #[error("cannot decode {path}: {reason}")]
    Undecodable { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid model state: {0}")]
    State(String),
    #[error("non-finite value encountered: {0}")]
    Numeric(String),
}

/// Coarse grouping used for process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::IndivisibleSplit(_) | Error::State(_) => ErrorClass::Usage,
            Error::Data(_) | Error::MalformedImage { .. } | Error::Undecodable { .. } | Error::Io { .. } => {
                ErrorClass::Data
            }
            Error::Tensor(_) | Error::Numeric(_) => ErrorClass::Numeric,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
