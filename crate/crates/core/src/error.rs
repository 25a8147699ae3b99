use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, RarError>;

#[derive(Debug, Error)]
pub enum RarError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed record: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("insufficient pool: need {required} items, only {available} available")]
    InsufficientPool { required: usize, available: usize },

    #[error("unknown item id `{0}`")]
    UnknownId(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("embedding provider failed on `{id}`: {message}")]
    Provider { id: String, message: String },

    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: usize, message: String },

    #[error("protocol error: {message} (body: {body})")]
    Protocol { message: String, body: String },

    #[error("on-policy violation: sets sampled at version {sampled}, params at {current}")]
    OffPolicy { sampled: u64, current: u64 },
}

impl RarError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RarError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        RarError::InvalidArgument(msg.into())
    }
}
