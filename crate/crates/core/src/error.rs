use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, EdmaeError>;

#[derive(Debug, Error)]
pub enum EdmaeError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("internal consistency error: {0}")]
    Internal(String),

    #[error("parse error in {file} at byte {offset}: {message}")]
    Parse {
        file: String,
        offset: usize,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Training produced a non-finite loss; carries the last checkpoint whose
    /// parameters were all finite.
    #[error("training diverged at step {step}: {reason}")]
    Diverged {
        step: usize,
        reason: String,
        last_good: Box<crate::checkpoint::Checkpoint>,
    },
}

impl EdmaeError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EdmaeError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            EdmaeError::Config(_) | EdmaeError::Usage(_) => 2,
            _ => 1,
        }
    }
}
