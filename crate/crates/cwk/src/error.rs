use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CwkError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: malformed file: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("{0}")]
    Core(#[from] clockwork_core::Error),
    /// Bad flags, config schema or parameters. Exit code 2.
    #[error("{0}")]
    Usage(String),
    /// A sequence failed while running. Exit code 1.
    #[error("sequence {sequence}: {source}")]
    Sequence {
        sequence: String,
        source: Box<CwkError>,
    },
}

pub type Result<T, E = CwkError> = std::result::Result<T, E>;

impl CwkError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CwkError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        CwkError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        CwkError::Usage(msg.into())
    }

    /// Process exit code: 2 for usage and configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CwkError::Usage(_) => 2,
            _ => 1,
        }
    }
}
