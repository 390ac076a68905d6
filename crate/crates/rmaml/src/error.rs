use std::path::PathBuf;

use rmaml_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
}

impl RunError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RunError::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        RunError::Format { path: path.into(), detail: detail.into() }
    }

    /// 2 for configuration and input errors, 3 for numeric failures during a
    /// run, 1 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Format { .. } => 2,
            RunError::Core(CoreError::NonFiniteGradient { .. } | CoreError::NonFiniteLoss { .. }) => 3,
            RunError::Core(_) => 2,
            RunError::Io { .. } => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, RunError>;
