use std::path::PathBuf;

use crate::checkpoint::CheckpointError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },
    #[error("{}, line {line}: {reason}", path.display())]
    Row { path: PathBuf, line: u64, reason: String },
    #[error("dataset is missing {missing} for: {}", ids.join(", "))]
    Pairing { missing: &'static str, ids: Vec<String> },
    #[error("{}: {source}", path.display())]
    Checkpoint { path: PathBuf, source: CheckpointError },
    #[error("{}: {source}", path.display())]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{0}")]
    Numeric(String),
    #[error(transparent)]
    Core(#[from] gazeprophet_core::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Self::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// 1 usage, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        use gazeprophet_core::Error as C;
        match self {
            Self::Usage(_) => 1,
            Self::Numeric(_) => 3,
            Self::Core(C::NonFinite { .. } | C::Diverged { .. } | C::NonDeterministic { .. }) => 3,
            Self::Core(C::InvalidArgument(_)) => 1,
            _ => 2,
        }
    }
}
