use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error("path does not exist: {}", .0.display())]
    MissingPath(PathBuf),

    #[error("runs are not comparable: {0}")]
    Mismatch(String),

    #[error("unreadable checkpoint {}: {msg}", path.display())]
    Checkpoint { path: PathBuf, msg: String },

    #[error("metrics: {0}")]
    Metrics(String),

    #[error(transparent)]
    Core(#[from] flnn::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    /// Process exit code: 2 for bad input, 3 for a corrupt checkpoint, 1
    /// for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::MissingPath(_) | CliError::Mismatch(_) => 2,
            CliError::Core(flnn::Error::Spec(_) | flnn::Error::Hyperparams(_)) => 2,
            CliError::Checkpoint { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
