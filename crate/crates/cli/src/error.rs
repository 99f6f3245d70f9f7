use std::path::PathBuf;

use forge_core::Error as CoreError;

/// Failure of a CLI command, grouped by exit code.
#[derive(thiserror::Error, Debug)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("missing {artifact}; run `forge {command}` first")]
    Dependency {
        command: &'static str,
        artifact: PathBuf,
    },

    #[error("output root {0} is locked by another run (remove the lock file if that run is gone)")]
    Locked(PathBuf),

    #[error(transparent)]
    Other(CoreError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Training(_) => 4,
            CliError::Dependency { .. } => 5,
            CliError::Locked(_) => 6,
            CliError::Other(_) => 1,
        }
    }

    pub fn dependency(command: &'static str, artifact: impl Into<PathBuf>) -> Self {
        CliError::Dependency {
            command,
            artifact: artifact.into(),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::InvalidConfig(_)
            | CoreError::InvalidParameter { .. }
            | CoreError::UnknownLayer { .. } => {
                CliError::Config(e.to_string())
            }
            CoreError::EmptyDomain(_) | CoreError::Imbalance { .. } | CoreError::Format { .. } => {
                CliError::Data(e.to_string())
            }
            CoreError::TrainingFailure { .. } => CliError::Training(e.to_string()),
            other => CliError::Other(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Other(e.into())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Other(CoreError::InvalidInput(format!("csv: {e}")))
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
