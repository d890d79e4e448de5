use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read config {path}: {source}")]
    ConfigFile { path: PathBuf, source: std::io::Error },

    #[error("config {path}: {source}")]
    ConfigParse { path: PathBuf, source: serde_json::Error },

    #[error("invalid config: {0}")]
    Invalid(String),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Core(#[from] cimq_core::Error),
}

impl CliError {
    /// Exit code 2 for problems with the user's inputs, 1 for failures
    /// while running.
    pub fn is_validation(&self) -> bool {
        match self {
            CliError::ConfigFile { .. } | CliError::ConfigParse { .. } | CliError::Invalid(_) => true,
            CliError::Core(e) => e.is_validation(),
            _ => false,
        }
    }

    pub fn exit_code(&self) -> u8 {
        if self.is_validation() {
            2
        } else {
            1
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { path, source }
}
