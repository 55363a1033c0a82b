use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Core(#[from] unisign_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {source}")]
    Json { path: PathBuf, line: usize, source: serde_json::Error },
    #[error("{path}: {source}")]
    Toml { path: PathBuf, source: toml::de::Error },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("{path}: {reason}")]
    Media { path: PathBuf, reason: String },
}

impl RunError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        RunError::Io { path: path.to_path_buf(), source }
    }

    /// Exit status for the command line: 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Toml { .. } | RunError::Config(_) => 2,
            RunError::Core(e) => match e {
                unisign_core::Error::InvalidConfig { .. }
                | unisign_core::Error::ConfigMismatch(_)
                | unisign_core::Error::MissingPrereqCheckpoint { .. } => 2,
                _ => 1,
            },
            _ => 1,
        }
    }
}

pub type Result<T, E = RunError> = std::result::Result<T, E>;
