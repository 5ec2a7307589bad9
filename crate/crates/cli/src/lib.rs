//! Loading run configurations and executing `validate`, `run` and `compare`.

pub mod commands;
pub mod config;

use stagepool_core::{ConfigError, SimError};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("ConfigError: {0}")]
    Config(String),
    #[error("{0}")]
    Invariant(String),
    #[error("IoError: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Invariant(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(c) => c.into(),
            e @ SimError::Invariant { .. } => CliError::Invariant(e.to_string()),
        }
    }
}
