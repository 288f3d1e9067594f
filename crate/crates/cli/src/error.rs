//! CLI error type and the exit-code mapping.
//!
//! Exit codes: 0 on success, 2 for configuration problems (including store
//! I/O and retrieval misses), 3 for numeric failures during sampling, 4 for
//! an exhausted rejection budget. Usage errors reported by the argument
//! parser also exit with 2.

use std::fmt;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] cpr_core::Error),
    #[error("{field}: {message}")]
    Config { field: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    TomlParse(#[from] toml::de::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(cpr_core::Error::RejectionTimeout { .. }) => 4,
            CliError::Core(cpr_core::Error::NonFinite { .. }) => 3,
            _ => 2,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// An error tagged with the pipeline stage that produced it, so every
/// failure message names where things went wrong.
#[derive(Debug)]
pub struct Failure {
    pub stage: &'static str,
    pub error: CliError,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error [{}]: {}", self.stage, self.error)
    }
}

/// Attach a stage label to any error convertible into [`CliError`].
pub trait Stage<T> {
    fn stage(self, stage: &'static str) -> Result<T, Failure>;
}

impl<T, E: Into<CliError>> Stage<T> for Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T, Failure> {
        self.map_err(|error| Failure {
            stage,
            error: error.into(),
        })
    }
}
