//! Crate-wide error type.
//!
//! Variants map one-to-one onto the failure classes the CLI reports as exit
//! codes: configuration problems, numeric failures during sampling, and an
//! exhausted rejection budget. Everything else (store I/O, retrieval misses)
//! is a configuration-class error from the CLI's point of view.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration for `{field}`: {message}")]
    Config { field: &'static str, message: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("t = {t} is below the schedule clamp t_min = {t_min}")]
    BelowClamp { t: f64, t_min: f64 },

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("data store is empty")]
    EmptyStore,

    #[error("unknown record id `{0}`")]
    UnknownId(String),

    #[error("store line {line} is malformed: {message}")]
    StoreFormat { line: usize, message: String },

    #[error("non-finite state at step {step} (t = {t})")]
    NonFinite { step: usize, t: f64 },

    #[error("rejection sampling gave up after {attempts} attempts")]
    RejectionTimeout { attempts: u64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(field: &'static str, message: impl Into<String>) -> Self {
        Error::Config {
            field,
            message: message.into(),
        }
    }
}
