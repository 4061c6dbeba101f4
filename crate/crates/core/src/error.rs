use thiserror::Error;

use ocfsl_autodiff::AutodiffError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of range or inconsistent.
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    /// A line of an input file could not be used.
    #[error("line {line}: {reason}")]
    Record { line: usize, reason: String },

    /// A learner or memory hit a hard capacity limit.
    #[error("sequence {sequence}: {reason}")]
    Capacity { sequence: u64, reason: String },

    #[error("non-finite loss at training step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("{0}")]
    Invariant(String),

    #[error("average precision is undefined: no known instances")]
    NoKnownInstances,

    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
