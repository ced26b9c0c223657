//! Crate-wide error type.
//!
//! Every fallible operation returns [`Result`]. Errors raised inside a
//! federated round are wrapped in [`Error::Round`] so the failing round is
//! visible in the report.

use thiserror::Error;

/// Errors produced by dataset handling, training, attacks, defenses,
/// detection and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    /// A dataset line could not be parsed. Line numbers are 1-based.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// No usable records survived loading and filtering.
    #[error("dataset is empty after filtering")]
    EmptyDataset,

    /// An invalid configuration value or parameter combination.
    #[error("config error: {0}")]
    Config(String),

    /// A sampling step could not produce the requested draw.
    #[error("sampling error: {0}")]
    Sampling(String),

    /// An attack could not be set up for the current client or round.
    #[error("attack setup error: {0}")]
    AttackSetup(String),

    /// Vector or table dimensions disagree.
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },

    /// Detector training needs both classes present.
    #[error("detector dataset contains a single class")]
    SingleClass,

    /// A checkpoint or log file is malformed.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Numeric domain violation (NaN or infinite where finite is required).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// I/O failure while reading or writing an artifact.
    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// An error raised while executing a specific federated round.
    #[error("round {round} (epoch {epoch}): {source}")]
    Round {
        epoch: usize,
        round: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Attaches round context to an error bubbling out of a round body.
    pub fn in_round(self, epoch: usize, round: usize) -> Self {
        Error::Round {
            epoch,
            round,
            source: Box::new(self),
        }
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
