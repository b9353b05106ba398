//! Crate-wide error type.
//!
//! Two broad failure classes are distinguished so callers can map them to
//! exit codes and retry behavior:
//!
//! * [`Error::Validation`] — the inputs violate a documented precondition
//!   (bad shapes, missing columns, out-of-range parameters). These are
//!   caller errors and re-running with the same inputs will fail again.
//! * [`Error::Computation`] — the inputs were admissible but a numerical
//!   procedure could not complete (singular system, no FOC root, divergent
//!   process). The message names the offending record or quantity.

/// Error type for all fallible operations in this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Input data or parameters violate a documented precondition.
    #[error("validation: {0}")]
    Validation(String),

    /// A numerical procedure failed on admissible inputs.
    #[error("computation: {0}")]
    Computation(String),

    /// Underlying I/O failure while reading or writing artifacts.
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed delimited data.
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand for a validation error with a formatted message.
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// Shorthand for a computation error with a formatted message.
    pub fn computation(msg: impl Into<String>) -> Self {
        Error::Computation(msg.into())
    }
}
