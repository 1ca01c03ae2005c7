//! Shared error type for the engine.
//!
//! Three broad failure classes matter to callers: bad parameters (caller
//! mistakes, reported with the offending field or value), malformed input
//! data (reported with the byte offset where parsing gave up), and numeric
//! divergence during training (reported with enough state to diagnose the
//! run). The CLI maps these onto distinct exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied parameter violated a precondition. The message
    /// names the parameter and the constraint it broke.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// An input file did not conform to its binary format. `offset` is the
    /// byte position at which the reader detected the problem.
    #[error("malformed data in {path} at byte {offset}: {message}")]
    Format {
        path: String,
        offset: u64,
        message: String,
    },

    /// A loss or update produced a non-finite value. The context string
    /// carries a diagnostic dump (phase/epoch/iteration and the offending
    /// quantities) so a diverged run can be reconstructed.
    #[error("numeric divergence: {0}")]
    Numeric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand for a parameter error with a formatted message.
    pub fn parameter(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    /// Shorthand for a numeric-divergence error.
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
