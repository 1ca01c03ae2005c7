//! Experiment front-end for the incremental-learning engine: TOML
//! configuration, batch subcommands (`gen-data`, `run`, `ablate`, `plot`),
//! and deterministic SVG figure rendering.

pub mod commands;
pub mod config;
pub mod plot;

use gradcil_core::Error;

/// Process exit code for an error: 2 for configuration, input, or I/O
/// problems; 3 for numeric divergence during training.
pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::Numeric(_) => 3,
        Error::Parameter(_) | Error::Format { .. } | Error::Io(_) => 2,
    }
}
