//! Command-line surface for the leafnet pipeline.
//!
//! Every command resolves and validates its whole configuration before it
//! touches the file system, and leaves a `run_manifest.json` from which the
//! invocation can be replayed.

pub mod args;
pub mod commands;
pub mod config;

use std::fmt;

pub use args::{Cli, Command};
pub use config::{FileConfig, Overrides, RunConfig};

/// Failure classes with distinct process exit codes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CliError {
    /// Bad configuration or inputs; nothing was written. Exit code 1.
    Validation(String),
    /// Work started and failed. Exit code 2.
    Runtime(String),
    /// Some units of work failed, others completed. Exit code 3.
    Partial(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Partial(_) => 3,
        }
    }

    pub(crate) fn validation(e: impl fmt::Display) -> Self {
        CliError::Validation(e.to_string())
    }

    pub(crate) fn runtime(e: impl fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
            CliError::Partial(m) => write!(f, "partial failure: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match commands::dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
