//! Command-line front end: run configuration and the `train`, `generate`,
//! `eval` and `sweep-lambda` commands.

pub mod commands;
pub mod config;

use std::fmt;

/// Failure of a command. Usage errors exit with status 2, runtime errors
/// with status 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CliError {
    /// Bad arguments, configuration or input data.
    Usage(String),
    /// Failure while computing.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}
