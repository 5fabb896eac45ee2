//! Command implementations behind the `mnnh2` binary.

pub mod commands;
pub mod config;

use thiserror::Error;

/// Command failure, classified by process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, configuration, or input files (exit code 2).
    #[error("{0}")]
    Usage(String),
    /// A verification suite reported failing checks (exit code 1).
    #[error("{0}")]
    Verification(String),
    /// A solver or training run broke down numerically (exit code 3).
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Verification(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

fn is_numerical(e: &mnnh2::Error) -> bool {
    match e {
        mnnh2::Error::Numerical(_) => true,
        mnnh2::Error::Sample { source, .. } => is_numerical(source),
        _ => false,
    }
}

impl From<mnnh2::Error> for CliError {
    fn from(e: mnnh2::Error) -> Self {
        if is_numerical(&e) {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}
