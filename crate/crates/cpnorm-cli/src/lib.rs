//! Command-line workflows over the cpnorm library: rank estimation,
//! training, compression, and evaluation, with deterministic file outputs.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod outputs;

use std::process::ExitCode;

/// Process-level failure classes; each maps to a documented exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad configuration or usage (exit 2).
    #[error("config error: {0}")]
    Config(String),
    /// Missing or malformed data/checkpoint files (exit 3).
    #[error("data error: {0}")]
    Data(String),
    /// Training blew up numerically (exit 4).
    #[error("divergence: {0}")]
    Divergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Config(_) => ExitCode::from(2),
            CliError::Data(_) => ExitCode::from(3),
            CliError::Divergence(_) => ExitCode::from(4),
        }
    }
}

impl From<cpnorm::Error> for CliError {
    fn from(e: cpnorm::Error) -> Self {
        match e {
            cpnorm::Error::Data(_) | cpnorm::Error::Io(_) => CliError::Data(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
