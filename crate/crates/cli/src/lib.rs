//! Command implementations behind the `modex` binary.

use std::path::PathBuf;

pub mod commands;
pub mod config;
pub mod report;
pub mod verify;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("incompatible input: {0}")]
    Incompatible(String),
    #[error("no result files in {}", .0.display())]
    EmptyReport(PathBuf),
    #[error("{0} identity check(s) failed")]
    VerifyFailed(usize),
    #[error(transparent)]
    Core(#[from] modex::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Incompatible(_) => 4,
            CliError::EmptyReport(_) => 5,
            CliError::VerifyFailed(_) | CliError::Core(_) | CliError::Io(_) => 1,
        }
    }
}
