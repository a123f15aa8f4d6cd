//! Library side of the `cdl` experiment runner.

pub mod commands;
pub mod config;
pub mod train;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 for bad configuration or input, 3 for numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numeric(_) => 3,
            CliError::Config(_) | CliError::Input(_) | CliError::Io(_) => 2,
        }
    }
}
