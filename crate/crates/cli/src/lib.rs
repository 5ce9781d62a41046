//! Command-line harness: dataset generation, evolution runs and reports.

pub mod config;
pub mod report;
pub mod run;

pub use config::{load_config, RunConfig, OUTPUT_ROOT_ENV};
pub use report::cmd_report;
pub use run::{cmd_gen_data, cmd_run, RunResult};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    /// Process exit status: 1 for usage and configuration errors, 2 for
    /// failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}
