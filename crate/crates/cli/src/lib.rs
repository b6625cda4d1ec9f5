//! Command-line harness: configuration files, experiment commands, table
//! emission and charts.

pub mod chart;
pub mod commands;
pub mod config;
pub mod io;

use std::path::Path;

use thiserror::Error;

pub use chart::{render_chart, ChartConfig, ChartKind, SeriesSpec};
pub use config::{load_spec, ConfigFile, Experiment};
pub use io::{emit_csv, emit_json, load_csv, load_json};

#[derive(Debug, Error)]
pub enum CliError {
    /// Unusable input: malformed or inconsistent configuration or tables.
    #[error("configuration error: {0}")]
    Config(String),
    /// Failure while running or writing results.
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }

    /// Process exit status: 2 for configuration errors, 3 for runtime errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        match e.kind() {
            csv::ErrorKind::Io(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<noisybp::Error> for CliError {
    fn from(e: noisybp::Error) -> Self {
        match e {
            noisybp::Error::Config(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}
