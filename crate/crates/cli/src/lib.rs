//! Command implementations behind the `hhcable` binary: single runs, step
//! sweeps, stability reports, convergence ladders and trace re-analysis.
//!
//! Every command builds its outputs in memory as `(file name, bytes)` pairs
//! before anything touches the disk, which keeps reruns comparable byte for
//! byte.

pub mod commands;
pub mod config;
pub mod table;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use commands::{cmd_analyze, cmd_order, cmd_run, cmd_stability, cmd_sweep, Outputs};
pub use config::{Experiment, ExperimentConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("unstable: {0}")]
    Unstable(String),
    #[error("analysis precondition unmet: {0}")]
    Precondition(String),
    #[error("rerun differs: {0}")]
    Nondeterministic(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Unstable(_) => 3,
            CliError::Precondition(_) => 4,
            CliError::Nondeterministic(_) | CliError::Io { .. } | CliError::Other(_) => 1,
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
