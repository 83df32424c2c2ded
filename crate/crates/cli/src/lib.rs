//! Experiment orchestration for the `caama` binary: dataset generation,
//! training runs, evaluation reports, the R_target sweep, the equal-revenue
//! figure data and the deterministic-AMA separation check.

pub mod config;
pub mod experiments;

use std::path::PathBuf;

pub use config::{ExperimentConfig, ModeSel, ReportFormat};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] caama::Error),

    #[error("config {path}: {detail}", path = .path.display())]
    Config { path: PathBuf, detail: String },
}

impl CliError {
    /// 2 for bad input, 3 for a numeric abort, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Core(caama::Error::NonFinite { .. }) => 3,
            CliError::Core(e) if e.is_validation() => 2,
            CliError::Core(_) => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
