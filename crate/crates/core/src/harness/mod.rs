//! Experiment runner and telemetry.

pub mod config;
pub mod plot;
pub mod sim;
pub mod summary;
pub mod telemetry;
pub mod wall;

use std::path::Path;

pub use config::{ConfigError, ExperimentConfig, Topology};
pub use sim::{run_simulated, Simulation};
pub use summary::{summarize, SummaryReport};
pub use telemetry::{ActionRecord, RequestRecord};
pub use wall::run_wall;

/// Logs of one run.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub requests: Vec<RequestRecord>,
    pub actions: Vec<ActionRecord>,
    /// Admitted requests still unanswered when the run stopped.
    pub pending: usize,
}

impl RunOutput {
    pub fn summarize(&self, cfg: &ExperimentConfig) -> SummaryReport {
        let mut r = summarize(&self.requests, &self.actions, cfg.interval(), cfg.warmup());
        r.name = cfg.name.clone();
        r
    }

    /// Ok responses that exceeded their SLO.
    pub fn slo_violations(&self) -> usize {
        self.requests.iter().filter(|r| r.violates_slo()).count()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum OutputError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Toml(#[from] toml::ser::Error),
}

/// Writes `requests.csv`, `actions.csv` and `summary.toml` into `dir`.
pub fn write_outputs(dir: &Path, run: &RunOutput, report: &SummaryReport) -> Result<(), OutputError> {
    std::fs::create_dir_all(dir)?;
    telemetry::write_requests(&dir.join("requests.csv"), &run.requests)?;
    telemetry::write_actions(&dir.join("actions.csv"), &run.actions)?;
    std::fs::write(dir.join("summary.toml"), toml::to_string(report)?)?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<SummaryReport, Box<dyn std::error::Error + Send + Sync>> {
    Ok(toml::from_str(&std::fs::read_to_string(path)?)?)
}
