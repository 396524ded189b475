//! Experiment configuration files.
//!
//! ```toml
//! name = "fig5"
//! catalog = "catalogs/fig5.profiles"   # relative to this file; Table 1 if absent
//! duration_s = 60.0
//! seed = 1
//! interval_s = 1.0                     # summary bucket width
//! warmup_s = 0.0                       # excluded from summary totals
//! drain_s = 5.0                        # time allowed for in-flight work after duration_s
//! jitter = "lognormal:0.05"
//!
//! [topology]
//! workers = 1
//! gpus_per_worker = 1
//! pages_per_gpu = 500
//! network_latency_us = 0.0
//!
//! [scheduler]
//! work_horizon_ns = 5000000
//!
//! [[group]]
//! kind = "closed_loop"
//! ...
//! ```
//!
//! `[[group]]` tables follow the workload file schema.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::profiles::{load_catalog, ModelCatalog, ProfileError};
use crate::scheduler::SchedulerConfig;
use crate::time::{Nanos, TimePoint};
use crate::worker::{JitterSpec, DEFAULT_IOCACHE_BYTES, DEFAULT_PAGES_PER_GPU};
use crate::workload::{GroupKind, GroupSpec, InvocationTrace, WorkloadError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Topology {
    pub workers: u32,
    pub gpus_per_worker: u32,
    pub pages_per_gpu: u32,
    pub iocache_bytes: u64,
    /// One-way controller to worker delay in simulated runs.
    pub network_latency_us: f64,
}

impl Default for Topology {
    fn default() -> Self {
        Topology {
            workers: 1,
            gpus_per_worker: 1,
            pages_per_gpu: DEFAULT_PAGES_PER_GPU,
            iocache_bytes: DEFAULT_IOCACHE_BYTES,
            network_latency_us: 0.0,
        }
    }
}

impl Topology {
    pub fn network_latency(&self) -> Nanos {
        Nanos::from_secs_f64(self.network_latency_us * 1e-6)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub catalog: Option<PathBuf>,
    pub duration_s: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one_second")]
    pub interval_s: f64,
    #[serde(default)]
    pub warmup_s: f64,
    #[serde(default = "five_seconds")]
    pub drain_s: f64,
    #[serde(default)]
    pub jitter: JitterSpec,
    #[serde(default)]
    pub topology: Topology,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    #[serde(default, rename = "group")]
    pub groups: Vec<GroupSpec>,
}

fn one_second() -> f64 {
    1.0
}

fn five_seconds() -> f64 {
    5.0
}

impl ExperimentConfig {
    /// Parses a config and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        let mut cfg: ExperimentConfig = toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_owned(),
            source,
        })?;
        let dir = path.parent().unwrap_or(Path::new("."));
        if let Some(c) = &mut cfg.catalog {
            *c = dir.join(&*c);
        }
        for g in &mut cfg.groups {
            if let Some(t) = &mut g.trace {
                *t = dir.join(&*t);
            }
        }
        Ok(cfg)
    }

    pub fn horizon(&self) -> TimePoint {
        TimePoint::ZERO + Nanos::from_secs_f64(self.duration_s)
    }

    pub fn interval(&self) -> Nanos {
        Nanos::from_secs_f64(self.interval_s)
    }

    pub fn warmup(&self) -> Nanos {
        Nanos::from_secs_f64(self.warmup_s)
    }

    pub fn catalog(&self) -> Result<ModelCatalog, ConfigError> {
        Ok(match &self.catalog {
            Some(p) => load_catalog(p)?,
            None => ModelCatalog::table1(),
        })
    }

    /// Loads the traces of trace groups, indexed like `groups`.
    pub fn traces(&self) -> Result<Vec<Option<Arc<InvocationTrace>>>, ConfigError> {
        self.groups
            .iter()
            .map(|g| match (&g.kind, &g.trace) {
                (GroupKind::Trace, Some(p)) => Ok(Some(Arc::new(InvocationTrace::load(p)?))),
                _ => Ok(None),
            })
            .collect()
    }

    pub fn validate(&self, catalog: &ModelCatalog) -> Result<(), ConfigError> {
        if !(self.duration_s > 0.0) || !(self.interval_s > 0.0) {
            return Err(ConfigError::Invalid("duration_s and interval_s must be > 0".into()));
        }
        if !(self.warmup_s >= 0.0) || !(self.drain_s >= 0.0) {
            return Err(ConfigError::Invalid("warmup_s and drain_s must be >= 0".into()));
        }
        let t = &self.topology;
        if t.workers == 0 || t.gpus_per_worker == 0 || t.pages_per_gpu == 0 {
            return Err(ConfigError::Invalid("topology must have workers, GPUs and pages".into()));
        }
        if !(t.network_latency_us >= 0.0) {
            return Err(ConfigError::Invalid("network_latency_us must be >= 0".into()));
        }
        let s = &self.scheduler;
        if !s.work_horizon.is_positive() || !s.capacity_horizon.is_positive() || s.estimator_window == 0 {
            return Err(ConfigError::Invalid("scheduler horizons and window must be positive".into()));
        }
        if s.lead_slack < Nanos::ZERO || s.tardy_slack < Nanos::ZERO {
            return Err(ConfigError::Invalid("slack must be >= 0".into()));
        }
        for g in &self.groups {
            g.validate(catalog.len())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_with_defaults_and_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(
            &path,
            r#"
                duration_s = 2.0
                jitter = "lognormal:0.05"
                [scheduler]
                tardy_slack_ns = 0
                [[group]]
                kind = "trace"
                models = [0]
                trace = "t.csv"
                slo_ms = 100.0
            "#,
        )
        .unwrap();
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg.topology, Topology::default());
        assert_eq!(cfg.scheduler.tardy_slack, Nanos::ZERO);
        assert_eq!(cfg.scheduler.lead_slack, Nanos::from_millis(1));
        assert_eq!(cfg.jitter, JitterSpec::LogNormal { sigma: 0.05 });
        assert_eq!(cfg.groups[0].trace.as_deref(), Some(dir.path().join("t.csv").as_path()));
        assert!(cfg.validate(&ModelCatalog::table1()).is_ok());
    }

    #[test]
    fn rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(&path, "duration_s = 1.0\nbogus = 3\n").unwrap();
        assert!(matches!(ExperimentConfig::load(&path), Err(ConfigError::Parse { .. })));
    }
}
