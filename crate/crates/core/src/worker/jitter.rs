use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::Nanos;

#[derive(Debug, Error, PartialEq)]
pub enum JitterError {
    #[error("invalid jitter spec `{0}` (expected `none` or `lognormal:<sigma>`)")]
    Syntax(String),
    #[error("lognormal sigma must be finite and non-negative, got {0}")]
    Sigma(f64),
}

/// Multiplicative noise applied to emulated Load and Exec durations.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum JitterSpec {
    #[default]
    None,
    /// Factor `exp(N(0, sigma²))`, median 1.
    LogNormal { sigma: f64 },
}

impl FromStr for JitterSpec {
    type Err = JitterError;
    fn from_str(s: &str) -> Result<Self, JitterError> {
        let s = s.trim();
        if s == "none" {
            return Ok(JitterSpec::None);
        }
        let sigma = s
            .strip_prefix("lognormal:")
            .and_then(|v| v.parse::<f64>().ok())
            .ok_or_else(|| JitterError::Syntax(s.to_string()))?;
        if !sigma.is_finite() || sigma < 0.0 {
            return Err(JitterError::Sigma(sigma));
        }
        Ok(JitterSpec::LogNormal { sigma })
    }
}

impl TryFrom<String> for JitterSpec {
    type Error = JitterError;
    fn try_from(s: String) -> Result<Self, JitterError> {
        s.parse()
    }
}

impl From<JitterSpec> for String {
    fn from(j: JitterSpec) -> String {
        j.to_string()
    }
}

impl fmt::Display for JitterSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            JitterSpec::None => write!(f, "none"),
            JitterSpec::LogNormal { sigma } => write!(f, "lognormal:{sigma}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Jitter {
    dist: Option<LogNormal<f64>>,
    rng: ChaCha8Rng,
}

impl Jitter {
    pub fn new(spec: JitterSpec, seed: u64) -> Self {
        let dist = match spec {
            JitterSpec::None => None,
            JitterSpec::LogNormal { sigma } if sigma == 0.0 => None,
            JitterSpec::LogNormal { sigma } => {
                Some(LogNormal::new(0.0, sigma).expect("sigma validated on parse"))
            }
        };
        Jitter {
            dist,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Scales `base` by one draw; never returns less than 1ns.
    pub fn apply(&mut self, base: Nanos) -> Nanos {
        match &self.dist {
            None => base,
            Some(d) => {
                let f = d.sample(&mut self.rng);
                Nanos(((base.0 as f64) * f).round().max(1.0) as i64)
            }
        }
    }
}
