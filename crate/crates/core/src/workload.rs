//! Client load generation: open-loop Poisson arrivals, closed-loop clients
//! and minute-granularity invocation trace replay.
//!
//! A workload file is TOML with one `[[group]]` table per client group:
//!
//! ```toml
//! [[group]]
//! name = "major"
//! kind = "open_loop"          # open_loop | closed_loop | trace
//! models = { first = 1, count = 3600 }   # or an explicit list: [0, 1, 2]
//! rate = 1000.0               # open_loop: total r/s over the active models
//! concurrency = 16            # closed_loop: outstanding requests per model
//! think_ms = 0.0              # closed_loop: pause before resubmitting
//! trace = "maf.csv"           # trace: CSV `workload_id,minute,count`
//! scale = 1.0                 # trace: multiplier on every count
//! scale_steps = [1.0, 2.0]     # trace: extra multiplier, one step per scale_step_s
//! scale_step_s = 10.0
//! minute_s = 60.0             # trace: replayed length of one trace minute
//! slo_ms = 100.0
//! slo_steps_ms = [2.9, 4.35]  # optional SLO schedule, one step per slo_step_s
//! slo_step_s = 30.0
//! start_s = 0.0
//! end_s = 60.0                # defaults to the experiment duration
//! activate_every_s = 1.0      # optional: models join one at a time
//! ```

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::profiles::ModelId;
use crate::time::{Nanos, TimePoint};

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("group {group}: {reason}")]
    Invalid { group: String, reason: String },
    #[error("trace workload {0} has no model mapping")]
    Unmapped(u32),
    #[error("trace {path}: {source}")]
    Trace { path: PathBuf, source: csv::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    OpenLoop,
    ClosedLoop,
    Trace,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSet {
    List(Vec<ModelId>),
    Range { first: ModelId, count: u32 },
}

impl ModelSet {
    pub fn to_vec(&self) -> Vec<ModelId> {
        match self {
            ModelSet::List(v) => v.clone(),
            ModelSet::Range { first, count } => (*first..*first + *count).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    #[serde(default)]
    pub name: String,
    pub kind: GroupKind,
    pub models: ModelSet,
    #[serde(default)]
    pub rate: f64,
    #[serde(default = "one")]
    pub concurrency: u32,
    #[serde(default)]
    pub think_ms: f64,
    #[serde(default)]
    pub trace: Option<PathBuf>,
    #[serde(default = "unit")]
    pub scale: f64,
    #[serde(default)]
    pub scale_steps: Vec<f64>,
    #[serde(default)]
    pub scale_step_s: f64,
    #[serde(default = "sixty")]
    pub minute_s: f64,
    pub slo_ms: f64,
    #[serde(default)]
    pub slo_steps_ms: Vec<f64>,
    #[serde(default)]
    pub slo_step_s: f64,
    #[serde(default)]
    pub start_s: f64,
    #[serde(default)]
    pub end_s: Option<f64>,
    #[serde(default)]
    pub activate_every_s: Option<f64>,
}

fn one() -> u32 {
    1
}

fn unit() -> f64 {
    1.0
}

fn sixty() -> f64 {
    60.0
}

impl GroupSpec {
    fn base(name: &str, kind: GroupKind, models: ModelSet, slo_ms: f64) -> Self {
        GroupSpec {
            name: name.to_string(),
            kind,
            models,
            rate: 0.0,
            concurrency: one(),
            think_ms: 0.0,
            trace: None,
            scale: unit(),
            scale_steps: Vec::new(),
            scale_step_s: 0.0,
            minute_s: sixty(),
            slo_ms,
            slo_steps_ms: Vec::new(),
            slo_step_s: 0.0,
            start_s: 0.0,
            end_s: None,
            activate_every_s: None,
        }
    }

    /// Poisson arrivals at `rate` r/s in total, spread evenly over `models`.
    pub fn open_loop(name: &str, models: ModelSet, rate: f64, slo_ms: f64) -> Self {
        GroupSpec {
            rate,
            ..Self::base(name, GroupKind::OpenLoop, models, slo_ms)
        }
    }

    /// `concurrency` outstanding requests per model.
    pub fn closed_loop(name: &str, models: ModelSet, concurrency: u32, slo_ms: f64) -> Self {
        GroupSpec {
            concurrency,
            ..Self::base(name, GroupKind::ClosedLoop, models, slo_ms)
        }
    }

    pub fn validate(&self, models_in_catalog: usize) -> Result<(), WorkloadError> {
        let bad = |reason: String| WorkloadError::Invalid {
            group: self.name.clone(),
            reason,
        };
        let models = self.models.to_vec();
        if models.is_empty() {
            return Err(bad("no models".into()));
        }
        if let Some(&m) = models.iter().find(|&&m| m as usize >= models_in_catalog) {
            return Err(bad(format!("model {m} not in catalog")));
        }
        match self.kind {
            GroupKind::OpenLoop if !(self.rate > 0.0) => return Err(bad(format!("rate must be > 0, got {}", self.rate))),
            GroupKind::ClosedLoop if self.concurrency == 0 => return Err(bad("concurrency must be >= 1".into())),
            GroupKind::Trace if self.trace.is_none() => return Err(bad("trace path missing".into())),
            GroupKind::Trace if !(self.scale > 0.0) || !(self.minute_s > 0.0) => {
                return Err(bad("scale and minute_s must be > 0".into()))
            }
            _ => {}
        }
        if !(self.slo_ms > 0.0) || self.slo_steps_ms.iter().any(|&s| !(s > 0.0)) {
            return Err(bad("SLOs must be > 0".into()));
        }
        if self.scale_steps.iter().any(|&s| !(s >= 0.0)) || (!self.scale_steps.is_empty() && !(self.scale_step_s > 0.0)) {
            return Err(bad("scale_steps must be >= 0 with a positive scale_step_s".into()));
        }
        if !self.slo_steps_ms.is_empty() && !(self.slo_step_s > 0.0) {
            return Err(bad("slo_step_s must be > 0 with slo_steps_ms".into()));
        }
        if self.activate_every_s.is_some_and(|a| !(a >= 0.0)) || self.think_ms < 0.0 || self.start_s < 0.0 {
            return Err(bad("negative time".into()));
        }
        Ok(())
    }

    pub fn start(&self) -> TimePoint {
        TimePoint::ZERO + Nanos::from_secs_f64(self.start_s)
    }

    pub fn end(&self, horizon: TimePoint) -> TimePoint {
        self.end_s
            .map_or(horizon, |e| TimePoint::ZERO + Nanos::from_secs_f64(e))
            .min(horizon)
    }

    /// SLO for a request issued at `t`.
    pub fn slo_at(&self, t: TimePoint) -> Nanos {
        if self.slo_steps_ms.is_empty() {
            return Nanos::from_millis_f64(self.slo_ms);
        }
        let step = Nanos::from_secs_f64(self.slo_step_s);
        let k = ((t - self.start()).0.max(0) / step.0) as usize;
        Nanos::from_millis_f64(self.slo_steps_ms[k.min(self.slo_steps_ms.len() - 1)])
    }

    /// Trace scale for a trace minute starting at `t`.
    pub fn scale_at(&self, t: TimePoint) -> f64 {
        if self.scale_steps.is_empty() {
            return self.scale;
        }
        let step = Nanos::from_secs_f64(self.scale_step_s);
        let k = ((t - self.start()).0.max(0) / step.0) as usize;
        self.scale * self.scale_steps[k.min(self.scale_steps.len() - 1)]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    #[serde(default, rename = "group")]
    pub groups: Vec<GroupSpec>,
}

/// One client request as issued.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arrival {
    pub at: TimePoint,
    pub model: ModelId,
    pub slo: Nanos,
    pub group: usize,
}

/// Poisson arrival times at `rate` r/s in `[start, end)`.
pub fn gen_open_loop(rate: f64, seed: u64, start: TimePoint, end: TimePoint) -> Vec<TimePoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let exp = Exp::new(rate).expect("rate > 0");
    let mut out = Vec::new();
    let mut t = start;
    loop {
        t = t + gap(&exp, &mut rng);
        if t >= end {
            return out;
        }
        out.push(t);
    }
}

fn gap(exp: &Exp<f64>, rng: &mut ChaCha8Rng) -> Nanos {
    Nanos((exp.sample(rng) * 1e9).round().max(1.0) as i64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRow {
    pub workload_id: u32,
    pub minute: u32,
    pub count: u64,
}

/// Per-minute invocation counts, one row per (workload, minute).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InvocationTrace {
    pub rows: Vec<TraceRow>,
}

impl InvocationTrace {
    pub fn load(path: &Path) -> Result<Self, WorkloadError> {
        let err = |source| WorkloadError::Trace {
            path: path.to_owned(),
            source,
        };
        let mut r = csv::Reader::from_path(path).map_err(err)?;
        let rows = r.deserialize().collect::<Result<Vec<TraceRow>, _>>().map_err(err)?;
        Ok(InvocationTrace { rows })
    }

    pub fn save(&self, path: &Path) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_path(path)?;
        if self.rows.is_empty() {
            w.write_record(["workload_id", "minute", "count"])?;
        }
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn workloads(&self) -> u32 {
        self.rows.iter().map(|r| r.workload_id + 1).max().unwrap_or(0)
    }

    pub fn minutes(&self) -> u32 {
        self.rows.iter().map(|r| r.minute + 1).max().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.rows.iter().map(|r| r.count).sum()
    }

    /// Total invocations per minute.
    pub fn per_minute(&self) -> Vec<u64> {
        let mut v = vec![0; self.minutes() as usize];
        for r in &self.rows {
            v[r.minute as usize] += r.count;
        }
        v
    }
}

/// Scaled count: `floor(scale)` copies of `count` plus a Binomial thinning
/// by the fractional part.
pub fn scaled_count(count: u64, scale: f64, rng: &mut impl Rng) -> u64 {
    let whole = scale.trunc();
    let frac = scale - whole;
    let mut n = count * whole as u64;
    if frac > 0.0 && count > 0 {
        n += Binomial::new(count, frac).expect("valid binomial").sample(rng);
    }
    n
}

/// Arrivals of one trace replayed into `mapping[workload_id]`, each minute
/// lasting `minute`, sorted by time.
pub fn replay_trace(
    trace: &InvocationTrace,
    mapping: &dyn Fn(u32) -> Option<ModelId>,
    scale: f64,
    seed: u64,
    start: TimePoint,
    minute: Nanos,
) -> Result<Vec<(TimePoint, ModelId)>, WorkloadError> {
    replay_trace_scaled(trace, mapping, &|_| scale, seed, start, minute)
}

/// [`replay_trace`] with a scale that depends on each minute's start time.
pub fn replay_trace_scaled(
    trace: &InvocationTrace,
    mapping: &dyn Fn(u32) -> Option<ModelId>,
    scale: &dyn Fn(TimePoint) -> f64,
    seed: u64,
    start: TimePoint,
    minute: Nanos,
) -> Result<Vec<(TimePoint, ModelId)>, WorkloadError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for r in &trace.rows {
        let m = mapping(r.workload_id).ok_or(WorkloadError::Unmapped(r.workload_id))?;
        let base = start + minute * r.minute as i64;
        for _ in 0..scaled_count(r.count, scale(base), &mut rng) {
            out.push((base + Nanos(rng.random_range(0..minute.0)), m));
        }
    }
    out.sort();
    Ok(out)
}

/// Invocation pattern of a synthetic function.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FunctionClass {
    /// High, steady rate.
    Heavy,
    /// Rarely invoked.
    Cold,
    /// Mostly idle with occasional bursts.
    Bursty,
    /// Invoked in a spike every `period` minutes.
    Periodic { period: u32 },
}

/// Class of synthetic workload `w`.
pub fn synthetic_class(w: u32) -> FunctionClass {
    match w % 10 {
        0 => FunctionClass::Heavy,
        1..=3 => FunctionClass::Cold,
        4 | 5 => FunctionClass::Bursty,
        6 => FunctionClass::Periodic { period: 60 },
        7 => FunctionClass::Periodic { period: 15 },
        _ => FunctionClass::Periodic { period: 5 },
    }
}

/// A seeded MAF-like trace of `workloads` functions over `minutes`.
/// `mean_rate` is the target average invocations per minute per function.
pub fn synthetic_maf(workloads: u32, minutes: u32, mean_rate: f64, seed: u64) -> InvocationTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for w in 0..workloads {
        let class = synthetic_class(w);
        let level: f64 = rng.random_range(0.5..1.5);
        let phase = rng.random_range(0..60u32);
        let mut burst_left = 0u32;
        for minute in 0..minutes {
            let lambda = match class {
                FunctionClass::Heavy => 3.0 * mean_rate * level,
                FunctionClass::Cold => 0.05 * mean_rate * level,
                FunctionClass::Bursty => {
                    if burst_left == 0 && rng.random_bool(0.05) {
                        burst_left = rng.random_range(1..4);
                    }
                    if burst_left > 0 {
                        burst_left -= 1;
                        6.0 * mean_rate * level
                    } else {
                        0.2 * mean_rate * level
                    }
                }
                FunctionClass::Periodic { period } => {
                    if (minute + phase) % period == 0 {
                        period as f64 * 0.8 * mean_rate * level
                    } else {
                        0.2 * mean_rate * level
                    }
                }
            };
            let count = poisson(lambda, &mut rng);
            if count > 0 {
                rows.push(TraceRow {
                    workload_id: w,
                    minute,
                    count,
                });
            }
        }
    }
    InvocationTrace { rows }
}

fn poisson(lambda: f64, rng: &mut ChaCha8Rng) -> u64 {
    if lambda <= 0.0 {
        return 0;
    }
    rand_distr::Poisson::new(lambda).expect("lambda > 0").sample(rng) as u64
}

/// Mixes a group index into the experiment seed.
pub fn group_seed(seed: u64, group: usize) -> u64 {
    seed ^ (group as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// A live client group. Open-loop and trace groups stream arrivals; closed
/// loop groups emit their initial requests and then one request per
/// response.
pub struct Client {
    index: usize,
    spec: GroupSpec,
    models: Vec<ModelId>,
    end: TimePoint,
    rng: ChaCha8Rng,
    state: ClientState,
}

enum ClientState {
    Open { next: TimePoint, exp: Exp<f64> },
    Closed { initial: VecDeque<ModelId> },
    Trace { pending: VecDeque<(TimePoint, ModelId)> },
}

impl Client {
    /// `trace` must be the parsed trace for trace groups.
    pub fn new(
        index: usize,
        spec: &GroupSpec,
        seed: u64,
        horizon: TimePoint,
        trace: Option<&InvocationTrace>,
    ) -> Result<Self, WorkloadError> {
        let models = spec.models.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(group_seed(seed, index));
        let start = spec.start();
        let end = spec.end(horizon);
        let state = match spec.kind {
            GroupKind::OpenLoop => {
                let exp = Exp::new(spec.rate).map_err(|e| WorkloadError::Invalid {
                    group: spec.name.clone(),
                    reason: e.to_string(),
                })?;
                let next = start + gap(&exp, &mut rng);
                ClientState::Open { next, exp }
            }
            GroupKind::ClosedLoop => {
                let mut initial = VecDeque::new();
                for _ in 0..spec.concurrency {
                    initial.extend(models.iter().copied());
                }
                ClientState::Closed { initial }
            }
            GroupKind::Trace => {
                let trace = trace.ok_or_else(|| WorkloadError::Invalid {
                    group: spec.name.clone(),
                    reason: "trace not loaded".into(),
                })?;
                let n = models.len() as u32;
                let map = |w: u32| Some(models[(w % n) as usize]);
                let minute = Nanos::from_secs_f64(spec.minute_s);
                let scale = |t: TimePoint| spec.scale_at(t);
                let all = replay_trace_scaled(trace, &map, &scale, rng.random(), start, minute)?;
                ClientState::Trace {
                    pending: all.into_iter().filter(|&(t, _)| t < end).collect(),
                }
            }
        };
        Ok(Client {
            index,
            spec: spec.clone(),
            models,
            end,
            rng,
            state,
        })
    }

    pub fn spec(&self) -> &GroupSpec {
        &self.spec
    }

    pub fn index(&self) -> usize {
        self.index
    }

    /// Number of models active at `t`.
    fn active(&self, t: TimePoint) -> usize {
        match self.spec.activate_every_s {
            None => self.models.len(),
            Some(every) => {
                let since = (t - self.spec.start()).as_secs_f64();
                if every <= 0.0 {
                    return self.models.len();
                }
                ((since / every).floor() as usize + 1).min(self.models.len())
            }
        }
    }

    fn arrival(&self, at: TimePoint, model: ModelId) -> Arrival {
        Arrival {
            at,
            model,
            slo: self.spec.slo_at(at),
            group: self.index,
        }
    }

    /// The next request not triggered by a response, if any.
    pub fn next_arrival(&mut self) -> Option<Arrival> {
        let end = self.end;
        match &mut self.state {
            ClientState::Open { next, exp } => {
                let at = *next;
                if at >= end {
                    return None;
                }
                *next = at + gap(exp, &mut self.rng);
                let k = self.rng.random_range(0..self.active(at));
                Some(self.arrival(at, self.models[k]))
            }
            ClientState::Closed { initial } => {
                let m = initial.pop_front()?;
                let at = self.spec.start();
                (at < end).then(|| self.arrival(at, m))
            }
            ClientState::Trace { pending } => {
                let (at, m) = pending.pop_front()?;
                Some(self.arrival(at, m))
            }
        }
    }

    /// A closed-loop client's follow-up to a response at `at`.
    pub fn on_response(&mut self, model: ModelId, at: TimePoint) -> Option<Arrival> {
        if self.spec.kind != GroupKind::ClosedLoop {
            return None;
        }
        let next = at + Nanos::from_millis_f64(self.spec.think_ms);
        (next < self.end).then(|| self.arrival(next, model))
    }
}
