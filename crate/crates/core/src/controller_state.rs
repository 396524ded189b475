//! The controller's model of every worker: rolling duration estimators,
//! per-executor timelines of outstanding actions, and a mirror of each GPU's
//! page cache.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::sync::Arc;

use log::debug;

use crate::profiles::{ModelCatalog, ModelId};
use crate::protocol::{Action, ActionId, ActionKind, ActionResult, ActionStatus, GpuId, WorkerHandshake, WorkerId};
use crate::time::{Nanos, TimePoint};

pub const DEFAULT_ESTIMATOR_WINDOW: usize = 20;
pub const PREDICTION_PERCENTILE: f64 = 99.0;

/// Nearest-rank percentile of an ascending slice: the value at rank
/// `ceil(p/100 · n)`.
pub fn nearest_rank<T: Copy>(sorted: &[T], pct: f64) -> Option<T> {
    if sorted.is_empty() {
        return None;
    }
    let n = sorted.len();
    let rank = ((pct / 100.0) * n as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, n) - 1])
}

/// Rolling window of measured durations predicting with the nearest-rank
/// 99th percentile.
#[derive(Debug, Clone)]
pub struct DurationEstimator {
    samples: VecDeque<Nanos>,
    capacity: usize,
    seed: Nanos,
    prediction: Nanos,
}

impl DurationEstimator {
    pub fn new(seed: Nanos, capacity: usize) -> Self {
        assert!(capacity > 0, "estimator window must be positive");
        DurationEstimator {
            samples: VecDeque::with_capacity(capacity),
            capacity,
            seed,
            prediction: seed,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn seed(&self) -> Nanos {
        self.seed
    }

    pub fn record(&mut self, d: Nanos) {
        if self.samples.len() == self.capacity {
            self.samples.pop_front();
        }
        self.samples.push_back(d);
        let mut sorted: Vec<Nanos> = self.samples.iter().copied().collect();
        sorted.sort_unstable();
        self.prediction = nearest_rank(&sorted, PREDICTION_PERCENTILE).unwrap_or(self.seed);
    }

    pub fn predict(&self) -> Nanos {
        self.prediction
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Planned {
    pub action_id: ActionId,
    /// No earlier start is possible (window earliest, staged input).
    pub floor: TimePoint,
    pub duration: Nanos,
    pub start: TimePoint,
    pub end: TimePoint,
}

/// Predicted occupancy of one executor. Entries chain back to back: each
/// starts at the later of its floor and the previous entry's end.
#[derive(Debug, Clone, Default)]
pub struct ExecutorTimeline {
    entries: VecDeque<Planned>,
    anchor: TimePoint,
}

impl ExecutorTimeline {
    pub fn free_at(&self, now: TimePoint) -> TimePoint {
        let tail = self.entries.back().map_or(self.anchor, |p| p.end);
        tail.max(now)
    }

    /// Predicted work still ahead of `now`.
    pub fn outstanding(&self, now: TimePoint) -> Nanos {
        self.free_at(now) - now
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &Planned> {
        self.entries.iter()
    }

    /// Start and end if an action of `duration` were queued now. Pure.
    pub fn predict(&self, floor: TimePoint, duration: Nanos, now: TimePoint) -> (TimePoint, TimePoint) {
        let start = floor.max(self.free_at(now));
        (start, start + duration)
    }

    pub fn push(&mut self, action_id: ActionId, floor: TimePoint, duration: Nanos, now: TimePoint) -> Planned {
        let (start, end) = self.predict(floor, duration, now);
        let p = Planned {
            action_id,
            floor,
            duration,
            start,
            end,
        };
        self.entries.push_back(p);
        p
    }

    /// Removes a finished action; the executor became free at `freed_at`.
    /// Later entries are re-chained from the earliest remaining knowledge.
    pub fn complete(&mut self, action_id: ActionId, freed_at: TimePoint) -> Option<Planned> {
        let idx = self.entries.iter().position(|p| p.action_id == action_id)?;
        let done = self.entries.remove(idx).unwrap();
        let mut cursor = if idx == 0 {
            self.anchor = freed_at;
            freed_at
        } else {
            self.entries[idx - 1].end
        };
        for p in self.entries.iter_mut().skip(idx) {
            p.start = p.floor.max(cursor);
            p.end = p.start + p.duration;
            cursor = p.end;
        }
        Some(done)
    }
}

/// Lead and tardy slack around a predicted start.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slack {
    pub lead: Nanos,
    pub tardy: Nanos,
}

impl Default for Slack {
    fn default() -> Self {
        Slack {
            lead: Nanos::from_millis(1),
            tardy: Nanos::from_millis(1),
        }
    }
}

/// Start window for an action predicted to start at `start`.
pub fn window_for(start: TimePoint, now: TimePoint, slack: Slack) -> (TimePoint, TimePoint) {
    ((start - slack.lead).max(now), start + slack.tardy)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MirrorModel {
    pub pages: u32,
    /// The model counts as usable from here on. For a pending Load this is
    /// the predicted end; once confirmed, the actual end.
    pub effective_at: TimePoint,
    pub confirmed: bool,
    pub load_action: Option<ActionId>,
    pub last_use: TimePoint,
}

#[derive(Debug, Clone)]
pub struct GpuMirror {
    pages_total: u32,
    pages_free: u32,
    models: HashMap<ModelId, MirrorModel>,
    lru: BTreeSet<(TimePoint, ModelId)>,
    infer_outstanding: HashMap<ModelId, u32>,
    pub infer: ExecutorTimeline,
    pub load: ExecutorTimeline,
}

impl GpuMirror {
    pub fn new(pages_total: u32) -> Self {
        GpuMirror {
            pages_total,
            pages_free: pages_total,
            models: HashMap::new(),
            lru: BTreeSet::new(),
            infer_outstanding: HashMap::new(),
            infer: ExecutorTimeline::default(),
            load: ExecutorTimeline::default(),
        }
    }

    pub fn pages_total(&self) -> u32 {
        self.pages_total
    }

    pub fn pages_free(&self) -> u32 {
        self.pages_free
    }

    pub fn model(&self, m: ModelId) -> Option<&MirrorModel> {
        self.models.get(&m)
    }

    pub fn holds(&self, m: ModelId) -> bool {
        self.models.contains_key(&m)
    }

    pub fn models(&self) -> impl Iterator<Item = (ModelId, &MirrorModel)> {
        self.models.iter().map(|(&m, r)| (m, r))
    }

    pub fn effective_by(&self, m: ModelId, t: TimePoint) -> bool {
        self.models.get(&m).is_some_and(|r| r.effective_at <= t)
    }

    pub fn infers_outstanding(&self, m: ModelId) -> u32 {
        self.infer_outstanding.get(&m).copied().unwrap_or(0)
    }

    fn add(&mut self, m: ModelId, pages: u32, effective_at: TimePoint, action: ActionId, now: TimePoint) {
        debug_assert!(self.pages_free >= pages);
        self.pages_free -= pages;
        self.models.insert(
            m,
            MirrorModel {
                pages,
                effective_at,
                confirmed: false,
                load_action: Some(action),
                last_use: now,
            },
        );
        self.lru.insert((now, m));
    }

    fn remove(&mut self, m: ModelId) -> Option<MirrorModel> {
        let r = self.models.remove(&m)?;
        self.lru.remove(&(r.last_use, m));
        self.pages_free += r.pages;
        Some(r)
    }

    pub fn touch(&mut self, m: ModelId, now: TimePoint) {
        if let Some(r) = self.models.get_mut(&m) {
            if now > r.last_use {
                self.lru.remove(&(r.last_use, m));
                r.last_use = now;
                self.lru.insert((now, m));
            }
        }
    }

    /// Least recently used models that may be evicted, oldest first, until
    /// `needed` pages would be free. `None` if that is impossible.
    pub fn lru_victims(&self, needed: u32, now: TimePoint, evictable: impl Fn(ModelId) -> bool) -> Option<Vec<ModelId>> {
        let mut free = self.pages_free;
        let mut victims = Vec::new();
        for &(_, m) in &self.lru {
            if free >= needed {
                break;
            }
            let r = &self.models[&m];
            if !r.confirmed || r.effective_at > now || self.infers_outstanding(m) > 0 || !evictable(m) {
                continue;
            }
            free += r.pages;
            victims.push(m);
        }
        (free >= needed).then_some(victims)
    }
}

#[derive(Debug, Clone)]
pub struct WorkerMirror {
    pub worker_id: WorkerId,
    pub gpus: Vec<GpuMirror>,
}

/// An action dispatched and not yet answered.
#[derive(Debug, Clone)]
pub struct Outstanding {
    pub worker: WorkerId,
    pub action: Action,
    pub dispatched_at: TimePoint,
    pub predicted_start: TimePoint,
    pub predicted_end: TimePoint,
    pub predicted_duration: Nanos,
}

/// What a result changed in the mirror.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MirrorEffect {
    None,
    LoadConfirmed,
    LoadRolledBack,
    ResidencyRefuted,
}

pub struct ControllerState {
    catalog: Arc<ModelCatalog>,
    window: usize,
    workers: Vec<WorkerMirror>,
    infer_est: HashMap<(WorkerId, ModelId, u32), DurationEstimator>,
    load_est: HashMap<(WorkerId, ModelId), DurationEstimator>,
    outstanding: HashMap<ActionId, Outstanding>,
    next_action_id: ActionId,
}

impl ControllerState {
    pub fn new(catalog: Arc<ModelCatalog>, workers: &[WorkerHandshake], window: usize) -> Self {
        let workers = workers
            .iter()
            .map(|h| WorkerMirror {
                worker_id: h.worker_id,
                gpus: (0..h.gpu_count).map(|_| GpuMirror::new(h.pages_total)).collect(),
            })
            .collect();
        ControllerState {
            catalog,
            window,
            workers,
            infer_est: HashMap::new(),
            load_est: HashMap::new(),
            outstanding: HashMap::new(),
            next_action_id: 0,
        }
    }

    pub fn catalog(&self) -> &Arc<ModelCatalog> {
        &self.catalog
    }

    pub fn workers(&self) -> &[WorkerMirror] {
        &self.workers
    }

    pub fn gpu(&self, w: WorkerId, g: GpuId) -> &GpuMirror {
        &self.workers[w as usize].gpus[g as usize]
    }

    pub fn gpu_mut(&mut self, w: WorkerId, g: GpuId) -> &mut GpuMirror {
        &mut self.workers[w as usize].gpus[g as usize]
    }

    pub fn outstanding(&self) -> &HashMap<ActionId, Outstanding> {
        &self.outstanding
    }

    pub fn next_action_id(&mut self) -> ActionId {
        let id = self.next_action_id;
        self.next_action_id += 1;
        id
    }

    /// Predicted Infer duration; the profile's seed until measurements exist.
    /// Panics on a model or batch size outside the catalog.
    pub fn predict_infer(&self, w: WorkerId, m: ModelId, b: u32) -> Nanos {
        match self.infer_est.get(&(w, m, b)) {
            Some(e) => e.predict(),
            None => self.seed_infer(m, b),
        }
    }

    pub fn seed_infer(&self, m: ModelId, b: u32) -> Nanos {
        self.catalog
            .get(m)
            .and_then(|p| p.exec_duration(b))
            .unwrap_or_else(|| panic!("no profile for model {m} batch {b}"))
    }

    pub fn predict_load(&self, w: WorkerId, m: ModelId) -> Nanos {
        match self.load_est.get(&(w, m)) {
            Some(e) => e.predict(),
            None => self.seed_load(m),
        }
    }

    pub fn seed_load(&self, m: ModelId) -> Nanos {
        self.catalog.get(m).expect("model in catalog").weights_transfer
    }

    pub fn infer_estimator(&self, w: WorkerId, m: ModelId, b: u32) -> Option<&DurationEstimator> {
        self.infer_est.get(&(w, m, b))
    }

    /// Start and end of a hypothetical action on one executor. Pure.
    pub fn predict_completion(
        &self,
        w: WorkerId,
        g: GpuId,
        kind: ActionKind,
        duration: Nanos,
        earliest_allowed: TimePoint,
        now: TimePoint,
    ) -> (TimePoint, TimePoint) {
        let gpu = self.gpu(w, g);
        let tl = if kind == ActionKind::Infer { &gpu.infer } else { &gpu.load };
        tl.predict(earliest_allowed, duration, now)
    }

    /// Registers a dispatched action and applies its planned effects:
    /// a Load holds pages and becomes effective at its predicted end, an
    /// Unload frees pages at once, an Infer marks its model recently used.
    /// `floor` is the earliest the worker could start it.
    pub fn dispatch(&mut self, w: WorkerId, action: Action, floor: TimePoint, duration: Nanos, now: TimePoint) -> Outstanding {
        let pages_needed = self.catalog.pages_needed(action.model_id).expect("model in catalog");
        let gpu = &mut self.workers[w as usize].gpus[action.gpu as usize];
        let m = action.model_id;
        let planned = match action.kind {
            ActionKind::Infer => {
                *gpu.infer_outstanding.entry(m).or_insert(0) += 1;
                gpu.touch(m, now);
                gpu.infer.push(action.action_id, floor, duration, now)
            }
            ActionKind::Load => {
                let p = gpu.load.push(action.action_id, floor, duration, now);
                gpu.add(m, pages_needed, p.end, action.action_id, now);
                p
            }
            ActionKind::Unload => {
                gpu.remove(m);
                gpu.load.push(action.action_id, floor, duration, now)
            }
        };
        let o = Outstanding {
            worker: w,
            action,
            dispatched_at: now,
            predicted_start: planned.start,
            predicted_end: planned.end,
            predicted_duration: duration,
        };
        self.outstanding.insert(o.action.action_id, o.clone());
        o
    }

    /// Applies a worker result. Unknown ids (duplicates) are ignored.
    pub fn record_result(&mut self, result: &ActionResult) -> Option<(Outstanding, MirrorEffect)> {
        let Some(o) = self.outstanding.remove(&result.action_id) else {
            debug!("ignoring result for unknown action {}", result.action_id);
            return None;
        };
        let w = o.worker;
        let a = &o.action;
        let m = a.model_id;
        let success = result.is_success();
        let mut effect = MirrorEffect::None;
        if success && result.device_duration.is_positive() {
            let window = self.window;
            match a.kind {
                ActionKind::Infer => {
                    let seed = self.seed_infer(m, a.batch_size);
                    self.infer_est
                        .entry((w, m, a.batch_size))
                        .or_insert_with(|| DurationEstimator::new(seed, window))
                        .record(result.device_duration);
                }
                ActionKind::Load => {
                    let seed = self.seed_load(m);
                    self.load_est
                        .entry((w, m))
                        .or_insert_with(|| DurationEstimator::new(seed, window))
                        .record(result.device_duration);
                }
                ActionKind::Unload => {}
            }
        }
        let gpu = &mut self.workers[w as usize].gpus[a.gpu as usize];
        match a.kind {
            ActionKind::Infer => {
                if let Some(c) = gpu.infer_outstanding.get_mut(&m) {
                    *c -= 1;
                    if *c == 0 {
                        gpu.infer_outstanding.remove(&m);
                    }
                }
                let freed = if success {
                    result.start + result.device_duration
                } else {
                    result.end
                };
                gpu.infer.complete(a.action_id, freed);
                if result.status == ActionStatus::ModelNotLoaded
                    && gpu.models.get(&m).is_some_and(|r| r.confirmed)
                {
                    gpu.remove(m);
                    effect = MirrorEffect::ResidencyRefuted;
                }
            }
            ActionKind::Load => {
                gpu.load.complete(a.action_id, result.end);
                let ours = gpu.models.get(&m).is_some_and(|r| r.load_action == Some(a.action_id));
                if ours {
                    if success {
                        let r = gpu.models.get_mut(&m).unwrap();
                        r.confirmed = true;
                        r.effective_at = r.effective_at.min(result.end);
                        effect = MirrorEffect::LoadConfirmed;
                    } else {
                        gpu.remove(m);
                        effect = MirrorEffect::LoadRolledBack;
                    }
                }
            }
            ActionKind::Unload => {
                gpu.load.complete(a.action_id, result.end);
            }
        }
        Some((o, effect))
    }
}
