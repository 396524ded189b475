//! The centralized scheduler.
//!
//! Requests wait in per-batch-size queues. Each Infer executor pulls
//! strategies in `latest` order whenever it has less than the work horizon
//! of predicted work outstanding, growing the batch while enough feasible
//! requests exist. Load executors pick the unloaded model with the highest
//! positive load priority, evicting least recently used idle models to make
//! room. A request the controller cannot finish by its deadline is denied
//! before the deadline passes, and a result that lands after the SLO is
//! reported as a timeout, never as a success.

mod load_stats;
mod queues;

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use load_stats::{LoadStats, Priority, LOAD_EPSILON};
pub use queues::{BatchQueues, QueueKey, Strategy, StrategyQueue};

use crate::controller_state::{window_for, ControllerState, MirrorEffect, Slack, DEFAULT_ESTIMATOR_WINDOW};
use crate::harness::telemetry::{ActionRecord, RequestRecord};
use crate::profiles::{ModelCatalog, ModelId};
use crate::protocol::{
    Action, ActionId, ActionKind, ActionResult, GpuId, InferenceResponse, RequestId, ResponseStatus, WorkerHandshake, WorkerId,
};
use crate::time::{Nanos, TimePoint};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    #[serde(rename = "work_horizon_ns")]
    pub work_horizon: Nanos,
    #[serde(rename = "capacity_horizon_ns")]
    pub capacity_horizon: Nanos,
    #[serde(rename = "lead_slack_ns")]
    pub lead_slack: Nanos,
    #[serde(rename = "tardy_slack_ns")]
    pub tardy_slack: Nanos,
    pub estimator_window: usize,
    #[serde(rename = "default_slo_ns")]
    pub default_slo: Nanos,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            work_horizon: Nanos::from_millis(5),
            capacity_horizon: Nanos::from_millis(100),
            lead_slack: Nanos::from_millis(1),
            tardy_slack: Nanos::from_millis(1),
            estimator_window: DEFAULT_ESTIMATOR_WINDOW,
            default_slo: Nanos::from_millis(100),
        }
    }
}

impl SchedulerConfig {
    pub fn slack(&self) -> Slack {
        Slack {
            lead: self.lead_slack,
            tardy: self.tardy_slack,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RequestError {
    #[error("unknown model {0}")]
    UnknownModel(ModelId),
    #[error("SLO must be positive, got {0}")]
    NonPositiveSlo(Nanos),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ReqState {
    Queued,
    /// Part of the batch of this Infer.
    Dispatched(ActionId),
}

#[derive(Debug, Clone)]
struct Req {
    model: ModelId,
    arrival: TimePoint,
    slo: Nanos,
    deadline: TimePoint,
    epoch: u32,
    state: ReqState,
    cold: bool,
    /// Counted in the model's demand.
    in_demand: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Timer {
    /// The request can no longer finish even alone.
    Deny(RequestId, u32),
    /// A Load started now could no longer help the request.
    LoadBenefit(RequestId, u32),
    FillInfer(usize),
    FillLoad(usize),
}

#[derive(Debug, Clone)]
struct ModelSched {
    batch_sizes: Vec<u32>,
    queues: BatchQueues,
    queued: u32,
    input_transfer: Nanos,
    output_transfer: Nanos,
    seed_exec: Vec<Nanos>,
    seed_load: Nanos,
    pages: u32,
}

/// Everything the controller wants sent since the last drain.
#[derive(Debug, Default)]
pub struct Outbox {
    pub actions: Vec<(WorkerId, Action)>,
    pub responses: Vec<InferenceResponse>,
}

pub struct Controller {
    config: SchedulerConfig,
    catalog: Arc<ModelCatalog>,
    state: ControllerState,
    gpus: Vec<(WorkerId, GpuId)>,
    gpu_index: HashMap<(WorkerId, GpuId), usize>,
    models: Vec<ModelSched>,
    stats: LoadStats,
    strategies: Vec<StrategyQueue>,
    requests: HashMap<RequestId, Req>,
    next_request_id: RequestId,
    timers: BinaryHeap<Reverse<(TimePoint, u64, Timer)>>,
    timer_seq: u64,
    fill_timer: Vec<[Option<TimePoint>; 2]>,
    outbox: Outbox,
    request_log: Vec<RequestRecord>,
    action_log: Vec<ActionRecord>,
}

impl Controller {
    /// `workers[i].worker_id` must be `i`.
    pub fn new(catalog: Arc<ModelCatalog>, workers: &[WorkerHandshake], config: SchedulerConfig) -> Self {
        for (i, h) in workers.iter().enumerate() {
            assert_eq!(h.worker_id as usize, i, "workers must be numbered densely from 0");
        }
        let state = ControllerState::new(Arc::clone(&catalog), workers, config.estimator_window);
        let mut gpus = Vec::new();
        for h in workers {
            for g in 0..h.gpu_count {
                gpus.push((h.worker_id, g));
            }
        }
        let gpu_index = gpus.iter().enumerate().map(|(i, &k)| (k, i)).collect();
        let models = catalog
            .entries()
            .iter()
            .map(|e| {
                let p = &e.profile;
                ModelSched {
                    batch_sizes: p.batch_sizes.clone(),
                    queues: BatchQueues::new(p.batch_sizes.len()),
                    queued: 0,
                    input_transfer: p.input_transfer,
                    output_transfer: p.output_transfer,
                    seed_exec: p.exec_durations.clone(),
                    seed_load: p.weights_transfer,
                    pages: p.paged(catalog.page_size()).pages_needed,
                }
            })
            .collect::<Vec<_>>();
        let n_gpus = gpus.len();
        Controller {
            stats: LoadStats::new(models.len(), n_gpus, config.capacity_horizon.0 as f64),
            config,
            catalog,
            state,
            gpus,
            gpu_index,
            models,
            strategies: vec![StrategyQueue::default(); n_gpus],
            requests: HashMap::new(),
            next_request_id: 0,
            timers: BinaryHeap::new(),
            timer_seq: 0,
            fill_timer: vec![[None; 2]; n_gpus],
            outbox: Outbox::default(),
            request_log: Vec::new(),
            action_log: Vec::new(),
        }
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    pub fn state(&self) -> &ControllerState {
        &self.state
    }

    pub fn load_stats(&self) -> &LoadStats {
        &self.stats
    }

    pub fn gpu_count(&self) -> usize {
        self.gpus.len()
    }

    /// Requests admitted and not yet answered.
    pub fn pending_requests(&self) -> usize {
        self.requests.len()
    }

    pub fn queued(&self, m: ModelId) -> u32 {
        self.models[m as usize].queued
    }

    pub fn drain(&mut self) -> Outbox {
        std::mem::take(&mut self.outbox)
    }

    pub fn take_request_log(&mut self) -> Vec<RequestRecord> {
        std::mem::take(&mut self.request_log)
    }

    pub fn take_action_log(&mut self) -> Vec<ActionRecord> {
        std::mem::take(&mut self.action_log)
    }

    pub fn next_timer(&self) -> Option<TimePoint> {
        self.timers.peek().map(|Reverse((t, _, _))| *t)
    }

    fn push_timer(&mut self, at: TimePoint, timer: Timer) {
        self.timer_seq += 1;
        self.timers.push(Reverse((at, self.timer_seq, timer)));
    }

    fn deadline_for(&self, m: ModelId, arrival: TimePoint, slo: Nanos) -> TimePoint {
        arrival + slo - self.models[m as usize].output_transfer - self.config.tardy_slack
    }

    /// Admits or denies a request arriving at `now`. Returns its id.
    pub fn on_request(&mut self, model: ModelId, slo: Nanos, now: TimePoint) -> Result<RequestId, RequestError> {
        if model as usize >= self.models.len() {
            return Err(RequestError::UnknownModel(model));
        }
        if !slo.is_positive() {
            return Err(RequestError::NonPositiveSlo(slo));
        }
        let id = self.next_request_id;
        self.next_request_id += 1;
        let deadline = self.deadline_for(model, now, slo);
        let cold = !self.gpus.iter().any(|&(w, g)| self.state.gpu(w, g).effective_by(model, now));
        let req = Req {
            model,
            arrival: now,
            slo,
            deadline,
            epoch: 0,
            state: ReqState::Queued,
            cold,
            in_demand: false,
        };
        if !self.admissible(model, deadline, now) {
            self.respond(id, &req, ResponseStatus::Denied, Nanos::ZERO, 0);
            return Ok(id);
        }
        self.requests.insert(id, req);
        self.enqueue(id, now);
        self.on_model_changed(model, now);
        Ok(id)
    }

    /// Whether some GPU could finish a batch of one by `deadline`, counting a
    /// Load where the model is absent.
    fn admissible(&self, m: ModelId, deadline: TimePoint, now: TimePoint) -> bool {
        let ms = &self.models[m as usize];
        (0..self.gpus.len()).any(|gi| {
            let (w, g) = self.gpus[gi];
            let gpu = self.state.gpu(w, g);
            let exec = self.state.predict_infer(w, m, ms.batch_sizes[0]);
            let mut floor = now + ms.input_transfer;
            if let Some(r) = gpu.model(m) {
                floor = floor.max(r.effective_at);
            } else {
                if ms.pages > gpu.pages_total() {
                    return false;
                }
                let load = self.state.predict_load(w, m);
                floor = floor.max(gpu.load.free_at(now) + load);
            }
            let start = floor.max(gpu.infer.free_at(now));
            start + exec <= deadline
        })
    }

    fn enqueue(&mut self, id: RequestId, now: TimePoint) {
        let tardy = self.config.tardy_slack;
        let r = self.requests.get_mut(&id).expect("request present");
        let ms = &mut self.models[r.model as usize];
        r.state = ReqState::Queued;
        ms.queues.insert_all((r.deadline, id, r.epoch));
        ms.queued += 1;
        let exec1 = ms.seed_exec[0];
        let benefit_until = r.deadline - ms.seed_load - exec1;
        let deny_at = r.deadline - exec1 - tardy + Nanos(1);
        let (model, epoch) = (r.model, r.epoch);
        if now < benefit_until {
            r.in_demand = true;
            self.stats.add_demand(model, exec1.0 as f64);
            self.push_timer(benefit_until, Timer::LoadBenefit(id, epoch));
        }
        self.push_timer(deny_at.max(now), Timer::Deny(id, epoch));
    }

    /// Takes a request out of the queued state, dropping its demand.
    fn unqueue(&mut self, id: RequestId, into: ReqState) {
        let r = self.requests.get_mut(&id).expect("request present");
        debug_assert_eq!(r.state, ReqState::Queued);
        r.state = into;
        let ms = &mut self.models[r.model as usize];
        ms.queued -= 1;
        if r.in_demand {
            r.in_demand = false;
            let m = r.model;
            let exec1 = ms.seed_exec[0];
            self.stats.add_demand(m, -(exec1.0 as f64));
        }
    }

    fn respond(&mut self, id: RequestId, r: &Req, status: ResponseStatus, latency: Nanos, batch_size: u32) {
        self.outbox.responses.push(InferenceResponse {
            request_id: id,
            status,
            latency,
            cold_start: r.cold,
        });
        self.request_log.push(RequestRecord {
            request_id: id,
            model_id: r.model,
            arrival: r.arrival,
            deadline: r.deadline,
            status,
            latency,
            batch_size,
            cold_start: r.cold,
            slo: r.slo,
        });
    }

    /// Rebuilds a model's strategies and gives every executor that might
    /// use them a chance to act.
    fn on_model_changed(&mut self, m: ModelId, now: TimePoint) {
        self.rebuild_strategies(m, now);
        let holders: Vec<usize> = self.stats.holders(m).collect();
        for gi in holders {
            self.fill_infer(gi, now);
        }
        self.offer_load(m, None, now);
    }

    /// Lets every Load executor act if `m` would benefit from another copy.
    /// Only arrivals and lost residency raise a priority, so other models'
    /// candidates are unchanged.
    fn offer_load(&mut self, m: ModelId, skip: Option<usize>, now: TimePoint) {
        if self.stats.priority(m) <= 0.0 {
            return;
        }
        for gi in self.load_order(skip) {
            self.fill_load(gi, now);
        }
    }

    /// GPUs in the order their Load executors get to choose: least loaded
    /// first, then fewest resident models.
    fn load_order(&self, skip: Option<usize>) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.gpus.len()).filter(|&gi| Some(gi) != skip).collect();
        order.sort_by_cached_key(|&gi| {
            let (w, g) = self.gpus[gi];
            (Priority(self.stats.gpu_load(gi)), self.state.gpu(w, g).models().count(), gi)
        });
        order
    }

    fn exec_pred(&self, gi: usize, m: ModelId, bi: usize) -> Nanos {
        let (w, _) = self.gpus[gi];
        self.state.predict_infer(w, m, self.models[m as usize].batch_sizes[bi])
    }

    /// Earliest the worker could start an Infer of `b` requests, ignoring
    /// the executor's queue.
    fn infer_floor(&self, gi: usize, m: ModelId, b: u32, now: TimePoint) -> TimePoint {
        let (w, g) = self.gpus[gi];
        let ms = &self.models[m as usize];
        let mut floor = now + ms.input_transfer * b as i64;
        if let Some(r) = self.state.gpu(w, g).model(m) {
            floor = floor.max(r.effective_at);
        }
        floor
    }

    /// Latest start for batch `bi` given the head of its queue, after
    /// dropping stale and hopeless entries from the front.
    fn queue_latest(&mut self, gi: usize, m: ModelId, bi: usize, now: TimePoint) -> Option<TimePoint> {
        self.clean_front(m, bi, now);
        let (deadline, _, _) = *self.models[m as usize].queues.queue(bi).first()?;
        let ms = &self.models[m as usize];
        let b = ms.batch_sizes[bi] as i64;
        Some(deadline - self.exec_pred(gi, m, bi) - ms.output_transfer * (b - 1))
    }

    fn is_live(&self, key: &QueueKey) -> bool {
        self.requests
            .get(&key.1)
            .is_some_and(|r| r.state == ReqState::Queued && r.epoch == key.2)
    }

    fn clean_front(&mut self, m: ModelId, bi: usize, now: TimePoint) {
        let tardy = self.config.tardy_slack;
        let seed = self.models[m as usize].seed_exec[bi];
        loop {
            let Some(&key) = self.models[m as usize].queues.queue(bi).first() else {
                return;
            };
            if self.is_live(&key) && now + seed + tardy <= key.0 {
                return;
            }
            self.models[m as usize].queues.queue_mut(bi).pop_first();
        }
    }

    fn drop_holder(&mut self, m: ModelId, gi: usize) {
        self.stats.remove_holder(m, gi);
        for bi in 0..self.models[m as usize].batch_sizes.len() {
            self.strategies[gi].remove(m, bi);
        }
    }

    fn rebuild_strategies(&mut self, m: ModelId, now: TimePoint) {
        let holders: Vec<usize> = self.stats.holders(m).collect();
        let n = self.models[m as usize].batch_sizes.len();
        for gi in holders {
            for bi in 0..n {
                match self.queue_latest(gi, m, bi, now) {
                    Some(latest) => self.strategies[gi].upsert(Strategy {
                        latest,
                        batch_rank: Reverse(self.models[m as usize].batch_sizes[bi]),
                        model: m,
                        batch_index: bi,
                    }),
                    None => self.strategies[gi].remove(m, bi),
                }
            }
        }
    }

    /// The first `b` requests in queue `bi` that could finish on GPU `gi`,
    /// with the predicted start and duration.
    fn collect(&mut self, gi: usize, m: ModelId, bi: usize, now: TimePoint) -> Option<(Vec<RequestId>, TimePoint, Nanos)> {
        self.clean_front(m, bi, now);
        let (w, g) = self.gpus[gi];
        let ms = &self.models[m as usize];
        let b = ms.batch_sizes[bi];
        let floor = self.infer_floor(gi, m, b, now);
        let start = floor.max(self.state.gpu(w, g).infer.free_at(now));
        let exec = self.exec_pred(gi, m, bi);
        let finish = start + exec + ms.output_transfer * (b as i64 - 1);
        let mut picked = Vec::with_capacity(b as usize);
        let mut stale = Vec::new();
        for key in ms.queues.queue(bi) {
            if !self.is_live(key) {
                stale.push(*key);
                continue;
            }
            // Deadlines ascend, so once one request fits all later ones do.
            if finish > key.0 {
                continue;
            }
            picked.push(key.1);
            if picked.len() == b as usize {
                break;
            }
        }
        let q = self.models[m as usize].queues.queue_mut(bi);
        for k in stale {
            q.remove(&k);
        }
        (picked.len() == b as usize).then_some((picked, start, exec))
    }

    /// Dispatches Infers on GPU `gi` while it has less than the work horizon
    /// outstanding.
    fn fill_infer(&mut self, gi: usize, now: TimePoint) {
        let (w, g) = self.gpus[gi];
        loop {
            let outstanding = self.state.gpu(w, g).infer.outstanding(now);
            if outstanding >= self.config.work_horizon {
                let at = self.state.gpu(w, g).infer.free_at(now) - self.config.work_horizon + Nanos(1);
                self.arm_fill(gi, 0, at, now);
                return;
            }
            let Some(s) = self.strategies[gi].pop() else {
                return;
            };
            let m = s.model;
            if !self.state.gpu(w, g).holds(m) {
                continue;
            }
            let Some(mut chosen) = self.collect(gi, m, s.batch_index, now).map(|c| (s.batch_index, c)) else {
                continue;
            };
            for bj in s.batch_index + 1..self.models[m as usize].batch_sizes.len() {
                match self.collect(gi, m, bj, now) {
                    Some(c) => chosen = (bj, c),
                    None => break,
                }
            }
            let (bi, (batch, start, exec)) = chosen;
            self.dispatch_infer(gi, m, bi, batch, start, exec, now);
            self.rebuild_strategies(m, now);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn dispatch_infer(&mut self, gi: usize, m: ModelId, bi: usize, batch: Vec<RequestId>, start: TimePoint, exec: Nanos, now: TimePoint) {
        let (w, g) = self.gpus[gi];
        let b = self.models[m as usize].batch_sizes[bi];
        debug_assert_eq!(batch.len(), b as usize);
        let floor = self.infer_floor(gi, m, b, now);
        let (mut earliest, latest) = window_for(start, now, self.config.slack());
        if let Some(r) = self.state.gpu(w, g).model(m) {
            if !r.confirmed {
                earliest = earliest.max(r.effective_at);
            }
        }
        let action_id = self.state.next_action_id();
        for &id in &batch {
            self.unqueue(id, ReqState::Dispatched(action_id));
        }
        self.stats.refresh(m);
        let action = Action::infer(action_id, g, m, (earliest, latest), exec, batch);
        self.state.dispatch(w, action.clone(), floor.max(earliest), exec, now);
        self.outbox.actions.push((w, action));
    }

    fn arm_fill(&mut self, gi: usize, lane: usize, at: TimePoint, now: TimePoint) {
        let at = at.max(now);
        if self.fill_timer[gi][lane].is_some_and(|t| t <= at && t >= now) {
            return;
        }
        self.fill_timer[gi][lane] = Some(at);
        let timer = if lane == 0 { Timer::FillInfer(gi) } else { Timer::FillLoad(gi) };
        self.push_timer(at, timer);
    }

    /// Dispatches at most one Load (plus the Unloads it needs) per pass on
    /// GPU `gi`, while its Load executor is under the work horizon.
    fn fill_load(&mut self, gi: usize, now: TimePoint) {
        let (w, g) = self.gpus[gi];
        loop {
            let outstanding = self.state.gpu(w, g).load.outstanding(now);
            if outstanding >= self.config.work_horizon {
                let at = self.state.gpu(w, g).load.free_at(now) - self.config.work_horizon + Nanos(1);
                self.arm_fill(gi, 1, at, now);
                return;
            }
            let gpu = self.state.gpu(w, g);
            let models = &self.models;
            let Some(m) = self
                .stats
                .best_candidate(|m| gpu.holds(m) || models[m as usize].pages > gpu.pages_total())
            else {
                return;
            };
            let need = self.models[m as usize].pages;
            let victims = if gpu.pages_free() >= need {
                Vec::new()
            } else {
                match gpu.lru_victims(need, now, |v| models[v as usize].queued == 0) {
                    Some(v) => v,
                    None => return,
                }
            };
            for v in victims {
                let action_id = self.state.next_action_id();
                let action = Action::unload(action_id, g, v, (now, TimePoint::MAX));
                self.state.dispatch(w, action.clone(), now, Nanos::ZERO, now);
                self.outbox.actions.push((w, action));
                self.drop_holder(v, gi);
            }
            let duration = self.state.predict_load(w, m);
            let (start, _) = self.state.gpu(w, g).load.predict(now, duration, now);
            let window = window_for(start, now, self.config.slack());
            let action_id = self.state.next_action_id();
            let action = Action::load(action_id, g, m, window, duration);
            self.state.dispatch(w, action.clone(), window.0, duration, now);
            self.outbox.actions.push((w, action));
            self.stats.add_holder(m, gi, now);
            self.rebuild_strategies(m, now);
            self.fill_infer(gi, now);
        }
    }

    /// Handles a result from worker `worker`, received at `now`.
    pub fn on_result(&mut self, worker: WorkerId, result: &ActionResult, now: TimePoint) {
        let Some((o, effect)) = self.state.record_result(result) else {
            return;
        };
        debug_assert_eq!(o.worker, worker);
        let a = &o.action;
        let m = a.model_id;
        let gi = self.gpu_index[&(worker, a.gpu)];
        let actual_end = if a.kind == ActionKind::Infer && result.is_success() {
            result.start + result.device_duration
        } else {
            result.end
        };
        self.action_log.push(ActionRecord {
            action_id: a.action_id,
            worker,
            gpu: a.gpu,
            kind: a.kind,
            model_id: m,
            batch_size: a.batch_size,
            status: result.status,
            dispatched: o.dispatched_at,
            predicted_duration: o.predicted_duration,
            device_duration: result.device_duration,
            predicted_start: o.predicted_start,
            predicted_end: o.predicted_end,
            actual_start: result.start,
            actual_end,
        });
        match a.kind {
            ActionKind::Infer => {
                let mine = |r: &Req| r.state == ReqState::Dispatched(a.action_id);
                if result.is_success() {
                    for &id in &a.batch {
                        if !self.requests.get(&id).is_some_and(mine) {
                            continue;
                        }
                        let r = self.requests.remove(&id).unwrap();
                        let latency = now - r.arrival;
                        let status = if latency <= r.slo {
                            ResponseStatus::Ok
                        } else {
                            ResponseStatus::Timeout
                        };
                        self.respond(id, &r, status, latency, a.batch_size);
                    }
                } else {
                    let ids: Vec<RequestId> = a.batch.iter().copied().filter(|id| self.requests.get(id).is_some_and(mine)).collect();
                    self.requeue(&ids, now);
                }
            }
            ActionKind::Load => {
                if effect == MirrorEffect::LoadRolledBack {
                    self.drop_holder(m, gi);
                    self.invalidate_planned(worker, a.gpu, m, now);
                }
            }
            ActionKind::Unload => {}
        }
        if effect == MirrorEffect::ResidencyRefuted {
            self.drop_holder(m, gi);
        }
        self.rebuild_strategies(m, now);
        self.fill_infer(gi, now);
        self.fill_load(gi, now);
        self.offer_load(m, Some(gi), now);
        if a.kind == ActionKind::Infer && !result.is_success() {
            let holders: Vec<usize> = self.stats.holders(m).filter(|&h| h != gi).collect();
            for h in holders {
                self.fill_infer(h, now);
            }
        }
    }

    /// Returns the requests of Infers planned behind a failed Load to the
    /// queues. The worker will reject the Infers themselves.
    fn invalidate_planned(&mut self, w: WorkerId, g: GpuId, m: ModelId, now: TimePoint) {
        let mut ids = Vec::new();
        for o in self.state.outstanding().values() {
            let a = &o.action;
            if o.worker == w && a.gpu == g && a.model_id == m && a.kind == ActionKind::Infer {
                ids.extend(
                    a.batch
                        .iter()
                        .filter(|id| self.requests.get(id).is_some_and(|r| r.state == ReqState::Dispatched(a.action_id))),
                );
            }
        }
        ids.sort_unstable();
        self.requeue(&ids, now);
    }

    fn requeue(&mut self, batch: &[RequestId], now: TimePoint) {
        let tardy = self.config.tardy_slack;
        for &id in batch {
            let Some(r) = self.requests.get(&id) else { continue };
            let exec1 = self.models[r.model as usize].seed_exec[0];
            if now + exec1 + tardy <= r.deadline {
                let r = self.requests.get_mut(&id).unwrap();
                r.epoch += 1;
                let m = r.model;
                self.enqueue(id, now);
                self.stats.refresh(m);
            } else {
                let r = self.requests.remove(&id).unwrap();
                self.respond(id, &r, ResponseStatus::Denied, now - r.arrival, 0);
            }
        }
    }

    /// Runs every timer due at or before `now`.
    pub fn on_timers(&mut self, now: TimePoint) {
        while let Some(&Reverse((t, _, timer))) = self.timers.peek() {
            if t > now {
                break;
            }
            self.timers.pop();
            match timer {
                Timer::Deny(id, epoch) => {
                    let Some(r) = self.requests.get(&id) else { continue };
                    if r.epoch != epoch || r.state != ReqState::Queued {
                        continue;
                    }
                    let m = r.model;
                    self.unqueue(id, ReqState::Queued);
                    let r = self.requests.remove(&id).unwrap();
                    self.respond(id, &r, ResponseStatus::Denied, now - r.arrival, 0);
                    self.stats.refresh(m);
                }
                Timer::LoadBenefit(id, epoch) => {
                    let Some(r) = self.requests.get_mut(&id) else { continue };
                    if r.epoch != epoch || r.state != ReqState::Queued || !r.in_demand {
                        continue;
                    }
                    r.in_demand = false;
                    let m = r.model;
                    let exec1 = self.models[m as usize].seed_exec[0];
                    self.stats.add_demand(m, -(exec1.0 as f64));
                }
                Timer::FillInfer(gi) => {
                    if self.fill_timer[gi][0] == Some(t) {
                        self.fill_timer[gi][0] = None;
                    }
                    self.fill_infer(gi, now);
                }
                Timer::FillLoad(gi) => {
                    if self.fill_timer[gi][1] == Some(t) {
                        self.fill_timer[gi][1] = None;
                    }
                    self.fill_load(gi, now);
                }
            }
        }
    }

    pub fn catalog(&self) -> &Arc<ModelCatalog> {
        &self.catalog
    }
}
