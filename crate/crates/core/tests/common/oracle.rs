//! An exhaustive reference for the scheduler's decisions on tiny instances.
//!
//! It keeps its own request bookkeeping and, at every decision instant,
//! recomputes the choice from scratch: strategies are enumerated over every
//! resident model and batch size, and each candidate batch is found by trying
//! every subset of the waiting requests. Predictions and execution reuse the
//! controller mirror and the emulated worker.

use std::sync::Arc;

use clockwork::controller_state::{window_for, ControllerState, Slack};
use clockwork::protocol::{Action, ActionResult, RequestId, ResponseStatus};
use clockwork::scheduler::SchedulerConfig;
use clockwork::worker::{Worker, WorkerConfig};
use clockwork::{ActionKind, ModelCatalog, ModelId, Nanos, TimePoint};

use super::Rig;

/// A request arriving at `at` for `model` with the given SLO.
#[derive(Debug, Clone, Copy)]
pub struct Arrival {
    pub at: TimePoint,
    pub model: ModelId,
    pub slo: Nanos,
}

/// What was sent, in order: time, kind, model and the sorted batch.
pub type Dispatch = (TimePoint, ActionKind, ModelId, Vec<RequestId>);

/// Final answer per request: id, status and latency.
pub type Answer = (RequestId, ResponseStatus, Nanos);

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub dispatches: Vec<Dispatch>,
    pub answers: Vec<Answer>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum St {
    Waiting,
    Running,
    Done,
}

#[derive(Debug, Clone)]
struct Req {
    model: ModelId,
    arrival: TimePoint,
    slo: Nanos,
    deadline: TimePoint,
    st: St,
}

struct Oracle {
    catalog: Arc<ModelCatalog>,
    cfg: SchedulerConfig,
    slack: Slack,
    state: ControllerState,
    worker: Worker,
    now: TimePoint,
    reqs: Vec<Req>,
    last_loaded: Vec<TimePoint>,
    infer_timer: Option<TimePoint>,
    load_timer: Option<TimePoint>,
    trace: Trace,
}

fn arm(slot: &mut Option<TimePoint>, at: TimePoint) {
    if slot.is_none_or(|t| at < t) {
        *slot = Some(at);
    }
}

impl Oracle {
    fn new(catalog: Arc<ModelCatalog>, pages: u32) -> Self {
        let worker = Worker::new(WorkerConfig { pages_per_gpu: pages, ..WorkerConfig::default() }, Arc::clone(&catalog));
        let cfg = SchedulerConfig::default();
        let state = ControllerState::new(Arc::clone(&catalog), &[worker.handshake()], cfg.estimator_window);
        Oracle {
            last_loaded: vec![TimePoint::ZERO; catalog.len()],
            slack: cfg.slack(),
            catalog,
            cfg,
            state,
            worker,
            now: TimePoint::ZERO,
            reqs: Vec::new(),
            infer_timer: None,
            load_timer: None,
            trace: Trace { dispatches: Vec::new(), answers: Vec::new() },
        }
    }

    fn profile(&self, m: ModelId) -> &clockwork::ModelProfile {
        &self.catalog.entries()[m as usize].profile
    }

    fn exec(&self, m: ModelId, bi: usize) -> Nanos {
        self.state.predict_infer(0, m, self.profile(m).batch_sizes[bi])
    }

    fn waiting(&self, m: ModelId) -> impl Iterator<Item = (RequestId, &Req)> {
        self.reqs
            .iter()
            .enumerate()
            .filter(move |(_, r)| r.model == m && r.st == St::Waiting)
            .map(|(i, r)| (i as RequestId, r))
    }

    fn answer(&mut self, id: RequestId, status: ResponseStatus, latency: Nanos) {
        self.reqs[id as usize].st = St::Done;
        self.trace.answers.push((id, status, latency));
    }

    fn send(&mut self, a: Action, floor: TimePoint, duration: Nanos) {
        let batch = {
            let mut b = a.batch.clone();
            b.sort_unstable();
            b
        };
        self.trace.dispatches.push((self.now, a.kind, a.model_id, batch));
        self.state.dispatch(0, a.clone(), floor, duration, self.now);
        if let Some(r) = self.worker.on_action(a, self.now) {
            self.on_result(&r);
        }
    }

    /// A batch of one could finish in time, counting a Load if needed.
    fn admissible(&self, m: ModelId, deadline: TimePoint) -> bool {
        let p = self.profile(m);
        let gpu = self.state.gpu(0, 0);
        let mut floor = self.now + p.input_transfer;
        match gpu.model(m) {
            Some(r) => floor = floor.max(r.effective_at),
            None => {
                if self.catalog.pages_needed(m).unwrap() > gpu.pages_total() {
                    return false;
                }
                floor = floor.max(gpu.load.free_at(self.now) + self.state.predict_load(0, m));
            }
        }
        floor.max(gpu.infer.free_at(self.now)) + self.exec(m, 0) <= deadline
    }

    fn arrive(&mut self, a: Arrival) {
        let p = self.profile(a.model);
        let deadline = a.at + a.slo - p.output_transfer - self.cfg.tardy_slack;
        let id = self.reqs.len() as RequestId;
        self.reqs.push(Req { model: a.model, arrival: a.at, slo: a.slo, deadline, st: St::Waiting });
        if !self.admissible(a.model, deadline) {
            self.answer(id, ResponseStatus::Denied, Nanos::ZERO);
            return;
        }
        self.fill_infer();
        if !self.state.gpu(0, 0).holds(a.model) && self.demand(a.model) > Nanos::ZERO {
            self.fill_load();
        }
    }

    /// Seed execution time of the waiting requests a Load started now could
    /// still serve.
    fn demand(&self, m: ModelId) -> Nanos {
        let p = self.profile(m);
        let (load, exec1) = (p.weights_transfer, p.exec_durations[0]);
        let n = self.waiting(m).filter(|(_, r)| self.now < r.deadline - load - exec1).count();
        exec1 * n as i64
    }

    /// Requests of `m` that batch size `bi` could still serve by deadline,
    /// as (deadline, id).
    fn eligible(&self, m: ModelId, bi: usize) -> Vec<(TimePoint, RequestId)> {
        let seed = self.profile(m).exec_durations[bi];
        let mut v: Vec<_> = self
            .waiting(m)
            .filter(|(_, r)| self.now + seed + self.cfg.tardy_slack <= r.deadline)
            .map(|(id, r)| (r.deadline, id))
            .collect();
        v.sort_unstable();
        v
    }

    /// Predicted start and the best feasible batch of size `bi`: among all
    /// subsets whose members all finish by their deadlines, the one with
    /// the earliest deadlines.
    fn best_batch(&self, m: ModelId, bi: usize) -> Option<(TimePoint, Nanos, Vec<RequestId>)> {
        let p = self.profile(m);
        let b = p.batch_sizes[bi] as usize;
        let gpu = self.state.gpu(0, 0);
        let mut floor = self.now + p.input_transfer * b as i64;
        if let Some(r) = gpu.model(m) {
            floor = floor.max(r.effective_at);
        }
        let start = floor.max(gpu.infer.free_at(self.now));
        let exec = self.exec(m, bi);
        let finish = start + exec + p.output_transfer * (b as i64 - 1);
        let pool = self.eligible(m, bi);
        let mut best: Option<Vec<(TimePoint, RequestId)>> = None;
        for mask in 0u32..(1 << pool.len()) {
            if mask.count_ones() as usize != b {
                continue;
            }
            let pick: Vec<_> = (0..pool.len()).filter(|i| mask >> i & 1 == 1).map(|i| pool[i]).collect();
            if pick.iter().any(|&(d, _)| finish > d) {
                continue;
            }
            if best.as_ref().is_none_or(|cur| pick < *cur) {
                best = Some(pick);
            }
        }
        best.map(|v| (start, exec, v.into_iter().map(|(_, id)| id).collect()))
    }

    fn fill_infer(&mut self) {
        loop {
            let gpu = self.state.gpu(0, 0);
            if gpu.infer.outstanding(self.now) >= self.cfg.work_horizon {
                let at = (gpu.infer.free_at(self.now) - self.cfg.work_horizon + Nanos(1)).max(self.now);
                arm(&mut self.infer_timer, at);
                return;
            }
            // Every (latest start, larger batch first, model, batch index).
            let mut strategies = Vec::new();
            let mut held: Vec<ModelId> = gpu.models().map(|(m, _)| m).collect();
            held.sort_unstable();
            for &m in &held {
                let p = self.profile(m);
                for bi in 0..p.batch_sizes.len() {
                    let b = p.batch_sizes[bi] as i64;
                    if let Some(&(head, _)) = self.eligible(m, bi).first() {
                        let latest = head - self.exec(m, bi) - p.output_transfer * (b - 1);
                        strategies.push((latest, std::cmp::Reverse(b), m, bi));
                    }
                }
            }
            strategies.sort_unstable();
            let mut chosen = None;
            for &(_, _, m, bi) in &strategies {
                let Some(mut c) = self.best_batch(m, bi) else { continue };
                let mut cbi = bi;
                for bj in bi + 1..self.profile(m).batch_sizes.len() {
                    match self.best_batch(m, bj) {
                        Some(more) => (c, cbi) = (more, bj),
                        None => break,
                    }
                }
                chosen = Some((m, cbi, c));
                break;
            }
            let Some((m, bi, (start, exec, batch))) = chosen else { return };
            let p = self.profile(m);
            let b = p.batch_sizes[bi] as i64;
            let gpu = self.state.gpu(0, 0);
            let mut floor = self.now + p.input_transfer * b;
            let (mut earliest, latest) = window_for(start, self.now, self.slack);
            let r = gpu.model(m).unwrap();
            floor = floor.max(r.effective_at);
            if !r.confirmed {
                earliest = earliest.max(r.effective_at);
            }
            for &id in &batch {
                self.reqs[id as usize].st = St::Running;
            }
            let id = self.state.next_action_id();
            self.send(Action::infer(id, 0, m, (earliest, latest), exec, batch), floor.max(earliest), exec);
        }
    }

    fn fill_load(&mut self) {
        loop {
            let gpu = self.state.gpu(0, 0);
            if gpu.load.outstanding(self.now) >= self.cfg.work_horizon {
                let at = (gpu.load.free_at(self.now) - self.cfg.work_horizon + Nanos(1)).max(self.now);
                arm(&mut self.load_timer, at);
                return;
            }
            // Most demand first, then least recently loaded, then lowest id.
            let best = (0..self.catalog.len() as ModelId)
                .filter(|&m| !gpu.holds(m) && self.catalog.pages_needed(m).unwrap() <= gpu.pages_total())
                .map(|m| (self.demand(m), std::cmp::Reverse(self.last_loaded[m as usize]), std::cmp::Reverse(m)))
                .filter(|(d, _, _)| *d > Nanos::ZERO)
                .max();
            let Some((_, _, std::cmp::Reverse(m))) = best else { return };
            let need = self.catalog.pages_needed(m).unwrap();
            let victims = if gpu.pages_free() >= need {
                Vec::new()
            } else {
                match gpu.lru_victims(need, self.now, |v| self.waiting(v).next().is_none()) {
                    Some(v) => v,
                    None => return,
                }
            };
            for v in victims {
                let id = self.state.next_action_id();
                self.send(Action::unload(id, 0, v, (self.now, TimePoint::MAX)), self.now, Nanos::ZERO);
            }
            let duration = self.state.predict_load(0, m);
            let (start, _) = self.state.gpu(0, 0).load.predict(self.now, duration, self.now);
            let window = window_for(start, self.now, self.slack);
            self.last_loaded[m as usize] = self.now;
            let id = self.state.next_action_id();
            self.send(Action::load(id, 0, m, window, duration), window.0, duration);
            self.fill_infer();
        }
    }

    fn on_result(&mut self, r: &ActionResult) {
        let (o, _) = self.state.record_result(r).expect("known action");
        assert!(r.is_success(), "reference instances are failure-free: {r:?}");
        if o.action.kind == ActionKind::Infer {
            for &id in &o.action.batch {
                let q = &self.reqs[id as usize];
                let latency = self.now - q.arrival;
                let status = if latency <= q.slo { ResponseStatus::Ok } else { ResponseStatus::Timeout };
                self.answer(id, status, latency);
            }
        }
        self.fill_infer();
        self.fill_load();
    }

    fn deny_due(&self) -> Option<TimePoint> {
        self.reqs
            .iter()
            .filter(|r| r.st == St::Waiting)
            .map(|r| r.deadline - self.profile(r.model).exec_durations[0] - self.cfg.tardy_slack + Nanos(1))
            .min()
    }

    fn run(mut self, arrivals: &[Arrival]) -> Trace {
        let mut pending = arrivals.iter().copied().peekable();
        loop {
            let next = [
                pending.peek().map(|a| a.at),
                self.worker.next_event_time(),
                self.deny_due(),
                self.infer_timer,
                self.load_timer,
            ]
            .into_iter()
            .flatten()
            .min();
            let Some(t) = next else { break };
            self.now = t;
            for r in self.worker.advance(t) {
                self.on_result(&r);
            }
            for id in 0..self.reqs.len() {
                let r = &self.reqs[id];
                let exec1 = self.profile(r.model).exec_durations[0];
                if r.st == St::Waiting && t + exec1 + self.cfg.tardy_slack > r.deadline {
                    let latency = t - r.arrival;
                    self.answer(id as RequestId, ResponseStatus::Denied, latency);
                }
            }
            if self.infer_timer.is_some_and(|at| at <= t) {
                self.infer_timer = None;
                self.fill_infer();
            }
            if self.load_timer.is_some_and(|at| at <= t) {
                self.load_timer = None;
                self.fill_load();
            }
            while pending.peek().is_some_and(|a| a.at == t) {
                let a = pending.next().unwrap();
                self.arrive(a);
            }
        }
        self.trace.answers.sort_unstable_by_key(|a| a.0);
        self.trace
    }
}

/// The reference schedule for `arrivals` on one GPU with `pages` pages.
pub fn reference(catalog: Arc<ModelCatalog>, pages: u32, arrivals: &[Arrival]) -> Trace {
    Oracle::new(catalog, pages).run(arrivals)
}

/// The scheduler's schedule for the same instance.
pub fn scheduled(catalog: Arc<ModelCatalog>, pages: u32, arrivals: &[Arrival]) -> Trace {
    let mut rig = Rig::new(catalog, 1, pages, Default::default(), SchedulerConfig::default());
    for a in arrivals {
        rig.run_until(a.at);
        rig.request(a.model, a.slo);
    }
    rig.run_to_completion();
    let dispatches = rig
        .dispatched
        .iter()
        .map(|(t, _, a)| {
            let mut b = a.batch.clone();
            b.sort_unstable();
            (*t, a.kind, a.model_id, b)
        })
        .collect();
    let mut answers: Vec<Answer> = rig.responses.iter().map(|(_, r)| (r.request_id, r.status, r.latency)).collect();
    answers.sort_unstable_by_key(|a| a.0);
    Trace { dispatches, answers }
}

fn at_us(us: i64) -> TimePoint {
    TimePoint::ZERO + Nanos::from_micros(us)
}

fn arrivals(spec: &[(i64, ModelId, f64)]) -> Vec<Arrival> {
    spec.iter()
        .map(|&(us, model, slo_ms)| Arrival { at: at_us(us), model, slo: super::ms(slo_ms) })
        .collect()
}

/// Two toy models with room for both: interleaved arrivals, two cold Loads
/// and a batch of two.
pub fn instance_a() -> (u32, Vec<Arrival>) {
    (7, arrivals(&[(13, 0, 30.0), (517, 1, 40.0), (1_103, 0, 25.0), (2_311, 0, 60.0), (9_707, 1, 20.0)]))
}

/// Room for one model only: the second must wait until the first is idle,
/// then evict it, and the first is loaded back for a late request.
pub fn instance_b() -> (u32, Vec<Arrival>) {
    (4, arrivals(&[(7, 0, 20.0), (1_009, 1, 60.0), (2_003, 1, 70.0), (4_001, 0, 80.0), (21_013, 0, 50.0)]))
}

/// Tight and varied SLOs: the largest batch is tried first and fails on
/// time, so smaller batches are taken.
pub fn instance_c() -> (u32, Vec<Arrival>) {
    (7, arrivals(&[(11, 1, 50.0), (307, 0, 30.0), (613, 0, 21.0), (919, 0, 45.0), (1_201, 0, 20.0)]))
}

pub fn toy_pair() -> Arc<ModelCatalog> {
    Arc::new(
        ModelCatalog::one_each(
            clockwork::profiles::DEFAULT_PAGE_BYTES,
            vec![super::toy_profile("toy0"), super::toy_profile("toy1")],
        )
        .unwrap(),
    )
}

/// Compares the two schedules for an instance, describing the first
/// difference.
pub fn compare(pages: u32, arrivals: &[Arrival]) -> Result<Trace, String> {
    let want = reference(toy_pair(), pages, arrivals);
    let got = scheduled(toy_pair(), pages, arrivals);
    for (i, (w, g)) in want.dispatches.iter().zip(&got.dispatches).enumerate() {
        if w != g {
            return Err(format!("dispatch {i}: reference {w:?}, scheduler {g:?}"));
        }
    }
    if want.dispatches.len() != got.dispatches.len() {
        return Err(format!("{} reference dispatches, {} scheduled", want.dispatches.len(), got.dispatches.len()));
    }
    if want.answers != got.answers {
        return Err(format!("answers differ: reference {:?}, scheduler {:?}", want.answers, got.answers));
    }
    Ok(want)
}
