//! Deterministic discrete-event driver: controller, workers and clients
//! share one event loop and one simulated clock.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::sync::Arc;

use crate::profiles::{ModelCatalog, ModelId};
use crate::protocol::{Action, ActionResult, RequestId, WorkerId};
use crate::scheduler::{Controller, SchedulerConfig};
use crate::time::{Nanos, TimePoint};
use crate::worker::{JitterSpec, Worker, WorkerConfig};
use crate::workload::{Arrival, Client};

use super::config::{ConfigError, ExperimentConfig, Topology};
use super::RunOutput;

#[derive(Debug)]
enum SimEvent {
    Result(WorkerId, ActionResult),
    Wake(WorkerId),
    Deliver(WorkerId, Action),
    Arrival(Arrival),
}

impl SimEvent {
    fn class(&self) -> u8 {
        match self {
            SimEvent::Result(..) => 0,
            SimEvent::Wake(_) => 1,
            SimEvent::Deliver(..) => 2,
            SimEvent::Arrival(_) => 3,
        }
    }
}

#[derive(Debug)]
struct Scheduled {
    at: TimePoint,
    class: u8,
    seq: u64,
    event: SimEvent,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // Reversed so the max-heap pops the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.class, other.seq).cmp(&(self.at, self.class, self.seq))
    }
}

/// An in-process cluster running on simulated time.
pub struct Simulation {
    controller: Controller,
    workers: Vec<Worker>,
    wake_at: Vec<Option<TimePoint>>,
    latency: Nanos,
    now: TimePoint,
    events: BinaryHeap<Scheduled>,
    seq: u64,
    clients: Vec<Client>,
    origin: HashMap<RequestId, (usize, ModelId)>,
    submitted: u64,
    processed: u64,
}

impl Simulation {
    pub fn new(
        catalog: Arc<ModelCatalog>,
        topology: &Topology,
        scheduler: SchedulerConfig,
        jitter: JitterSpec,
        seed: u64,
    ) -> Self {
        let workers: Vec<Worker> = (0..topology.workers)
            .map(|w| {
                let cfg = WorkerConfig {
                    worker_id: w,
                    gpus: topology.gpus_per_worker,
                    pages_per_gpu: topology.pages_per_gpu,
                    iocache_bytes: topology.iocache_bytes,
                    jitter,
                    seed,
                    realtime: false,
                    keep_log: false,
                };
                Worker::new(cfg, Arc::clone(&catalog))
            })
            .collect();
        let handshakes: Vec<_> = workers.iter().map(|w| w.handshake()).collect();
        Simulation {
            controller: Controller::new(catalog, &handshakes, scheduler),
            wake_at: vec![None; workers.len()],
            workers,
            latency: topology.network_latency(),
            now: TimePoint::ZERO,
            events: BinaryHeap::new(),
            seq: 0,
            clients: Vec::new(),
            origin: HashMap::new(),
            submitted: 0,
            processed: 0,
        }
    }

    pub fn now(&self) -> TimePoint {
        self.now
    }

    pub fn controller(&self) -> &Controller {
        &self.controller
    }

    pub fn controller_mut(&mut self) -> &mut Controller {
        &mut self.controller
    }

    pub fn worker(&self, w: WorkerId) -> &Worker {
        &self.workers[w as usize]
    }

    /// Requests submitted so far.
    pub fn submitted(&self) -> u64 {
        self.submitted
    }

    /// Events handled so far.
    pub fn processed(&self) -> u64 {
        self.processed
    }

    fn push(&mut self, at: TimePoint, event: SimEvent) {
        self.seq += 1;
        self.events.push(Scheduled {
            at,
            class: event.class(),
            seq: self.seq,
            event,
        });
    }

    /// Adds a client group; its first arrival is scheduled immediately.
    pub fn add_client(&mut self, client: Client) {
        let index = self.clients.len();
        assert_eq!(client.index(), index, "clients must be added in group order");
        self.clients.push(client);
        self.pull_arrival(index);
    }

    /// Schedules a single request from outside any client group.
    pub fn submit(&mut self, at: TimePoint, model: ModelId, slo: Nanos) {
        self.push(
            at,
            SimEvent::Arrival(Arrival {
                at,
                model,
                slo,
                group: usize::MAX,
            }),
        );
    }

    fn pull_arrival(&mut self, group: usize) {
        if let Some(a) = self.clients[group].next_arrival() {
            self.push(a.at, SimEvent::Arrival(a));
        }
    }

    /// Time of the next event or controller timer.
    pub fn next_time(&self) -> Option<TimePoint> {
        let ev = self.events.peek().map(|s| s.at);
        match (ev, self.controller.next_timer()) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    /// Runs every event at or before `until`.
    pub fn run_until(&mut self, until: TimePoint) {
        while let Some(t) = self.next_time() {
            if t > until {
                break;
            }
            self.step();
        }
        self.now = self.now.max(until);
    }

    /// Runs until nothing is left to do.
    pub fn run_to_completion(&mut self) {
        while self.next_time().is_some() {
            self.step();
        }
    }

    /// Handles the single earliest event or timer batch.
    pub fn step(&mut self) {
        let Some(t) = self.next_time() else { return };
        self.now = t;
        self.processed += 1;
        let timer_due = self.controller.next_timer().is_some_and(|tt| tt == t);
        let event_first = self.events.peek().is_some_and(|s| s.at == t && s.class == 0);
        if timer_due && !event_first {
            self.controller.on_timers(t);
            self.flush();
            return;
        }
        let s = self.events.pop().expect("event present");
        match s.event {
            SimEvent::Arrival(a) => {
                self.submitted += 1;
                match self.controller.on_request(a.model, a.slo, t) {
                    Ok(id) => {
                        self.origin.insert(id, (a.group, a.model));
                    }
                    Err(e) => log::warn!("dropping request: {e}"),
                }
                if a.group != usize::MAX {
                    self.pull_arrival(a.group);
                }
            }
            SimEvent::Deliver(w, action) => {
                if let Some(r) = self.workers[w as usize].on_action(action, t) {
                    self.push(t + self.latency, SimEvent::Result(w, r));
                }
                self.advance_worker(w);
            }
            SimEvent::Wake(w) => {
                if self.wake_at[w as usize] == Some(t) {
                    self.wake_at[w as usize] = None;
                    self.advance_worker(w);
                }
            }
            SimEvent::Result(w, r) => {
                self.controller.on_result(w, &r, t);
            }
        }
        self.flush();
    }

    fn advance_worker(&mut self, w: WorkerId) {
        let t = self.now;
        let results = self.workers[w as usize].advance(t);
        for r in results {
            self.push(t + self.latency, SimEvent::Result(w, r));
        }
        if let Some(next) = self.workers[w as usize].next_event_time() {
            let next = next.max(t);
            if self.wake_at[w as usize].is_none_or(|cur| next < cur || cur < t) {
                self.wake_at[w as usize] = Some(next);
                self.push(next, SimEvent::Wake(w));
            }
        }
    }

    fn flush(&mut self) {
        let out = self.controller.drain();
        for (w, a) in out.actions {
            self.push(self.now + self.latency, SimEvent::Deliver(w, a));
        }
        for r in out.responses {
            let Some((group, model)) = self.origin.remove(&r.request_id) else {
                continue;
            };
            if group == usize::MAX {
                continue;
            }
            if let Some(a) = self.clients[group].on_response(model, self.now) {
                self.push(a.at, SimEvent::Arrival(a));
            }
        }
    }

    pub fn into_output(mut self) -> RunOutput {
        RunOutput {
            pending: self.controller.pending_requests(),
            requests: self.controller.take_request_log(),
            actions: self.controller.take_action_log(),
        }
    }
}

/// Runs an experiment on simulated time.
pub fn run_simulated(cfg: &ExperimentConfig) -> Result<RunOutput, ConfigError> {
    let catalog = Arc::new(cfg.catalog()?);
    cfg.validate(&catalog)?;
    let traces = cfg.traces()?;
    let mut sim = Simulation::new(catalog, &cfg.topology, cfg.scheduler, cfg.jitter, cfg.seed);
    let horizon = cfg.horizon();
    for (i, g) in cfg.groups.iter().enumerate() {
        sim.add_client(Client::new(i, g, cfg.seed, horizon, traces[i].as_deref())?);
    }
    sim.run_until(horizon + Nanos::from_secs_f64(cfg.drain_s));
    Ok(sim.into_output())
}
