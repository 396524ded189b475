//! Shared fixtures for the integration tests.
#![allow(dead_code)]

pub mod invariants;
pub mod oracle;

use std::sync::Arc;

use clockwork::profiles::DEFAULT_PAGE_BYTES;
use clockwork::protocol::{Action, ActionResult};
use clockwork::worker::Worker;
use clockwork::{ModelCatalog, ModelProfile, Nanos, TimePoint};

pub fn ms(v: f64) -> Nanos {
    Nanos::from_millis_f64(v)
}

pub fn at_ms(v: f64) -> TimePoint {
    TimePoint::ZERO + ms(v)
}

pub fn resnet50() -> ModelProfile {
    ModelCatalog::table1()
        .profile("resnet50")
        .map(|p| (**p).clone())
        .expect("resnet50 in bundled profiles")
}

/// `copies` instances of the resnet50 profile.
pub fn resnet50_catalog(copies: usize) -> Arc<ModelCatalog> {
    let base = ModelCatalog::new(DEFAULT_PAGE_BYTES, vec![resnet50()]).unwrap();
    Arc::new(base.replicate_model("resnet50", copies).unwrap())
}

/// A profile with batch sizes 1, 2 and 4 and round durations.
pub fn toy_profile(name: &str) -> ModelProfile {
    ModelProfile {
        name: name.to_string(),
        weights_size: 3 * DEFAULT_PAGE_BYTES,
        weights_transfer: ms(8.0),
        batch_sizes: vec![1, 2, 4],
        exec_durations: vec![ms(2.0), ms(3.0), ms(5.0)],
        input_size: 1000,
        output_size: 100,
        input_transfer: Nanos::from_micros(50),
        output_transfer: Nanos::from_micros(50),
    }
}

/// Feeds `(receipt time, action)` pairs to `worker` in time order, running
/// its events in between, and returns every result with its emission time.
pub fn drive(worker: &mut Worker, mut actions: Vec<(TimePoint, Action)>) -> Vec<(TimePoint, ActionResult)> {
    actions.sort_by_key(|(t, a)| (*t, a.action_id));
    let mut out = Vec::new();
    let mut pending = actions.into_iter().peekable();
    loop {
        let next_action = pending.peek().map(|(t, _)| *t);
        let next_event = worker.next_event_time();
        let t = match (next_action, next_event) {
            (None, None) => break,
            (Some(a), None) => a,
            (None, Some(e)) => e,
            (Some(a), Some(e)) => a.min(e),
        };
        for r in worker.advance(t) {
            out.push((t, r));
        }
        while pending.peek().is_some_and(|(at, _)| *at == t) {
            let (_, a) = pending.next().unwrap();
            if let Some(r) = worker.on_action(a, t) {
                out.push((t, r));
            }
        }
    }
    out
}

use clockwork::protocol::{InferenceResponse, RequestId, WorkerId};
use clockwork::scheduler::{Controller, SchedulerConfig};
use clockwork::worker::{JitterSpec, WorkerConfig};

/// A controller wired directly to in-process workers with zero network
/// latency, recording everything it sends.
pub struct Rig {
    pub controller: Controller,
    pub workers: Vec<Worker>,
    pub now: TimePoint,
    pub dispatched: Vec<(TimePoint, WorkerId, Action)>,
    pub responses: Vec<(TimePoint, InferenceResponse)>,
    pub results: Vec<(TimePoint, WorkerId, ActionResult)>,
}

impl Rig {
    pub fn new(catalog: Arc<ModelCatalog>, workers: u32, pages: u32, jitter: JitterSpec, config: SchedulerConfig) -> Self {
        let workers: Vec<Worker> = (0..workers)
            .map(|w| {
                Worker::new(
                    WorkerConfig {
                        worker_id: w,
                        pages_per_gpu: pages,
                        jitter,
                        seed: 7 + w as u64,
                        ..WorkerConfig::default()
                    },
                    Arc::clone(&catalog),
                )
            })
            .collect();
        let hs: Vec<_> = workers.iter().map(|w| w.handshake()).collect();
        Rig {
            controller: Controller::new(catalog, &hs, config),
            workers,
            now: TimePoint::ZERO,
            dispatched: Vec::new(),
            responses: Vec::new(),
            results: Vec::new(),
        }
    }

    /// Submits a request at the current time.
    pub fn request(&mut self, model: u32, slo: Nanos) -> RequestId {
        let id = self.controller.on_request(model, slo, self.now).expect("valid request");
        self.flush();
        id
    }

    fn flush(&mut self) {
        loop {
            let out = self.controller.drain();
            if out.actions.is_empty() && out.responses.is_empty() {
                return;
            }
            for r in out.responses {
                self.responses.push((self.now, r));
            }
            for (w, a) in out.actions {
                self.dispatched.push((self.now, w, a.clone()));
                if let Some(r) = self.workers[w as usize].on_action(a, self.now) {
                    self.deliver(w, r);
                }
            }
        }
    }

    fn deliver(&mut self, w: WorkerId, r: ActionResult) {
        self.results.push((self.now, w, r));
        self.controller.on_result(w, &r, self.now);
    }

    fn next_time(&self) -> Option<TimePoint> {
        self.workers
            .iter()
            .filter_map(|w| w.next_event_time())
            .chain(self.controller.next_timer())
            .min()
    }

    /// Runs every worker event and controller timer up to `until`.
    pub fn run_until(&mut self, until: TimePoint) {
        while let Some(t) = self.next_time() {
            if t > until {
                break;
            }
            self.step_at(t);
        }
        self.now = self.now.max(until);
    }

    pub fn run_to_completion(&mut self) {
        while let Some(t) = self.next_time() {
            self.step_at(t);
        }
    }

    fn step_at(&mut self, t: TimePoint) {
        self.now = t;
        for w in 0..self.workers.len() {
            for r in self.workers[w].advance(t) {
                self.deliver(w as WorkerId, r);
            }
        }
        self.flush();
        self.controller.on_timers(t);
        self.flush();
    }

    /// Infers dispatched so far, in order.
    pub fn infers(&self) -> Vec<&Action> {
        self.dispatched
            .iter()
            .map(|(_, _, a)| a)
            .filter(|a| a.kind == clockwork::ActionKind::Infer)
            .collect()
    }
}

use clockwork::protocol::{ActionStatus, InferenceRequest, Message, ResponseStatus, WorkerHandshake};
use rand::Rng;

/// A well-formed message of any kind, drawn from `rng`.
pub fn random_message<R: Rng>(rng: &mut R) -> Message {
    let t = |rng: &mut R| TimePoint(rng.random_range(-1_000_000_000_000i64..1_000_000_000_000));
    let d = |rng: &mut R| Nanos(rng.random_range(0i64..10_000_000_000));
    match rng.random_range(0..7) {
        0 => Message::Handshake(WorkerHandshake {
            worker_id: rng.random(),
            gpu_count: rng.random_range(1..16),
            pages_total: rng.random_range(1..u32::MAX),
            models: (0..rng.random_range(0..64)).map(|_| rng.random()).collect(),
        }),
        k @ 1..=3 => {
            let earliest = t(rng);
            let window = (earliest, earliest + d(rng));
            let (id, gpu, model) = (rng.random(), rng.random(), rng.random());
            Message::Action(match k {
                1 => Action::load(id, gpu, model, window, d(rng)),
                2 => Action::unload(id, gpu, model, window),
                _ => {
                    let n = rng.random_range(1..=32);
                    Action::infer(id, gpu, model, window, d(rng), (0..n).map(|_| rng.random()).collect())
                }
            })
        }
        4 => {
            let status = [
                ActionStatus::Success,
                ActionStatus::RejectedTooLate,
                ActionStatus::OutOfPages,
                ActionStatus::ModelNotLoaded,
                ActionStatus::MalformedAction,
            ][rng.random_range(0..5)];
            let start = t(rng);
            let dev = if status == ActionStatus::Success { d(rng) } else { Nanos::ZERO };
            Message::Result(ActionResult {
                action_id: rng.random(),
                status,
                start,
                end: start + dev + Nanos(rng.random_range(0..1_000_000)),
                device_duration: dev,
            })
        }
        5 => Message::Request(InferenceRequest {
            request_id: rng.random(),
            model_id: rng.random(),
            slo: d(rng),
            arrival: t(rng),
            input_size: rng.random(),
            payload: (0..rng.random_range(0..48)).map(|_| rng.random()).collect(),
        }),
        _ => Message::Response(InferenceResponse {
            request_id: rng.random(),
            status: [ResponseStatus::Ok, ResponseStatus::Denied, ResponseStatus::Timeout][rng.random_range(0..3)],
            latency: d(rng),
            cold_start: rng.random(),
        }),
    }
}
