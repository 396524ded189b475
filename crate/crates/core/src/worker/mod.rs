//! Emulated predictable worker.
//!
//! Each GPU has a Load executor (which also runs Unloads), an Infer
//! executor, and an output lane. An executor takes pending actions in
//! `earliest` order, one at a time, waits for `earliest`, and rejects the
//! action if it would start after `latest`. Infer inputs are staged into the
//! IO cache as soon as the action arrives, or once space frees up; the Infer
//! executor only considers staged actions. Outputs drain after Exec without
//! holding up the next Exec.
//!
//! [`Worker`] is a pure state machine driven by explicit timestamps, so the
//! same code runs inside the discrete-event simulator and behind the TCP
//! server in [`server`].

mod jitter;
mod page_cache;
pub mod server;

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

pub use jitter::{Jitter, JitterError, JitterSpec};
pub use page_cache::{IoCache, PageCache, Residency};

use crate::profiles::{ModelCatalog, ModelId};
use crate::protocol::{Action, ActionId, ActionKind, ActionResult, ActionStatus, WorkerHandshake, WorkerId};
use crate::time::{Nanos, TimePoint};

pub const DEFAULT_PAGES_PER_GPU: u32 = 500;
pub const DEFAULT_IOCACHE_BYTES: u64 = 512 * 1024 * 1024;

#[derive(Debug, Clone)]
pub struct WorkerConfig {
    pub worker_id: WorkerId,
    pub gpus: u32,
    pub pages_per_gpu: u32,
    pub iocache_bytes: u64,
    pub jitter: JitterSpec,
    pub seed: u64,
    /// Start actions no earlier than the `now` passed to [`Worker::advance`].
    /// Set when driven by a real clock that may wake late.
    pub realtime: bool,
    /// Keep every emitted result for later inspection.
    pub keep_log: bool,
}

impl Default for WorkerConfig {
    fn default() -> Self {
        WorkerConfig {
            worker_id: 0,
            gpus: 1,
            pages_per_gpu: DEFAULT_PAGES_PER_GPU,
            iocache_bytes: DEFAULT_IOCACHE_BYTES,
            jitter: JitterSpec::None,
            seed: 0,
            realtime: false,
            keep_log: false,
        }
    }
}

type Key = (TimePoint, u64);

#[derive(Debug, Clone)]
struct PendingLoad {
    action: Action,
    received: TimePoint,
}

#[derive(Debug, Clone)]
struct PendingInfer {
    action: Action,
    io_bytes: u64,
    input: Nanos,
    /// Set once the input copy has been granted IO cache space.
    input_ready: Option<TimePoint>,
}

#[derive(Debug, Clone)]
struct Running {
    action: Action,
    start: TimePoint,
    end: TimePoint,
    device: Nanos,
    io_bytes: u64,
}

#[derive(Debug, Clone)]
struct Output {
    action_id: ActionId,
    start: TimePoint,
    end: TimePoint,
    device: Nanos,
    io_bytes: u64,
}

#[derive(Debug)]
struct Gpu {
    pages: PageCache,
    io: IoCache<Key>,
    load_pending: BTreeMap<Key, PendingLoad>,
    load_running: Option<Running>,
    load_free: TimePoint,
    infer_pending: BTreeMap<Key, PendingInfer>,
    infer_running: Option<Running>,
    infer_free: TimePoint,
    /// Model of the most recent Exec.
    infer_model: Option<ModelId>,
    outputs: VecDeque<Output>,
    output_free: TimePoint,
    jitter: Jitter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    // Completions sort before starts at equal times.
    OutputDone,
    ExecDone,
    LoadDone,
    LoadStart,
    InferStart,
}

pub struct Worker {
    config: WorkerConfig,
    catalog: Arc<ModelCatalog>,
    gpus: Vec<Gpu>,
    seq: u64,
    log: Vec<ActionResult>,
}

impl Worker {
    pub fn new(config: WorkerConfig, catalog: Arc<ModelCatalog>) -> Self {
        let gpus = (0..config.gpus)
            .map(|g| Gpu {
                pages: PageCache::new(config.pages_per_gpu),
                io: IoCache::new(config.iocache_bytes),
                load_pending: BTreeMap::new(),
                load_running: None,
                load_free: TimePoint::ZERO,
                infer_pending: BTreeMap::new(),
                infer_running: None,
                infer_free: TimePoint::ZERO,
                infer_model: None,
                outputs: VecDeque::new(),
                output_free: TimePoint::ZERO,
                jitter: Jitter::new(
                    config.jitter,
                    config
                        .seed
                        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                        .wrapping_add(((config.worker_id as u64) << 32) | g as u64),
                ),
            })
            .collect();
        Worker {
            config,
            catalog,
            gpus,
            seq: 0,
            log: Vec::new(),
        }
    }

    pub fn config(&self) -> &WorkerConfig {
        &self.config
    }

    pub fn handshake(&self) -> WorkerHandshake {
        WorkerHandshake {
            worker_id: self.config.worker_id,
            gpu_count: self.config.gpus,
            pages_total: self.config.pages_per_gpu,
            models: (0..self.catalog.len() as ModelId).collect(),
        }
    }

    pub fn page_cache(&self, gpu: u32) -> &PageCache {
        &self.gpus[gpu as usize].pages
    }

    pub fn io_in_use(&self, gpu: u32) -> u64 {
        self.gpus[gpu as usize].io.in_use()
    }

    pub fn log(&self) -> &[ActionResult] {
        &self.log
    }

    pub fn take_log(&mut self) -> Vec<ActionResult> {
        std::mem::take(&mut self.log)
    }

    /// Accepts an action. Malformed actions are answered immediately.
    pub fn on_action(&mut self, action: Action, now: TimePoint) -> Option<ActionResult> {
        if let Err(result) = self.validate(&action, now) {
            if self.config.keep_log {
                self.log.push(result);
            }
            return Some(result);
        }
        self.seq += 1;
        let key = (action.earliest, self.seq);
        let gpu = &mut self.gpus[action.gpu as usize];
        match action.kind {
            ActionKind::Load | ActionKind::Unload => {
                gpu.load_pending.insert(
                    key,
                    PendingLoad {
                        action,
                        received: now,
                    },
                );
            }
            ActionKind::Infer => {
                let p = self.catalog.get(action.model_id).expect("validated");
                let b = action.batch_size as u64;
                let io_bytes = gpu.io.clamp(b * (p.input_size + p.output_size));
                let input = p.input_transfer * b as i64;
                let input_ready = gpu.io.acquire(io_bytes, key).map(|_| now + input);
                gpu.infer_pending.insert(
                    key,
                    PendingInfer {
                        action,
                        io_bytes,
                        input,
                        input_ready,
                    },
                );
            }
        }
        None
    }

    fn validate(&self, a: &Action, now: TimePoint) -> Result<(), ActionResult> {
        let bad = || ActionResult::failed(a.action_id, ActionStatus::MalformedAction, now);
        if a.check().is_err() || a.gpu >= self.config.gpus {
            return Err(bad());
        }
        let profile = self.catalog.get(a.model_id).ok_or_else(bad)?;
        if a.kind == ActionKind::Infer && profile.batch_index(a.batch_size).is_none() {
            return Err(bad());
        }
        Ok(())
    }

    /// Time of the next internal event, if any work is outstanding.
    pub fn next_event_time(&self) -> Option<TimePoint> {
        self.gpus
            .iter()
            .filter_map(|g| self.next_gpu_event(g).map(|(t, _)| t))
            .min()
    }

    fn next_gpu_event(&self, g: &Gpu) -> Option<(TimePoint, Event)> {
        let mut best: Option<(TimePoint, Event)> = None;
        let mut offer = |t: TimePoint, e: Event| {
            if best.is_none_or(|b| (t, e) < b) {
                best = Some((t, e));
            }
        };
        if let Some(o) = g.outputs.front() {
            offer(o.end, Event::OutputDone);
        }
        if let Some(r) = &g.infer_running {
            offer(r.end, Event::ExecDone);
        }
        if let Some(r) = &g.load_running {
            offer(r.end, Event::LoadDone);
        } else if let Some(t) = Self::load_start_time(g) {
            offer(t, Event::LoadStart);
        }
        if g.infer_running.is_none() {
            if let Some((_, p, ready)) = Self::next_infer(g) {
                offer(ready.max(p.action.earliest).max(g.infer_free), Event::InferStart);
            }
        }
        best
    }

    /// The earliest pending Infer whose input is staged. Inputs still
    /// waiting for IO cache space are passed over so they cannot block the
    /// actions holding that space.
    fn next_infer(g: &Gpu) -> Option<(Key, &PendingInfer, TimePoint)> {
        g.infer_pending
            .iter()
            .find_map(|(k, p)| p.input_ready.map(|t| (*k, p, t)))
    }

    fn load_start_time(g: &Gpu) -> Option<TimePoint> {
        let (_, p) = g.load_pending.first_key_value()?;
        let mut t = p.action.earliest.max(p.received).max(g.load_free);
        if p.action.kind == ActionKind::Unload {
            if let Some(r) = &g.infer_running {
                if r.action.model_id == p.action.model_id {
                    t = t.max(r.end);
                }
            } else if g.infer_model == Some(p.action.model_id) {
                t = t.max(g.infer_free);
            }
        }
        Some(t)
    }

    /// Runs every event due at or before `now` and returns the results, in
    /// the order they were produced.
    pub fn advance(&mut self, now: TimePoint) -> Vec<ActionResult> {
        let mut out = Vec::new();
        for gi in 0..self.gpus.len() {
            while let Some((t, e)) = self.next_gpu_event(&self.gpus[gi]) {
                if t > now {
                    break;
                }
                let at = if self.config.realtime && matches!(e, Event::LoadStart | Event::InferStart) {
                    t.max(now)
                } else {
                    t
                };
                self.step(gi, e, at, &mut out);
            }
        }
        if self.config.keep_log {
            self.log.extend_from_slice(&out);
        }
        out
    }

    fn step(&mut self, gi: usize, e: Event, at: TimePoint, out: &mut Vec<ActionResult>) {
        let catalog = Arc::clone(&self.catalog);
        let g = &mut self.gpus[gi];
        match e {
            Event::OutputDone => {
                let o = g.outputs.pop_front().expect("output present");
                Self::release_io(g, o.io_bytes, at);
                out.push(ActionResult {
                    action_id: o.action_id,
                    status: ActionStatus::Success,
                    start: o.start,
                    end: o.end,
                    device_duration: o.device,
                });
            }
            Event::ExecDone => {
                let r = g.infer_running.take().expect("exec running");
                g.infer_free = r.end;
                g.infer_model = Some(r.action.model_id);
                let p = catalog.get(r.action.model_id).expect("validated");
                let start = r.end.max(g.output_free);
                let end = start + p.output_transfer * r.action.batch_size as i64;
                g.output_free = end;
                g.outputs.push_back(Output {
                    action_id: r.action.action_id,
                    start: r.start,
                    end,
                    device: r.device,
                    io_bytes: r.io_bytes,
                });
            }
            Event::LoadDone => {
                let r = g.load_running.take().expect("load running");
                g.load_free = r.end;
                g.pages.mark_ready(r.action.model_id);
                out.push(ActionResult {
                    action_id: r.action.action_id,
                    status: ActionStatus::Success,
                    start: r.start,
                    end: r.end,
                    device_duration: r.device,
                });
            }
            Event::LoadStart => {
                let (_, p) = g.load_pending.pop_first().expect("load pending");
                let a = p.action;
                g.load_free = at;
                if at > a.latest {
                    out.push(ActionResult::failed(a.action_id, ActionStatus::RejectedTooLate, at));
                    return;
                }
                let model = a.model_id;
                match a.kind {
                    ActionKind::Unload => {
                        g.pages.release(model);
                        out.push(ActionResult {
                            action_id: a.action_id,
                            status: ActionStatus::Success,
                            start: at,
                            end: at,
                            device_duration: Nanos::ZERO,
                        });
                    }
                    _ => {
                        if g.pages.state(model).is_some() {
                            out.push(ActionResult {
                                action_id: a.action_id,
                                status: ActionStatus::Success,
                                start: at,
                                end: at,
                                device_duration: Nanos::ZERO,
                            });
                            return;
                        }
                        let needed = catalog.pages_needed(model).expect("validated");
                        if !g.pages.reserve(model, needed, at) {
                            out.push(ActionResult::failed(a.action_id, ActionStatus::OutOfPages, at));
                            return;
                        }
                        let base = catalog.get(model).expect("validated").weights_transfer;
                        let device = g.jitter.apply(base);
                        g.load_running = Some(Running {
                            action: a,
                            start: at,
                            end: at + device,
                            device,
                            io_bytes: 0,
                        });
                    }
                }
            }
            Event::InferStart => {
                let key = Self::next_infer(g).expect("infer pending").0;
                let p = g.infer_pending.remove(&key).expect("infer pending");
                let a = p.action;
                g.infer_free = at;
                let status = if at > a.latest {
                    Some(ActionStatus::RejectedTooLate)
                } else if !g.pages.is_ready(a.model_id) {
                    Some(ActionStatus::ModelNotLoaded)
                } else {
                    None
                };
                if let Some(status) = status {
                    Self::release_io(g, p.io_bytes, at);
                    out.push(ActionResult::failed(a.action_id, status, at));
                    return;
                }
                let base = catalog
                    .get(a.model_id)
                    .and_then(|m| m.exec_duration(a.batch_size))
                    .expect("validated");
                let device = g.jitter.apply(base);
                g.pages.touch(a.model_id, at);
                g.infer_running = Some(Running {
                    action: a,
                    start: at,
                    end: at + device,
                    device,
                    io_bytes: p.io_bytes,
                });
            }
        }
    }

    fn release_io(g: &mut Gpu, bytes: u64, at: TimePoint) {
        for key in g.io.release(bytes) {
            if let Some(p) = g.infer_pending.get_mut(&key) {
                p.input_ready = Some(at + p.input);
            }
        }
    }
}
