//! Wall-clock driver: workers serve over TCP, the controller runs on one
//! thread, and each client group posts requests from its own thread.

use std::collections::HashMap;
use std::net::{SocketAddr, TcpListener};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use log::{info, warn};

use crate::net::{LinkEvent, WorkerLink};
use crate::profiles::{ModelCatalog, ModelId};
use crate::protocol::{RequestId, WireError};
use crate::scheduler::Controller;
use crate::time::{Clock, Nanos, TimePoint, WallClock};
use crate::worker::{server, Worker, WorkerConfig};
use crate::workload::{Arrival, Client, GroupKind};

use super::config::{ConfigError, ExperimentConfig, Topology};
use super::RunOutput;

#[derive(Debug, thiserror::Error)]
pub enum WallError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Workload(#[from] crate::workload::WorkloadError),
    #[error("worker connection: {0}")]
    Wire(#[from] WireError),
    #[error("worker {0} reported id {1}")]
    Topology(usize, u32),
}

enum Input {
    Link(LinkEvent),
    Request(Arrival),
}

/// Delay between setup and the first arrival.
const START_DELAY: Nanos = Nanos::from_millis(200);

/// Binds one in-process worker server per topology worker on localhost.
pub fn spawn_local_workers(
    catalog: &Arc<ModelCatalog>,
    topology: &Topology,
    cfg: &ExperimentConfig,
    clock: Arc<dyn Clock>,
) -> std::io::Result<(Vec<SocketAddr>, Vec<JoinHandle<()>>)> {
    let mut addrs = Vec::new();
    let mut handles = Vec::new();
    for w in 0..topology.workers {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        addrs.push(listener.local_addr()?);
        let wc = WorkerConfig {
            worker_id: w,
            gpus: topology.gpus_per_worker,
            pages_per_gpu: topology.pages_per_gpu,
            iocache_bytes: topology.iocache_bytes,
            jitter: cfg.jitter,
            seed: cfg.seed,
            realtime: true,
            keep_log: false,
        };
        let worker = Worker::new(wc, Arc::clone(catalog));
        let clock = Arc::clone(&clock);
        handles.push(thread::spawn(move || match listener.accept() {
            Ok((stream, _)) => {
                if let Err(e) = server::serve(stream, worker, clock) {
                    warn!("worker {w}: {e}");
                }
            }
            Err(e) => warn!("worker {w} accept: {e}"),
        }));
    }
    Ok((addrs, handles))
}

fn sleep_until(clock: &dyn Clock, t: TimePoint) {
    let d = t - clock.now();
    if d.is_positive() {
        thread::sleep(d.to_std());
    }
}

fn client_thread(
    mut client: Client,
    clock: Arc<dyn Clock>,
    t0: TimePoint,
    tx: Sender<Input>,
    responses: Option<Receiver<(ModelId, TimePoint)>>,
) -> JoinHandle<()> {
    let shift = t0 - TimePoint::ZERO;
    thread::spawn(move || {
        let send = |a: Arrival, clock: &dyn Clock| {
            sleep_until(clock, a.at + shift);
            tx.send(Input::Request(a)).is_ok()
        };
        while let Some(a) = client.next_arrival() {
            if !send(a, clock.as_ref()) {
                return;
            }
        }
        let Some(rx) = responses else { return };
        while let Ok((model, at)) = rx.recv() {
            if let Some(a) = client.on_response(model, at - shift) {
                if !send(a, clock.as_ref()) {
                    return;
                }
            }
        }
    })
}

/// Runs an experiment against workers at `addrs`, or against in-process
/// workers on localhost when `addrs` is `None`.
pub fn run_wall(cfg: &ExperimentConfig, addrs: Option<Vec<SocketAddr>>) -> Result<RunOutput, WallError> {
    let catalog = Arc::new(cfg.catalog()?);
    cfg.validate(&catalog)?;
    let traces = cfg.traces()?;
    let clock: Arc<dyn Clock> = Arc::new(WallClock::new());
    let (addrs, servers) = match addrs {
        Some(a) => (a, Vec::new()),
        None => spawn_local_workers(&catalog, &cfg.topology, cfg, Arc::clone(&clock)).map_err(WireError::from)?,
    };

    let (tx, rx) = mpsc::channel::<Input>();
    let mut links = Vec::new();
    for (i, addr) in addrs.iter().enumerate() {
        let (ltx, lrx) = mpsc::channel();
        let link = WorkerLink::connect(*addr, ltx)?;
        if link.handshake().worker_id as usize != i {
            return Err(WallError::Topology(i, link.handshake().worker_id));
        }
        let tx = tx.clone();
        thread::spawn(move || {
            for e in lrx {
                if tx.send(Input::Link(e)).is_err() {
                    return;
                }
            }
        });
        links.push(link);
    }
    let handshakes: Vec<_> = links.iter().map(|l| l.handshake().clone()).collect();
    let mut controller = Controller::new(Arc::clone(&catalog), &handshakes, cfg.scheduler);

    let t0 = clock.now() + START_DELAY;
    let horizon = cfg.horizon();
    let mut group_tx: Vec<Option<Sender<(ModelId, TimePoint)>>> = Vec::new();
    let mut clients = Vec::new();
    for (i, g) in cfg.groups.iter().enumerate() {
        let client = Client::new(i, g, cfg.seed, horizon, traces[i].as_deref())?;
        let (resp_tx, resp_rx) = if g.kind == GroupKind::ClosedLoop {
            let (a, b) = mpsc::channel();
            (Some(a), Some(b))
        } else {
            (None, None)
        };
        group_tx.push(resp_tx);
        clients.push(client_thread(client, Arc::clone(&clock), t0, tx.clone(), resp_rx));
    }
    drop(tx);

    let end = t0 + (horizon - TimePoint::ZERO);
    let stop = end + Nanos::from_secs_f64(cfg.drain_s);
    let mut origin: HashMap<RequestId, (usize, ModelId)> = HashMap::new();
    let mut open_links = links.len();
    loop {
        let now = clock.now();
        if now >= stop || (now >= end && controller.pending_requests() == 0) || open_links == 0 {
            break;
        }
        let wake = controller.next_timer().unwrap_or(stop).min(stop);
        let wait = (wake - now).max(Nanos::ZERO).min(Nanos::from_millis(10));
        let received = match rx.recv_timeout(Duration::from_nanos(wait.0 as u64)) {
            Ok(i) => Some(i),
            Err(RecvTimeoutError::Timeout) => None,
            Err(RecvTimeoutError::Disconnected) => break,
        };
        let mut batch: Vec<Input> = received.into_iter().collect();
        batch.extend(rx.try_iter());
        for input in batch {
            let now = clock.now();
            match input {
                Input::Request(a) => match controller.on_request(a.model, a.slo, now) {
                    Ok(id) => {
                        origin.insert(id, (a.group, a.model));
                    }
                    Err(e) => warn!("dropping request: {e}"),
                },
                Input::Link(LinkEvent::Result(w, r)) => controller.on_result(w, &r, now),
                Input::Link(LinkEvent::Closed(w)) => {
                    warn!("worker {w} disconnected");
                    open_links -= 1;
                }
            }
        }
        controller.on_timers(clock.now());
        let out = controller.drain();
        let mut touched = vec![false; links.len()];
        for (w, a) in out.actions {
            links[w as usize].send(a)?;
            touched[w as usize] = true;
        }
        for (w, t) in touched.iter().enumerate() {
            if *t {
                links[w].flush()?;
            }
        }
        let now = clock.now();
        for r in out.responses {
            if let Some((g, m)) = origin.remove(&r.request_id) {
                if let Some(Some(s)) = group_tx.get(g) {
                    let _ = s.send((m, now));
                }
            }
        }
    }
    info!("wall run finished; {} requests pending", controller.pending_requests());
    drop(group_tx);
    for link in links {
        link.close();
    }
    for c in clients {
        let _ = c.join();
    }
    for s in servers {
        let _ = s.join();
    }
    let shift = t0 - TimePoint::ZERO;
    let mut requests = controller.take_request_log();
    for r in &mut requests {
        r.arrival = r.arrival - shift;
        r.deadline = r.deadline - shift;
    }
    let mut actions = controller.take_action_log();
    for a in &mut actions {
        for t in [
            &mut a.dispatched,
            &mut a.predicted_start,
            &mut a.predicted_end,
            &mut a.actual_start,
            &mut a.actual_end,
        ] {
            *t = *t - shift;
        }
    }
    Ok(RunOutput {
        pending: controller.pending_requests(),
        requests,
        actions,
    })
}
