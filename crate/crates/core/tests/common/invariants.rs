//! Scheduler invariants checked over randomized instances, shared by the
//! property tests and the acceptance run.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use clockwork::profiles::DEFAULT_PAGE_BYTES;
use clockwork::protocol::{ActionResult, ActionStatus, ResponseStatus};
use clockwork::scheduler::{LoadStats, SchedulerConfig};
use clockwork::worker::JitterSpec;
use clockwork::{ActionKind, ModelCatalog, Nanos, TimePoint};
use proptest::prelude::*;

use super::{toy_profile, Rig};

pub const CASES: u32 = 1000;

pub fn toy_catalog(n: usize) -> Arc<ModelCatalog> {
    Arc::new(ModelCatalog::one_each(DEFAULT_PAGE_BYTES, (0..n).map(|i| toy_profile(&format!("toy{i}"))).collect()).unwrap())
}

#[derive(Debug, Clone)]
pub struct Req {
    pub at_us: i64,
    pub model: u32,
    pub slo_ms: u32,
}

pub fn reqs(models: u32) -> impl Strategy<Value = Vec<Req>> {
    prop::collection::vec(
        (0i64..150_000, 0..models, prop_oneof![2 => 3u32..40, 3 => 40u32..300]).prop_map(|(at_us, model, slo_ms)| Req {
            at_us,
            model,
            slo_ms,
        }),
        1..40,
    )
}

pub struct Outcome {
    pub rig: Rig,
    pub arrivals: HashMap<u64, (TimePoint, Nanos, u32)>,
}

pub fn play(catalog: Arc<ModelCatalog>, workers: u32, pages: u32, jitter: JitterSpec, mut reqs: Vec<Req>) -> Outcome {
    reqs.sort_by_key(|r| r.at_us);
    let mut rig = Rig::new(catalog, workers, pages, jitter, SchedulerConfig::default());
    let mut arrivals = HashMap::new();
    for q in reqs {
        let t = TimePoint(q.at_us * 1000);
        rig.run_until(t);
        let slo = Nanos::from_millis(q.slo_ms as i64);
        let id = rig.request(q.model, slo);
        arrivals.insert(id, (t, slo, q.model));
    }
    rig.run_to_completion();
    Outcome { rig, arrivals }
}

pub fn check_run(o: &Outcome, exact: bool) -> Result<(), TestCaseError> {
    let r = &o.rig;
    let cfg = *r.controller.config();
    let catalog = Arc::clone(r.controller.catalog());

    // Accounting closure: exactly one terminal response per request.
    let mut seen = HashSet::new();
    for (_, resp) in &r.responses {
        prop_assert!(seen.insert(resp.request_id), "duplicate response {}", resp.request_id);
        let (_, slo, _) = o.arrivals[&resp.request_id];
        if resp.status == ResponseStatus::Ok {
            prop_assert!(resp.latency <= slo, "Ok past SLO: {:?}", resp);
        }
    }
    prop_assert_eq!(seen.len(), o.arrivals.len());
    prop_assert_eq!(r.controller.pending_requests(), 0);

    let results: HashMap<u64, ActionResult> = r.results.iter().map(|(_, _, x)| (x.action_id, *x)).collect();
    let mut served = HashSet::new();
    for (at, _, a) in &r.dispatched {
        // Window compliance.
        prop_assert!(a.earliest >= *at);
        if a.kind != ActionKind::Unload {
            prop_assert!(a.latest - a.earliest <= cfg.lead_slack + cfg.tardy_slack);
        }
        let res = results.get(&a.action_id).copied();
        if exact {
            prop_assert!(
                res.is_none_or(|x| x.status != ActionStatus::RejectedTooLate),
                "rejected without jitter: {:?}",
                a
            );
        }
        if a.kind != ActionKind::Infer {
            continue;
        }
        // Batch integrity.
        let p = catalog.get(a.model_id).unwrap();
        prop_assert!(p.batch_index(a.batch_size).is_some());
        prop_assert_eq!(a.batch.len(), a.batch_size as usize);
        for id in &a.batch {
            prop_assert_eq!(o.arrivals[id].2, a.model_id);
        }
        // No wasted dispatch: the planned completion meets every deadline.
        let start = a.latest - cfg.tardy_slack;
        let finish = start + a.expected_duration + p.output_transfer * (a.batch_size as i64 - 1);
        for id in &a.batch {
            let (arr, slo, _) = o.arrivals[id];
            let deadline = arr + slo - p.output_transfer - cfg.tardy_slack;
            prop_assert!(finish <= deadline, "dispatch past deadline of {}", id);
        }
        // Queue purge: nothing dispatched that its batch size could no
        // longer serve at dispatch time.
        let seed = p.exec_duration(a.batch_size).unwrap();
        for id in &a.batch {
            let (arr, slo, _) = o.arrivals[id];
            let deadline = arr + slo - p.output_transfer - cfg.tardy_slack;
            prop_assert!(*at + seed + cfg.tardy_slack <= deadline, "purged request {} dispatched", id);
        }
        if res.is_some_and(|x| x.is_success()) {
            for id in &a.batch {
                prop_assert!(served.insert(*id), "request {} served twice", id);
            }
        }
    }

    // Denial after admission happens exactly when a batch of one stops
    // fitting, or later after a failure.
    for (t, resp) in &r.responses {
        if resp.status != ResponseStatus::Denied || resp.latency == Nanos::ZERO {
            continue;
        }
        let (arr, slo, m) = o.arrivals[&resp.request_id];
        let p = catalog.get(m).unwrap();
        let deadline = arr + slo - p.output_transfer - cfg.tardy_slack;
        let deny_at = deadline - p.exec_durations[0] - cfg.tardy_slack + Nanos(1);
        prop_assert!(*t >= deny_at, "request {} denied early", resp.request_id);
        if exact {
            prop_assert_eq!(*t, deny_at);
        }
    }

    // Page conservation and mirror fidelity.
    for (w, worker) in r.workers.iter().enumerate() {
        let gpu = r.controller.state().gpu(w as u32, 0);
        let held: u32 = gpu.models().map(|(_, m)| m.pages).sum();
        prop_assert_eq!(gpu.pages_free() + held, gpu.pages_total());
        let pc = worker.page_cache(0);
        prop_assert_eq!(pc.pages_free(), gpu.pages_free());
        prop_assert_eq!(pc.pages_free() + pc.pages_held(), pc.pages_total());
    }
    Ok(())
}


/// Pages for two toy models per GPU force evictions.
pub fn check_controller(reqs: Vec<Req>, workers: u32, jitter: bool) -> Result<(), TestCaseError> {
    let spec = if jitter { JitterSpec::LogNormal { sigma: 0.05 } } else { JitterSpec::None };
    let o = play(toy_catalog(3), workers, 7, spec, reqs);
    check_run(&o, !jitter)
}

/// `(op, model, gpu, demand)`: add demand, add a holder or remove one.
pub type LoadOp = (u8, u32, usize, f64);

pub fn load_ops() -> impl Strategy<Value = Vec<LoadOp>> {
    prop::collection::vec((0u8..3, 0u32..5, 0usize..3, 1.0e4f64..5.0e7), 1..60)
}

pub fn check_allocation_conservation(ops: &[LoadOp]) -> Result<(), TestCaseError> {
    let mut s = LoadStats::new(5, 3, 1.0e8);
    for (i, &(op, m, g, v)) in ops.iter().enumerate() {
        match op {
            0 => s.add_demand(m, v),
            1 => s.add_holder(m, g, TimePoint(i as i64)),
            _ => s.remove_holder(m, g),
        }
        for m in 0..5u32 {
            let d = s.demand(m);
            let holders: Vec<usize> = s.holders(m).collect();
            let total: f64 = (0..3).map(|g| s.allocation(m, g)).sum();
            if holders.is_empty() {
                prop_assert_eq!(total, 0.0);
                prop_assert_eq!(s.priority(m), d);
            } else {
                prop_assert!((total - d).abs() <= 1.0, "sum {} vs demand {}", total, d);
            }
            prop_assert!(s.priority(m).is_finite());
        }
        for g in 0..3 {
            let l = s.gpu_load(g);
            prop_assert!(l >= 0.0 && l.is_finite());
            let sum: f64 = (0..5u32).map(|m| s.allocation(m, g)).sum();
            prop_assert!((l - sum).abs() <= 1.0, "gpu {} load {} vs {}", g, l, sum);
        }
    }
    Ok(())
}

/// An unloaded model's priority is its demand; alone on an idle GPU it is
/// negative.
pub fn check_priority_signs(d: f64, cap: f64) -> Result<(), TestCaseError> {
    let mut s = LoadStats::new(1, 1, cap);
    s.set_demand(0, d);
    prop_assert_eq!(s.priority(0), d);
    s.add_holder(0, 0, TimePoint::ZERO);
    prop_assert!(s.priority(0) < 0.0);
    Ok(())
}
