//! Aggregation of request and action logs into a report.

use serde::{Deserialize, Serialize};

use crate::controller_state::nearest_rank;
use crate::protocol::{ActionKind, ResponseStatus};
use crate::time::{Nanos, TimePoint};

use super::telemetry::{ActionRecord, RequestRecord};

/// Percentiles reported for every error distribution.
pub const CDF_PERCENTILES: [f64; 11] = [1.0, 5.0, 10.0, 25.0, 50.0, 75.0, 90.0, 95.0, 99.0, 99.9, 100.0];

/// Points kept per plotted CDF.
const CDF_POINTS: usize = 200;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IntervalStats {
    pub start_s: f64,
    /// Arrivals per second.
    pub offered: f64,
    /// Arrivals per second that completed within their SLO.
    pub goodput: f64,
    pub satisfaction: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
    pub mean_batch: f64,
    pub cold_starts: u64,
    pub denied: u64,
    pub timeouts: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub requests: u64,
    pub ok: u64,
    pub denied: u64,
    pub timeouts: u64,
    /// Ok responses past their SLO. Always zero in a correct run.
    pub slo_violations: u64,
    pub offered_rps: f64,
    pub goodput_rps: f64,
    pub satisfaction: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
    pub mean_batch: f64,
    pub cold_starts: u64,
}

/// Signed error distribution in milliseconds; positive means later or
/// longer than predicted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorCdf {
    pub count: u64,
    /// Fraction where the measurement was below the prediction.
    pub over_fraction: f64,
    /// Fraction where the measurement exceeded the prediction.
    pub under_fraction: f64,
    /// `(percentile, ms)` at each of [`CDF_PERCENTILES`].
    pub percentiles: Vec<(f64, f64)>,
    /// `(ms, cumulative fraction)`, downsampled for plotting.
    pub points: Vec<(f64, f64)>,
}

impl ErrorCdf {
    pub fn from_errors(errors: impl IntoIterator<Item = Nanos>) -> Self {
        let mut v: Vec<Nanos> = errors.into_iter().collect();
        if v.is_empty() {
            return ErrorCdf::default();
        }
        v.sort_unstable();
        let n = v.len();
        let over = v.iter().filter(|e| e.0 < 0).count();
        let under = v.iter().filter(|e| e.0 > 0).count();
        let percentiles = CDF_PERCENTILES
            .iter()
            .map(|&p| (p, nearest_rank(&v, p).expect("non-empty").as_millis_f64()))
            .collect();
        let step = n.div_ceil(CDF_POINTS).max(1);
        let mut points: Vec<(f64, f64)> = (0..n)
            .step_by(step)
            .map(|i| (v[i].as_millis_f64(), (i + 1) as f64 / n as f64))
            .collect();
        if points.last().is_none_or(|p| p.1 < 1.0) {
            points.push((v[n - 1].as_millis_f64(), 1.0));
        }
        ErrorCdf {
            count: n as u64,
            over_fraction: over as f64 / n as f64,
            under_fraction: under as f64 / n as f64,
            percentiles,
            points,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub name: String,
    pub interval_s: f64,
    pub warmup_s: f64,
    pub totals: Totals,
    pub intervals: Vec<IntervalStats>,
    /// Infer duration: measured minus predicted.
    pub infer_prediction: ErrorCdf,
    /// Load duration: measured minus predicted.
    pub load_prediction: ErrorCdf,
    /// Infer completion: actual minus predicted end.
    pub completion: ErrorCdf,
}

fn latency_stats(lat: &mut [Nanos]) -> (f64, f64, f64) {
    lat.sort_unstable();
    let q = |p| nearest_rank(lat, p).map_or(0.0, |d: Nanos| d.as_millis_f64());
    (q(50.0), q(99.0), q(100.0))
}

/// Aggregates logs into `interval`-wide buckets by arrival time. Totals
/// cover arrivals at or after `warmup`.
pub fn summarize(requests: &[RequestRecord], actions: &[ActionRecord], interval: Nanos, warmup: Nanos) -> SummaryReport {
    assert!(interval.is_positive(), "interval must be positive");
    let start = TimePoint::ZERO + warmup;
    let last = requests.iter().map(|r| r.arrival).max().unwrap_or(TimePoint::ZERO);
    let buckets = ((last - TimePoint::ZERO).0 / interval.0 + 1) as usize;
    let buckets = if requests.is_empty() { 0 } else { buckets };
    let secs = interval.as_secs_f64();

    let mut lat: Vec<Vec<Nanos>> = vec![Vec::new(); buckets];
    let mut stats: Vec<IntervalStats> = (0..buckets)
        .map(|i| IntervalStats {
            start_s: i as f64 * secs,
            ..Default::default()
        })
        .collect();
    let mut batch_sum = vec![0u64; buckets];
    let mut totals = Totals::default();
    let mut all_lat = Vec::new();
    let mut total_batch = 0u64;
    let mut end = start;
    for r in requests {
        let i = ((r.arrival - TimePoint::ZERO).0 / interval.0) as usize;
        let s = &mut stats[i];
        s.offered += 1.0;
        s.cold_starts += r.cold_start as u64;
        let counted = r.arrival >= start;
        if counted {
            totals.requests += 1;
            totals.cold_starts += r.cold_start as u64;
            totals.slo_violations += r.violates_slo() as u64;
            end = end.max(r.arrival);
        }
        match r.status {
            ResponseStatus::Ok => {
                s.goodput += 1.0;
                lat[i].push(r.latency);
                batch_sum[i] += r.batch_size as u64;
                if counted {
                    totals.ok += 1;
                    all_lat.push(r.latency);
                    total_batch += r.batch_size as u64;
                }
            }
            ResponseStatus::Denied => {
                s.denied += 1;
                totals.denied += counted as u64;
            }
            ResponseStatus::Timeout => {
                s.timeouts += 1;
                totals.timeouts += counted as u64;
            }
        }
    }
    for (i, s) in stats.iter_mut().enumerate() {
        let ok = s.goodput;
        s.satisfaction = if s.offered > 0.0 { ok / s.offered } else { 1.0 };
        s.mean_batch = if ok > 0.0 { batch_sum[i] as f64 / ok } else { 0.0 };
        (s.p50_ms, s.p99_ms, s.max_ms) = latency_stats(&mut lat[i]);
        s.offered /= secs;
        s.goodput /= secs;
    }
    if totals.requests > 0 {
        // Span of counted arrivals, rounded up to whole intervals.
        let span = (end - start).0 / interval.0 + 1;
        let span_s = span as f64 * secs;
        totals.offered_rps = totals.requests as f64 / span_s;
        totals.goodput_rps = totals.ok as f64 / span_s;
        totals.satisfaction = totals.ok as f64 / totals.requests as f64;
        totals.mean_batch = if totals.ok > 0 { total_batch as f64 / totals.ok as f64 } else { 0.0 };
        (totals.p50_ms, totals.p99_ms, totals.max_ms) = latency_stats(&mut all_lat);
    } else {
        totals.satisfaction = 1.0;
    }

    let counted = |a: &&ActionRecord| a.dispatched >= start;
    let infer = || actions.iter().filter(counted).filter(|a| a.kind == ActionKind::Infer);
    SummaryReport {
        name: String::new(),
        interval_s: secs,
        warmup_s: warmup.as_secs_f64(),
        totals,
        intervals: stats,
        infer_prediction: ErrorCdf::from_errors(infer().filter_map(|a| a.prediction_error())),
        load_prediction: ErrorCdf::from_errors(
            actions
                .iter()
                .filter(counted)
                .filter(|a| a.kind == ActionKind::Load && a.device_duration.is_positive())
                .filter_map(|a| a.prediction_error()),
        ),
        completion: ErrorCdf::from_errors(infer().filter_map(|a| a.completion_error())),
    }
}
