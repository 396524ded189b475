//! Demand, allocation and load-priority bookkeeping used to choose Loads.
//!
//! `d_m` is a model's outstanding work. It is split across the GPUs holding
//! the model in inverse proportion to each GPU's load from other models
//! (`a_{m,g}`), and `ℓ_g` sums a GPU's allocations. The priority
//! `p_m = d_m − Σ_g a_{m,g} · capacity / ℓ_g` estimates unserved work:
//! positive means another copy of the model would help.

use std::cmp::{Ordering, Reverse};
use std::collections::BTreeSet;

use crate::profiles::ModelId;
use crate::time::TimePoint;

/// Load floor used in place of an idle GPU's zero load, in ns.
pub const LOAD_EPSILON: f64 = 1_000.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Priority(pub f64);

impl Eq for Priority {}

impl PartialOrd for Priority {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Priority {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

type CandidateKey = (Reverse<Priority>, TimePoint, ModelId);

#[derive(Debug, Clone, Default)]
struct ModelStats {
    demand: f64,
    alloc: Vec<(usize, f64)>,
    priority: f64,
    last_loaded: TimePoint,
    key: Option<CandidateKey>,
}

#[derive(Debug, Clone)]
pub struct LoadStats {
    capacity: f64,
    models: Vec<ModelStats>,
    gpu_load: Vec<f64>,
    candidates: BTreeSet<CandidateKey>,
}

impl LoadStats {
    /// `capacity` is schedulable execution time per GPU, in ns.
    pub fn new(models: usize, gpus: usize, capacity: f64) -> Self {
        LoadStats {
            capacity,
            models: vec![ModelStats::default(); models],
            gpu_load: vec![0.0; gpus],
            candidates: BTreeSet::new(),
        }
    }

    pub fn capacity(&self) -> f64 {
        self.capacity
    }

    pub fn demand(&self, m: ModelId) -> f64 {
        self.models[m as usize].demand
    }

    pub fn priority(&self, m: ModelId) -> f64 {
        self.models[m as usize].priority
    }

    pub fn gpu_load(&self, g: usize) -> f64 {
        self.gpu_load[g]
    }

    pub fn allocation(&self, m: ModelId, g: usize) -> f64 {
        self.models[m as usize]
            .alloc
            .iter()
            .find(|(h, _)| *h == g)
            .map_or(0.0, |&(_, a)| a)
    }

    pub fn holders(&self, m: ModelId) -> impl Iterator<Item = usize> + '_ {
        self.models[m as usize].alloc.iter().map(|&(g, _)| g)
    }

    pub fn holds(&self, m: ModelId, g: usize) -> bool {
        self.holders(m).any(|h| h == g)
    }

    pub fn add_demand(&mut self, m: ModelId, delta: f64) {
        let s = &mut self.models[m as usize];
        s.demand = (s.demand + delta).max(0.0);
        if s.demand < 1e-6 {
            s.demand = 0.0;
        }
        self.refresh(m);
    }

    pub fn set_demand(&mut self, m: ModelId, d: f64) {
        self.models[m as usize].demand = d.max(0.0);
        self.refresh(m);
    }

    pub fn add_holder(&mut self, m: ModelId, g: usize, now: TimePoint) {
        let s = &mut self.models[m as usize];
        if !s.alloc.iter().any(|(h, _)| *h == g) {
            s.alloc.push((g, 0.0));
            s.last_loaded = now;
        }
        self.refresh(m);
    }

    pub fn remove_holder(&mut self, m: ModelId, g: usize) {
        let s = &mut self.models[m as usize];
        if let Some(i) = s.alloc.iter().position(|(h, _)| *h == g) {
            let (_, a) = s.alloc.swap_remove(i);
            self.gpu_load[g] = (self.gpu_load[g] - a).max(0.0);
        }
        self.refresh(m);
    }

    /// Recomputes `m`'s allocations and priority from current GPU loads.
    pub fn refresh(&mut self, m: ModelId) {
        let s = &mut self.models[m as usize];
        for &(g, a) in &s.alloc {
            self.gpu_load[g] = (self.gpu_load[g] - a).max(0.0);
        }
        let priority = if s.alloc.is_empty() {
            s.demand
        } else {
            let weights: Vec<f64> = s
                .alloc
                .iter()
                .map(|&(g, _)| 1.0 / self.gpu_load[g].max(LOAD_EPSILON))
                .collect();
            let total: f64 = weights.iter().sum();
            let mut served = 0.0;
            for (slot, w) in s.alloc.iter_mut().zip(&weights) {
                let a = s.demand * w / total;
                slot.1 = a;
                self.gpu_load[slot.0] += a;
                if a > 0.0 {
                    served += a * self.capacity / self.gpu_load[slot.0].max(LOAD_EPSILON);
                }
            }
            s.demand - served
        };
        s.priority = priority;
        if let Some(k) = s.key.take() {
            self.candidates.remove(&k);
        }
        if priority > 0.0 {
            let k = (Reverse(Priority(priority)), s.last_loaded, m);
            self.candidates.insert(k);
            s.key = Some(k);
        }
    }

    /// Highest-priority model with positive priority that `skip` does not
    /// exclude. Ties go to the least recently loaded, then the lowest id.
    pub fn best_candidate(&self, mut skip: impl FnMut(ModelId) -> bool) -> Option<ModelId> {
        self.candidates.iter().map(|&(_, _, m)| m).find(|&m| !skip(m))
    }

    pub fn candidates(&self) -> usize {
        self.candidates.len()
    }
}
