use std::collections::{HashMap, VecDeque};

use crate::profiles::ModelId;
use crate::time::TimePoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Residency {
    /// Pages held, weights still being copied.
    Loading,
    Ready,
}

#[derive(Debug, Clone, Copy)]
struct Entry {
    pages: u32,
    state: Residency,
    last_use: TimePoint,
}

/// Fixed-size page accounting for model weights on one GPU.
#[derive(Debug, Clone)]
pub struct PageCache {
    pages_total: u32,
    pages_free: u32,
    resident: HashMap<ModelId, Entry>,
}

impl PageCache {
    pub fn new(pages_total: u32) -> Self {
        PageCache {
            pages_total,
            pages_free: pages_total,
            resident: HashMap::new(),
        }
    }

    pub fn pages_total(&self) -> u32 {
        self.pages_total
    }

    pub fn pages_free(&self) -> u32 {
        self.pages_free
    }

    pub fn pages_held(&self) -> u32 {
        self.resident.values().map(|e| e.pages).sum()
    }

    pub fn state(&self, model: ModelId) -> Option<Residency> {
        self.resident.get(&model).map(|e| e.state)
    }

    pub fn is_ready(&self, model: ModelId) -> bool {
        self.state(model) == Some(Residency::Ready)
    }

    pub fn last_use(&self, model: ModelId) -> Option<TimePoint> {
        self.resident.get(&model).map(|e| e.last_use)
    }

    pub fn resident_models(&self) -> impl Iterator<Item = ModelId> + '_ {
        self.resident.keys().copied()
    }

    /// Takes `pages` for `model` and marks it loading. Fails without side
    /// effects when the model is present or pages are short.
    pub fn reserve(&mut self, model: ModelId, pages: u32, now: TimePoint) -> bool {
        if self.resident.contains_key(&model) || self.pages_free < pages {
            return false;
        }
        self.pages_free -= pages;
        self.resident.insert(
            model,
            Entry {
                pages,
                state: Residency::Loading,
                last_use: now,
            },
        );
        true
    }

    pub fn mark_ready(&mut self, model: ModelId) {
        if let Some(e) = self.resident.get_mut(&model) {
            e.state = Residency::Ready;
        }
    }

    /// Returns the pages freed, zero when the model was absent.
    pub fn release(&mut self, model: ModelId) -> u32 {
        match self.resident.remove(&model) {
            Some(e) => {
                self.pages_free += e.pages;
                e.pages
            }
            None => 0,
        }
    }

    pub fn touch(&mut self, model: ModelId, now: TimePoint) {
        if let Some(e) = self.resident.get_mut(&model) {
            e.last_use = e.last_use.max(now);
        }
    }

    /// Ready models from least to most recently used.
    pub fn lru_order(&self) -> Vec<ModelId> {
        let mut v: Vec<(TimePoint, ModelId)> = self
            .resident
            .iter()
            .filter(|(_, e)| e.state == Residency::Ready)
            .map(|(&m, e)| (e.last_use, m))
            .collect();
        v.sort_unstable();
        v.into_iter().map(|(_, m)| m).collect()
    }
}

/// Byte gauge for per-request input/output buffers. Requests that do not fit
/// wait in arrival order.
#[derive(Debug, Clone)]
pub struct IoCache<T> {
    capacity: u64,
    in_use: u64,
    waiting: VecDeque<(u64, T)>,
}

impl<T> IoCache<T> {
    pub fn new(capacity: u64) -> Self {
        IoCache {
            capacity,
            in_use: 0,
            waiting: VecDeque::new(),
        }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn in_use(&self) -> u64 {
        self.in_use
    }

    pub fn waiting(&self) -> usize {
        self.waiting.len()
    }

    /// A request larger than the whole cache is clamped to the capacity so
    /// it can eventually proceed alone.
    pub fn clamp(&self, bytes: u64) -> u64 {
        bytes.min(self.capacity)
    }

    /// Returns the token back if the bytes were granted immediately.
    pub fn acquire(&mut self, bytes: u64, token: T) -> Option<T> {
        let bytes = self.clamp(bytes);
        if self.waiting.is_empty() && self.in_use + bytes <= self.capacity {
            self.in_use += bytes;
            Some(token)
        } else {
            self.waiting.push_back((bytes, token));
            None
        }
    }

    /// Frees bytes and returns the waiters that now fit, in order.
    pub fn release(&mut self, bytes: u64) -> Vec<T> {
        let bytes = self.clamp(bytes);
        debug_assert!(bytes <= self.in_use);
        self.in_use -= bytes.min(self.in_use);
        let mut granted = Vec::new();
        while let Some(&(b, _)) = self.waiting.front() {
            if self.in_use + b > self.capacity {
                break;
            }
            self.in_use += b;
            granted.push(self.waiting.pop_front().unwrap().1);
        }
        granted
    }
}
