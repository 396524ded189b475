use std::cmp::Reverse;
use std::collections::{BTreeSet, HashMap};

use crate::profiles::ModelId;
use crate::protocol::RequestId;
use crate::time::TimePoint;

/// Position of a request in a batch queue. `epoch` distinguishes a
/// re-queued request from its stale entries.
pub type QueueKey = (TimePoint, RequestId, u32);

/// One queue per supported batch size, each ordered by deadline (then id,
/// which is arrival order). Every queued request starts in all of them.
#[derive(Debug, Clone)]
pub struct BatchQueues {
    queues: Vec<BTreeSet<QueueKey>>,
}

impl BatchQueues {
    pub fn new(batch_sizes: usize) -> Self {
        BatchQueues {
            queues: vec![BTreeSet::new(); batch_sizes],
        }
    }

    pub fn len(&self) -> usize {
        self.queues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queues.is_empty()
    }

    pub fn insert_all(&mut self, key: QueueKey) {
        for q in &mut self.queues {
            q.insert(key);
        }
    }

    pub fn queue(&self, bi: usize) -> &BTreeSet<QueueKey> {
        &self.queues[bi]
    }

    pub fn queue_mut(&mut self, bi: usize) -> &mut BTreeSet<QueueKey> {
        &mut self.queues[bi]
    }

    pub fn entries(&self) -> usize {
        self.queues.iter().map(|q| q.len()).sum()
    }
}

/// A candidate Infer: run `batch` requests of `model`, starting no later
/// than `latest`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Strategy {
    pub latest: TimePoint,
    /// Larger batches first among equal `latest`.
    pub batch_rank: Reverse<u32>,
    pub model: ModelId,
    pub batch_index: usize,
}

impl Strategy {
    pub fn batch(&self) -> u32 {
        self.batch_rank.0
    }
}

/// Strategies for one Infer executor, earliest `latest` first, holding at
/// most one entry per (model, batch size).
#[derive(Debug, Clone, Default)]
pub struct StrategyQueue {
    order: BTreeSet<Strategy>,
    current: HashMap<(ModelId, usize), Strategy>,
}

impl StrategyQueue {
    /// Inserts `s`, replacing any strategy for the same model and batch.
    pub fn upsert(&mut self, s: Strategy) {
        if let Some(old) = self.current.insert((s.model, s.batch_index), s) {
            if old == s {
                return;
            }
            self.order.remove(&old);
        }
        self.order.insert(s);
    }

    pub fn remove(&mut self, model: ModelId, batch_index: usize) {
        if let Some(old) = self.current.remove(&(model, batch_index)) {
            self.order.remove(&old);
        }
    }

    pub fn pop(&mut self) -> Option<Strategy> {
        let s = self.order.pop_first()?;
        self.current.remove(&(s.model, s.batch_index));
        Some(s)
    }

    pub fn peek(&self) -> Option<&Strategy> {
        self.order.first()
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}
