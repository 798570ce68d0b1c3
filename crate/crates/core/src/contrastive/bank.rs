use std::collections::{BTreeMap, VecDeque};

use crate::contrastive::RepRecord;
use crate::Task;

pub const DEFAULT_BANK_CAPACITY: usize = 32;

/// FIFO queues of detached representations keyed by (task, article, outcome).
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    queues: BTreeMap<(Task, usize, u8), VecDeque<Vec<f64>>>,
}

impl Default for MemoryBank {
    fn default() -> Self {
        Self::new(DEFAULT_BANK_CAPACITY)
    }
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            queues: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn queue_len(&self, task: Task, article: usize, outcome: u8) -> usize {
        self.queues.get(&(task, article, outcome)).map_or(0, VecDeque::len)
    }

    pub fn queue(&self, task: Task, article: usize, outcome: u8) -> impl Iterator<Item = &[f64]> {
        self.queues
            .get(&(task, article, outcome))
            .into_iter()
            .flat_map(|q| q.iter().map(Vec::as_slice))
    }

    pub fn len(&self) -> usize {
        self.queues.values().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push(&mut self, task: Task, article: usize, outcome: u8, representation: Vec<f64>) {
        if self.capacity == 0 {
            return;
        }
        let q = self.queues.entry((task, article, outcome)).or_default();
        q.push_back(representation);
        while q.len() > self.capacity {
            q.pop_front();
        }
    }

    /// Appends records in order, evicting the oldest entries of full queues.
    pub fn update(&mut self, records: impl IntoIterator<Item = RepRecord>) {
        for r in records {
            self.push(r.task, r.article, r.outcome, r.representation);
        }
    }

    /// All entries for `task` as pool records, in key order then age order.
    pub fn snapshot(&self, task: Task) -> Vec<RepRecord> {
        self.queues
            .range((task, 0, 0)..=(task, usize::MAX, u8::MAX))
            .flat_map(|(&(task, article, outcome), q)| {
                q.iter().map(move |rep| RepRecord {
                    representation: rep.clone(),
                    article,
                    outcome,
                    task,
                    case: None,
                })
            })
            .collect()
    }
}
