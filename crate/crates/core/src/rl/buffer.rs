use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::RlError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Demo,
    Policy,
    Guidance,
}

/// One stored step. `action` is normalised to `[-1, 1]` per component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: [f64; 6],
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub done: bool,
    pub success: bool,
    pub source: Source,
}

impl Transition {
    pub fn validate(&self) -> Result<(), RlError> {
        if self.reward != 0.0 && self.reward != 1.0 {
            return Err(RlError::InvalidTransition(format!("reward {} not in {{0, 1}}", self.reward)));
        }
        if self.success && !self.done {
            return Err(RlError::InvalidTransition("success without done".into()));
        }
        Ok(())
    }
}

/// Successful episode summary kept for threshold refresh.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuccessRecord {
    pub episode: usize,
    /// Sequence number of the episode's first stored transition.
    pub first_seq: u64,
    pub float_index: f64,
}

/// FIFO ring of transitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
    /// Total transitions ever pushed.
    pushed: u64,
    successes: VecDeque<SuccessRecord>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { capacity: capacity.max(1), items: VecDeque::new(), pushed: 0, successes: VecDeque::new() }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Sequence number the next push will get.
    pub fn next_seq(&self) -> u64 {
        self.pushed
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
        self.pushed += 1;
        let oldest = self.pushed - self.items.len() as u64;
        while self.successes.front().is_some_and(|s| s.first_seq < oldest) {
            self.successes.pop_front();
        }
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    pub fn record_success(&mut self, rec: SuccessRecord) {
        let oldest = self.pushed - self.items.len() as u64;
        if rec.first_seq >= oldest {
            self.successes.push_back(rec);
        }
    }

    /// Successful episodes whose transitions are all still stored.
    pub fn successes(&self) -> impl Iterator<Item = &SuccessRecord> {
        self.successes.iter()
    }

    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Vec<Transition> {
        (0..n).map(|_| self.items[rng.gen_range(0..self.items.len())].clone()).collect()
    }
}

/// Half the batch from demos, half from online data, uniform with
/// replacement. Errors with `NotReady` below `min_buffer` online items.
pub fn sample_batch(
    demo: &ReplayBuffer,
    online: &ReplayBuffer,
    batch_size: usize,
    min_buffer: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Transition>, RlError> {
    if batch_size < 2 || batch_size % 2 != 0 {
        return Err(RlError::InvalidConfig(format!("batch size must be even and >= 2, got {batch_size}")));
    }
    if online.len() < min_buffer.max(1) {
        return Err(RlError::NotReady { have: online.len(), need: min_buffer.max(1) });
    }
    let half = batch_size / 2;
    let mut batch = if demo.is_empty() { online.sample(half, rng) } else { demo.sample(half, rng) };
    batch.extend(online.sample(half, rng));
    Ok(batch)
}
