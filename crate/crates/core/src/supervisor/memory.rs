use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Subgoal;
use crate::geometry::SpatialConstraint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub constraint: SpatialConstraint,
    pub successes: u32,
    /// Failures since the last success.
    pub failures: u32,
}

/// Subgoal id to box cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodicMemory {
    entries: BTreeMap<String, MemoryEntry>,
    pub invalidation_limit: u32,
}

impl Default for EpisodicMemory {
    fn default() -> Self {
        Self::new(3)
    }
}

impl EpisodicMemory {
    pub fn new(invalidation_limit: u32) -> Self {
        EpisodicMemory { entries: BTreeMap::new(), invalidation_limit: invalidation_limit.max(1) }
    }

    pub fn get(&self, subgoal: &Subgoal) -> Option<&MemoryEntry> {
        self.entries.get(&subgoal.id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Stores a freshly generated box without touching the counters.
    pub fn upsert(&mut self, subgoal: &Subgoal, constraint: SpatialConstraint) {
        self.entries
            .entry(subgoal.id.clone())
            .and_modify(|e| e.constraint = constraint)
            .or_insert(MemoryEntry { constraint, successes: 0, failures: 0 });
    }

    pub fn check(&self, subgoal: &Subgoal) -> Option<SpatialConstraint> {
        self.entries
            .get(&subgoal.id)
            .filter(|e| e.successes >= 1 && e.failures < self.invalidation_limit)
            .map(|e| e.constraint)
    }

    pub fn record(&mut self, subgoal: &Subgoal, constraint: SpatialConstraint, success: bool) {
        let limit = self.invalidation_limit;
        let entry = self
            .entries
            .entry(subgoal.id.clone())
            .or_insert(MemoryEntry { constraint, successes: 0, failures: 0 });
        entry.constraint = constraint;
        if success {
            entry.successes += 1;
            entry.failures = 0;
        } else {
            entry.failures += 1;
            if entry.failures >= limit {
                self.entries.remove(&subgoal.id);
            }
        }
    }
}

/// Stored box iff the entry has a success and fewer failures since then
/// than the invalidation limit.
pub fn check_memory(memory: &EpisodicMemory, subgoal: &Subgoal) -> Option<SpatialConstraint> {
    memory.check(subgoal)
}

pub fn record_outcome(
    mut memory: EpisodicMemory,
    subgoal: &Subgoal,
    constraint: SpatialConstraint,
    success: bool,
) -> EpisodicMemory {
    memory.record(subgoal, constraint, success);
    memory
}
