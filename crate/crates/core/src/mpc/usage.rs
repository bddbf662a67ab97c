//! Usage accounting shared by single clusters and multi-cluster pipelines.

use serde::Serialize;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PrimitiveCounts {
    pub sort: u64,
    pub prefix_sum: u64,
    pub broadcast: u64,
}

impl PrimitiveCounts {
    pub fn absorb(&mut self, other: &PrimitiveCounts) {
        self.sort += other.sort;
        self.prefix_sum += other.prefix_sum;
        self.broadcast += other.broadcast;
    }
}

/// Snapshot of one cluster's lifetime usage. Serializes to the JSON usage
/// report consumed by the experiment harness.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct UsageReport {
    pub rounds: u64,
    pub peak_local_words: usize,
    pub peak_global_words: usize,
    pub primitive_counts: PrimitiveCounts,
}

/// Aggregates usage across the many clusters a pipeline spins up.
///
/// Sequential composition adds rounds; groups that run side by side (the
/// hashing grid, repeated pipeline instances) contribute the maximum of
/// their round counts and the sum of their space footprints, which is how a
/// fleet of disjoint machine groups advancing in lockstep would bill.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct UsageMeter {
    pub rounds: u64,
    pub peak_local_words: usize,
    pub peak_global_words: usize,
    pub primitive_counts: PrimitiveCounts,
}

impl UsageMeter {
    pub fn new() -> Self {
        Self::default()
    }

    /// One cluster ran to completion after the work metered so far.
    pub fn charge_sequential(&mut self, u: &UsageReport) {
        self.rounds += u.rounds;
        self.peak_local_words = self.peak_local_words.max(u.peak_local_words);
        self.peak_global_words = self.peak_global_words.max(u.peak_global_words);
        self.primitive_counts.absorb(&u.primitive_counts);
    }

    /// A set of groups ran side by side, coexisting with `resident_words` of
    /// storage that stays live elsewhere during the window.
    pub fn charge_parallel(&mut self, group: &[UsageReport], resident_words: usize) {
        let rounds = group.iter().map(|u| u.rounds).max().unwrap_or(0);
        let local = group.iter().map(|u| u.peak_local_words).max().unwrap_or(0);
        let global: usize = group.iter().map(|u| u.peak_global_words).sum();
        self.rounds += rounds;
        self.peak_local_words = self.peak_local_words.max(local);
        self.peak_global_words = self.peak_global_words.max(global + resident_words);
        for u in group {
            self.primitive_counts.absorb(&u.primitive_counts);
        }
    }

    /// Merge a nested meter as a sequential phase.
    pub fn absorb_sequential(&mut self, m: &UsageMeter) {
        self.rounds += m.rounds;
        self.peak_local_words = self.peak_local_words.max(m.peak_local_words);
        self.peak_global_words = self.peak_global_words.max(m.peak_global_words);
        self.primitive_counts.absorb(&m.primitive_counts);
    }

    /// Merge sibling meters that ran concurrently (e.g. repeated instances).
    pub fn absorb_parallel(&mut self, siblings: &[UsageMeter]) {
        let rounds = siblings.iter().map(|m| m.rounds).max().unwrap_or(0);
        let local = siblings.iter().map(|m| m.peak_local_words).max().unwrap_or(0);
        let global: usize = siblings.iter().map(|m| m.peak_global_words).sum();
        self.rounds += rounds;
        self.peak_local_words = self.peak_local_words.max(local);
        self.peak_global_words = self.peak_global_words.max(global);
        for m in siblings {
            self.primitive_counts.absorb(&m.primitive_counts);
        }
    }

    pub fn report(&self) -> UsageReport {
        UsageReport {
            rounds: self.rounds,
            peak_local_words: self.peak_local_words,
            peak_global_words: self.peak_global_words,
            primitive_counts: self.primitive_counts.clone(),
        }
    }
}
