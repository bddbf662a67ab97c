//! The cluster state machine: bounded per-machine stores, round execution
//! with pre-mutation validation, and the charged data-movement primitives.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::usage::{PrimitiveCounts, UsageReport};
use super::{CommDir, MachineId, MpcConfig, MpcError, RoundStats};
use crate::seeds::mix_seed;

/// Anything a machine can store. `words()` is the record's size in the
/// abstract cost model (one coordinate, id, or hash value = one word); the
/// simulator charges space by this number regardless of host representation.
pub trait Record: Clone {
    fn words(&self) -> usize;
}

impl Record for u64 {
    fn words(&self) -> usize {
        1
    }
}

impl Record for i64 {
    fn words(&self) -> usize {
        1
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Machine<R> {
    store: Vec<R>,
    words: usize,
}

/// Per-machine context handed to round programs.
#[derive(Debug, Clone, Copy)]
pub struct MachineCtx {
    pub machine: MachineId,
    pub machines: usize,
    pub round: u64,
    seed: u64,
}

impl MachineCtx {
    /// Deterministic stream for this (seed, round, machine) triple.
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix_seed(&[self.seed, self.round, self.machine as u64]))
    }
}

/// What a machine's program produced: its replacement local store plus
/// outgoing messages. Messages are delivered at the round barrier and
/// appended to the recipient's store in (sender, emission order).
#[derive(Debug, Clone)]
pub struct MachineOutput<R> {
    pub keep: Vec<R>,
    pub send: Vec<(MachineId, R)>,
}

impl<R> MachineOutput<R> {
    pub fn keep(keep: Vec<R>) -> Self {
        MachineOutput { keep, send: Vec::new() }
    }
}

#[derive(Debug, Clone)]
pub struct MpcCluster<R: Record> {
    config: MpcConfig,
    machines: Vec<Machine<R>>,
    round_counter: u64,
    peak_local_words: usize,
    peak_global_words: usize,
    prims: PrimitiveCounts,
    /// Words withheld from each machine when primitives redistribute records.
    /// Lets a stage keep headroom for follow-up deliveries (e.g. a replicated
    /// seed record) without tripping the space check.
    fill_reserve: usize,
}

impl<R: Record> MpcCluster<R> {
    /// Lays the payload out contiguously: machine 0 takes records until the
    /// next one would not fit, then machine 1, and so on. An empty payload is
    /// a valid (idle) cluster.
    pub fn create(config: MpcConfig, payload: Vec<R>) -> Result<Self, MpcError> {
        config.validate()?;
        let space = config.local_space_words;
        let total: usize = payload.iter().map(Record::words).sum();
        let capacity = config.machine_count * space;
        if total > capacity {
            return Err(MpcError::CapacityExceeded {
                payload: total,
                capacity,
                machines: config.machine_count,
                space,
                reserve: 0,
            });
        }
        let mut machines: Vec<Machine<R>> = (0..config.machine_count)
            .map(|_| Machine { store: Vec::new(), words: 0 })
            .collect();
        let mut m = 0usize;
        for rec in payload {
            let w = rec.words();
            if w > space {
                return Err(MpcError::SpaceViolation { machine: m, words: w, limit: space });
            }
            while machines[m].words + w > space {
                m += 1;
                if m >= machines.len() {
                    // can only happen with heterogeneous record sizes that
                    // pack worse than the total-words bound suggests
                    return Err(MpcError::CapacityExceeded {
                        payload: total,
                        capacity,
                        machines: config.machine_count,
                        space,
                        reserve: 0,
                    });
                }
            }
            machines[m].words += w;
            machines[m].store.push(rec);
        }
        let mut cluster = MpcCluster {
            config,
            machines,
            round_counter: 0,
            peak_local_words: 0,
            peak_global_words: 0,
            prims: PrimitiveCounts::default(),
            fill_reserve: 0,
        };
        cluster.note_peaks();
        Ok(cluster)
    }

    /// Words each machine may be filled to when primitives redistribute.
    pub fn set_fill_reserve(&mut self, words: usize) -> Result<(), MpcError> {
        if words >= self.config.local_space_words {
            return Err(MpcError::InvalidConfig(format!(
                "fill reserve {words} swallows the whole machine space {}",
                self.config.local_space_words
            )));
        }
        self.fill_reserve = words;
        Ok(())
    }

    pub fn config(&self) -> &MpcConfig {
        &self.config
    }

    pub fn machine_count(&self) -> usize {
        self.machines.len()
    }

    pub fn round_counter(&self) -> u64 {
        self.round_counter
    }

    pub fn peak_local_words(&self) -> usize {
        self.peak_local_words
    }

    pub fn peak_global_words(&self) -> usize {
        self.peak_global_words
    }

    pub fn global_words(&self) -> usize {
        self.machines.iter().map(|m| m.words).sum()
    }

    pub fn primitive_counts(&self) -> &PrimitiveCounts {
        &self.prims
    }

    pub fn machine_store(&self, m: MachineId) -> &[R] {
        &self.machines[m].store
    }

    /// Records in global order (machine 0 first).
    pub fn iter_global(&self) -> impl Iterator<Item = &R> {
        self.machines.iter().flat_map(|m| m.store.iter())
    }

    pub fn collect_global(&self) -> Vec<R> {
        self.iter_global().cloned().collect()
    }

    pub fn usage(&self) -> UsageReport {
        UsageReport {
            rounds: self.round_counter,
            peak_local_words: self.peak_local_words,
            peak_global_words: self.peak_global_words,
            primitive_counts: self.prims.clone(),
        }
    }

    /// Runs one synchronous round. `program` sees each machine's store (plus
    /// a context carrying a deterministic RNG handle) and returns the
    /// machine's new store and outgoing messages. All constraint checks run
    /// before any mutation; on error the cluster is untouched.
    pub fn run_round<F>(&mut self, program: F) -> Result<RoundStats, MpcError>
    where
        F: Fn(MachineCtx, &[R]) -> MachineOutput<R>,
    {
        let space = self.config.local_space_words;
        let nm = self.machines.len();
        let round = self.round_counter;
        let outputs: Vec<MachineOutput<R>> = self
            .machines
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let ctx = MachineCtx {
                    machine: i,
                    machines: nm,
                    round,
                    seed: self.config.seed,
                };
                program(ctx, &m.store)
            })
            .collect();

        // validation pass: addresses, send caps, receive caps, then storage
        for (i, out) in outputs.iter().enumerate() {
            for (dest, _) in &out.send {
                if *dest >= nm {
                    return Err(MpcError::BadAddress { dest: *dest, machines: nm });
                }
            }
            let sent: usize = out.send.iter().map(|(_, r)| r.words()).sum();
            if sent > space {
                return Err(MpcError::CommViolation {
                    machine: i,
                    dir: CommDir::Send,
                    words: sent,
                    limit: space,
                });
            }
        }
        let mut recv_words = vec![0usize; nm];
        for out in &outputs {
            for (dest, r) in &out.send {
                recv_words[*dest] += r.words();
            }
        }
        for (i, &w) in recv_words.iter().enumerate() {
            if w > space {
                return Err(MpcError::CommViolation {
                    machine: i,
                    dir: CommDir::Receive,
                    words: w,
                    limit: space,
                });
            }
        }
        let mut sent_max = 0usize;
        for (i, out) in outputs.iter().enumerate() {
            let kept: usize = out.keep.iter().map(Record::words).sum();
            let total = kept + recv_words[i];
            if total > space {
                return Err(MpcError::SpaceViolation { machine: i, words: total, limit: space });
            }
            sent_max = sent_max.max(out.send.iter().map(|(_, r)| r.words()).sum());
        }
        let recv_max = recv_words.iter().copied().max().unwrap_or(0);

        // commit: replace stores, then deliver messages in sender order
        let mut inboxes: Vec<Vec<R>> = vec![Vec::new(); nm];
        for out in &outputs {
            for (dest, r) in &out.send {
                inboxes[*dest].push(r.clone());
            }
        }
        for (i, out) in outputs.into_iter().enumerate() {
            self.machines[i].store = out.keep;
        }
        for (i, inbox) in inboxes.into_iter().enumerate() {
            self.machines[i].store.extend(inbox);
        }
        for m in &mut self.machines {
            m.words = m.store.iter().map(Record::words).sum();
        }
        self.round_counter += 1;
        self.note_peaks();
        Ok(RoundStats {
            rounds_charged: 1,
            words_sent_max: sent_max,
            words_received_max: recv_max,
        })
    }

    /// Globally sorts all records by `key` (stable), then redistributes them
    /// contiguously. Charged as one black-box primitive.
    pub fn sort_by_key<K, F>(&mut self, key: F) -> Result<RoundStats, MpcError>
    where
        K: Ord,
        F: Fn(&R) -> K,
    {
        let mut all: Vec<R> = self.collect_global();
        all.sort_by_key(|r| key(r));
        self.redistribute(all)?;
        self.round_counter += self.config.primitive_round_cost as u64;
        self.prims.sort += 1;
        self.note_peaks();
        Ok(self.primitive_stats())
    }

    /// Inclusive prefix sum over `value(record)` in global order. Each record
    /// is annotated in place via `apply`; returns the grand total. Charged as
    /// one black-box primitive.
    pub fn prefix_sum<V, A>(&mut self, value: V, mut apply: A) -> Result<i64, MpcError>
    where
        V: Fn(&R) -> i64,
        A: FnMut(&mut R, i64),
    {
        let mut running = 0i64;
        for m in &mut self.machines {
            for r in &mut m.store {
                running += value(r);
                let before = r.words();
                apply(r, running);
                debug_assert_eq!(r.words(), before, "prefix annotation must not resize records");
            }
        }
        self.round_counter += self.config.primitive_round_cost as u64;
        self.prims.prefix_sum += 1;
        self.note_peaks();
        Ok(running)
    }

    /// Generalized inclusive scan with an associative combiner, in global
    /// order. This is the same primitive as [`Self::prefix_sum`] (associative
    /// scans cost the same constant number of rounds); it exists so sorted
    /// stages can run segmented scans, e.g. per-run ranking or carrying a
    /// run's head values across machine boundaries.
    ///
    /// `apply` may grow a record (annotations take words); the new layout is
    /// space-checked before anything is committed, so a failed scan leaves
    /// the cluster untouched.
    pub fn scan_assoc<T, L, C, A>(
        &mut self,
        leaf: L,
        combine: C,
        mut apply: A,
    ) -> Result<RoundStats, MpcError>
    where
        T: Clone,
        L: Fn(&R) -> T,
        C: Fn(&T, &T) -> T,
        A: FnMut(&mut R, &T),
    {
        let space = self.config.local_space_words;
        let mut staged: Vec<Vec<R>> = Vec::with_capacity(self.machines.len());
        let mut acc: Option<T> = None;
        for (i, m) in self.machines.iter().enumerate() {
            let mut new_store = m.store.clone();
            let mut words = 0usize;
            for r in &mut new_store {
                let v = leaf(r);
                let folded = match &acc {
                    None => v,
                    Some(a) => combine(a, &v),
                };
                apply(r, &folded);
                acc = Some(folded);
                words += r.words();
            }
            if words > space {
                return Err(MpcError::SpaceViolation { machine: i, words, limit: space });
            }
            staged.push(new_store);
        }
        for (m, ns) in self.machines.iter_mut().zip(staged) {
            m.words = ns.iter().map(Record::words).sum();
            m.store = ns;
        }
        self.round_counter += self.config.primitive_round_cost as u64;
        self.prims.prefix_sum += 1;
        self.note_peaks();
        Ok(self.primitive_stats())
    }

    /// Delivers a copy of `rec` to every machine. Fails (before mutation) if
    /// any machine cannot hold it. Charged as one black-box primitive.
    pub fn broadcast(&mut self, rec: R) -> Result<RoundStats, MpcError> {
        let w = rec.words();
        let space = self.config.local_space_words;
        for (i, m) in self.machines.iter().enumerate() {
            if m.words + w > space {
                return Err(MpcError::SpaceViolation {
                    machine: i,
                    words: m.words + w,
                    limit: space,
                });
            }
        }
        for m in &mut self.machines {
            m.store.push(rec.clone());
            m.words += w;
        }
        self.round_counter += self.config.primitive_round_cost as u64;
        self.prims.broadcast += 1;
        self.note_peaks();
        Ok(self.primitive_stats())
    }

    /// Space-checks and charges a broadcast whose value is consumed by the
    /// next round's local computation instead of being stored (the usual way
    /// shared parameters such as hash seeds are distributed). Every machine
    /// must be able to hold the value transiently.
    pub fn charge_transient_broadcast(&mut self, words: usize) -> Result<RoundStats, MpcError> {
        let space = self.config.local_space_words;
        for (i, m) in self.machines.iter().enumerate() {
            if m.words + words > space {
                return Err(MpcError::SpaceViolation {
                    machine: i,
                    words: m.words + words,
                    limit: space,
                });
            }
        }
        self.round_counter += self.config.primitive_round_cost as u64;
        self.prims.broadcast += 1;
        self.peak_local_words = self
            .peak_local_words
            .max(self.machines.iter().map(|m| m.words).max().unwrap_or(0) + words);
        self.peak_global_words = self.peak_global_words.max(self.global_words() + words);
        Ok(self.primitive_stats())
    }

    fn primitive_stats(&self) -> RoundStats {
        RoundStats {
            rounds_charged: self.config.primitive_round_cost,
            words_sent_max: 0,
            words_received_max: 0,
        }
    }

    fn redistribute(&mut self, all: Vec<R>) -> Result<(), MpcError> {
        let space = self.config.local_space_words;
        let cap = space - self.fill_reserve;
        let total: usize = all.iter().map(Record::words).sum();
        let capacity = self.machines.len() * cap;
        if total > capacity {
            return Err(MpcError::CapacityExceeded {
                payload: total,
                capacity,
                machines: self.machines.len(),
                space,
                reserve: self.fill_reserve,
            });
        }
        for m in &mut self.machines {
            m.store.clear();
            m.words = 0;
        }
        let mut idx = 0usize;
        for rec in all {
            let w = rec.words();
            if w > cap {
                return Err(MpcError::SpaceViolation { machine: idx, words: w, limit: cap });
            }
            while self.machines[idx].words + w > cap {
                idx += 1;
                if idx >= self.machines.len() {
                    return Err(MpcError::CapacityExceeded {
                        payload: total,
                        capacity,
                        machines: self.machines.len(),
                        space,
                        reserve: self.fill_reserve,
                    });
                }
            }
            self.machines[idx].words += w;
            self.machines[idx].store.push(rec);
        }
        Ok(())
    }

    fn note_peaks(&mut self) {
        let mut global = 0usize;
        let space = self.config.local_space_words;
        for (i, m) in self.machines.iter().enumerate() {
            // the model's hard wall: no machine ever exceeds its space at a
            // round boundary, regardless of what the driving code computed
            assert!(
                m.words <= space,
                "machine {i} holds {} words, limit {space}",
                m.words
            );
            global += m.words;
            if m.words > self.peak_local_words {
                self.peak_local_words = m.words;
            }
        }
        if global > self.peak_global_words {
            self.peak_global_words = global;
        }
    }
}

impl<R: Record + PartialEq> MpcCluster<R> {
    /// Bit-level state comparison (stores and counters), used by determinism
    /// checks.
    pub fn state_eq(&self, other: &Self) -> bool {
        self.round_counter == other.round_counter
            && self.machines.len() == other.machines.len()
            && self
                .machines
                .iter()
                .zip(&other.machines)
                .all(|(a, b)| a.store == b.store)
    }
}
