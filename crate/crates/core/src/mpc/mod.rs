//! Round-synchronous simulation of a cluster of space-bounded machines.
//!
//! The model: `machine_count` machines, each holding at most
//! `local_space_words` words. Computation proceeds in rounds. Within a round
//! every machine may do arbitrary local work on its own store and emit
//! messages; all messages are delivered at the round barrier. Per round, a
//! machine may send at most `local_space_words` words and receive at most
//! `local_space_words` words. Sorting, prefix sums, and broadcasts are
//! treated as black-box primitives with a fixed round charge; their outputs
//! are produced host-side and validated against the same space bounds.
//!
//! Violations are detected before any state mutation: a failed round leaves
//! the cluster exactly as it was, including the round counter.

mod cluster;
mod usage;

pub use cluster::{MachineCtx, MachineOutput, MpcCluster, Record};
pub use usage::{PrimitiveCounts, UsageMeter, UsageReport};

use serde::Serialize;

pub type MachineId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommDir {
    Send,
    Receive,
}

impl std::fmt::Display for CommDir {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CommDir::Send => write!(f, "send"),
            CommDir::Receive => write!(f, "receive"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MpcError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(
        "payload of {payload} words exceeds capacity {capacity} \
         ({machines} machines x {space} words, {reserve} reserved per machine)"
    )]
    CapacityExceeded {
        payload: usize,
        capacity: usize,
        machines: usize,
        space: usize,
        reserve: usize,
    },
    #[error("space violation: machine {machine} would hold {words} words, limit {limit}")]
    SpaceViolation {
        machine: MachineId,
        words: usize,
        limit: usize,
    },
    #[error("comm violation: machine {machine} would {dir} {words} words, limit {limit}")]
    CommViolation {
        machine: MachineId,
        dir: CommDir,
        words: usize,
        limit: usize,
    },
    #[error("message addressed to machine {dest}, cluster has {machines}")]
    BadAddress { dest: MachineId, machines: usize },
}

/// Cluster shape and accounting knobs.
#[derive(Debug, Clone, Serialize)]
pub struct MpcConfig {
    /// Ambient input size the cluster is scaled for.
    pub n: usize,
    /// Space exponent: local space is on the order of n^delta. In (0,1).
    pub delta: f64,
    /// Replication exponent carried along for hashing layers; must be > 0.
    pub rho: f64,
    /// Words of storage per machine.
    pub local_space_words: usize,
    /// Number of machines.
    pub machine_count: usize,
    /// Master seed; per-(round, machine) streams are derived from it.
    pub seed: u64,
    /// Rounds charged per sort / prefix-sum / broadcast invocation.
    pub primitive_round_cost: u32,
}

impl MpcConfig {
    /// Standard sizing: `local_space_words = ceil(c_s * n^delta)`, machine
    /// count chosen so that `machine_count * local_space_words >= min_words`.
    pub fn sized(
        n: usize,
        delta: f64,
        rho: f64,
        c_s: f64,
        min_words: usize,
        seed: u64,
    ) -> Result<Self, MpcError> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(MpcError::InvalidConfig(format!(
                "delta must be in (0,1), got {delta}"
            )));
        }
        if rho <= 0.0 {
            return Err(MpcError::InvalidConfig(format!(
                "rho must be positive, got {rho}"
            )));
        }
        if c_s <= 0.0 {
            return Err(MpcError::InvalidConfig(format!(
                "space factor must be positive, got {c_s}"
            )));
        }
        let space = (c_s * (n.max(2) as f64).powf(delta)).ceil() as usize;
        let space = space.max(1);
        let need = min_words.max(n).max(1);
        let machines = need.div_ceil(space);
        let cfg = MpcConfig {
            n,
            delta,
            rho,
            local_space_words: space,
            machine_count: machines,
            seed,
            primitive_round_cost: 1,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), MpcError> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(MpcError::InvalidConfig(format!(
                "delta must be in (0,1), got {}",
                self.delta
            )));
        }
        if self.rho <= 0.0 {
            return Err(MpcError::InvalidConfig("rho must be positive".into()));
        }
        if self.local_space_words == 0 || self.machine_count == 0 {
            return Err(MpcError::InvalidConfig(
                "need at least one machine with nonzero space".into(),
            ));
        }
        if self.primitive_round_cost == 0 {
            return Err(MpcError::InvalidConfig(
                "primitive_round_cost must be at least 1".into(),
            ));
        }
        if self
            .machine_count
            .checked_mul(self.local_space_words)
            .map_or(true, |cap| cap < self.n)
        {
            return Err(MpcError::InvalidConfig(format!(
                "cluster capacity {} * {} cannot hold n = {}",
                self.machine_count, self.local_space_words, self.n
            )));
        }
        Ok(())
    }
}

/// Outcome of one charged operation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RoundStats {
    pub rounds_charged: u32,
    /// Max words any single machine sent this round (0 for black-box
    /// primitives, whose internal traffic is bounded by construction).
    pub words_sent_max: usize,
    /// Max words any single machine received this round.
    pub words_received_max: usize,
}
