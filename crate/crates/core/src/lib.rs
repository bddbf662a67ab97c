//! Building blocks for k-center clustering on a simulated bounded-memory
//! cluster: geometry and cost primitives, a round-synchronous machine model
//! with space accounting, locality-sensitive hub search, greedy covering,
//! and the multi-phase center refinement pipeline built on top of them.

pub mod clustering;
pub mod geometry;
pub mod lsh;
pub mod mpc;
pub mod refine;

mod seeds;

pub use seeds::{mix64, mix_seed};
