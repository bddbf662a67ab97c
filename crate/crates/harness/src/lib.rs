//! Experiment harness for the clustering pipeline: benchmark instances with
//! planted structure, exact and heuristic baselines to score against, and a
//! reproducible experiment driver with JSON and CSV reporting.

pub mod baseline;
pub mod experiment;
pub mod planted;

use kcenter_core::geometry::GeomError;
use kcenter_core::lsh::LshError;
use kcenter_core::mpc::MpcError;
use kcenter_core::refine::RefineError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid arguments: {0}")]
    InvalidInput(String),
    #[error(
        "could not place {k} centers {separation} apart in a box of side \
         {side} after {attempts} attempts"
    )]
    InfeasibleGeometry {
        k: usize,
        separation: f64,
        side: f64,
        attempts: u32,
    },
    #[error("{n} choose {k} exceeds the exact-search budget of {budget}")]
    TooLarge { n: usize, k: usize, budget: u64 },
    #[error(transparent)]
    Geometry(#[from] GeomError),
    #[error(transparent)]
    Hashing(#[from] LshError),
    #[error(transparent)]
    Machine(#[from] MpcError),
    #[error(transparent)]
    Pipeline(#[from] RefineError),
    #[error("io error: {0}")]
    Io(String),
}

impl HarnessError {
    /// Process exit code the CLI maps this error to: 2 for anything wrong
    /// with the request or the data (hashing and machine-model errors only
    /// escape directly during setup; mid-run they arrive wrapped in a stage
    /// error), 3 when the pipeline itself gave up, 4 when no radius on the
    /// ladder fit the center budget.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Pipeline(RefineError::NoFeasibleRadius { .. }) => 4,
            HarnessError::Pipeline(_) => 3,
            _ => 2,
        }
    }
}
