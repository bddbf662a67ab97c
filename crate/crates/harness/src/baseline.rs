//! Reference solvers the pipeline is scored against: farthest-first
//! traversal (a 2-approximation) for any size, and exhaustive enumeration
//! for instances small enough to afford the exact optimum.

use kcenter_core::geometry::{dist2_slice, PointId, PointSet};

use crate::HarnessError;

/// Subsets the exact solver is willing to scan.
pub const BRUTE_BUDGET: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineResult {
    pub centers: Vec<PointId>,
    /// Cover radius of `centers` over the whole set.
    pub cost: f64,
}

/// Farthest-first traversal from the lowest id: repeatedly add the point
/// farthest from the chosen set, ties to the lower id. Returns exactly k
/// centers in selection order.
pub fn gonzalez_baseline(points: &PointSet, k: usize) -> Result<BaselineResult, HarnessError> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(HarnessError::InvalidInput(format!(
            "need 1 <= k <= n, got k = {k}, n = {n}"
        )));
    }
    let mut centers: Vec<PointId> = vec![0];
    let mut near2: Vec<f64> = (0..n as u32)
        .map(|id| dist2_slice(points.coords(id), points.coords(0)))
        .collect();
    while centers.len() < k {
        let mut far = 0usize;
        for i in 1..n {
            if near2[i] > near2[far] {
                far = i;
            }
        }
        centers.push(far as PointId);
        let fc = points.coords(far as PointId);
        for i in 0..n {
            let d = dist2_slice(points.coords(i as PointId), fc);
            if d < near2[i] {
                near2[i] = d;
            }
        }
    }
    let cost = near2.iter().cloned().fold(0.0f64, f64::max).sqrt();
    Ok(BaselineResult { centers, cost })
}

/// Number of k-subsets of n, capped: `None` once the count passes `cap`.
fn subset_count(n: u64, k: u64, cap: u64) -> Option<u64> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut c: u128 = 1;
    for i in 1..=k {
        c = c * (n - k + i) as u128 / i as u128;
        if c > cap as u128 {
            return None;
        }
    }
    Some(c as u64)
}

/// True when scanning the k-subsets of n fits a budget of `cap` subsets;
/// how `brute_force_opt` decides to refuse.
pub fn subset_count_within(n: u64, k: u64, cap: u64) -> bool {
    subset_count(n, k, cap).is_some()
}

/// Exact k-center optimum by scanning every k-subset in lexicographic order.
/// Rejects instances where that scan would exceed `BRUTE_BUDGET` subsets.
/// The witness kept is the lexicographically first optimal subset.
pub fn brute_force_opt(points: &PointSet, k: usize) -> Result<BaselineResult, HarnessError> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(HarnessError::InvalidInput(format!(
            "need 1 <= k <= n, got k = {k}, n = {n}"
        )));
    }
    if subset_count(n as u64, k as u64, BRUTE_BUDGET).is_none() {
        return Err(HarnessError::TooLarge {
            n,
            k,
            budget: BRUTE_BUDGET,
        });
    }
    let all: Vec<PointId> = points.ids();
    let mut idx: Vec<usize> = (0..k).collect();
    let mut best_cost = f64::INFINITY;
    let mut best: Vec<PointId> = Vec::new();
    loop {
        let subset: Vec<PointId> = idx.iter().map(|&i| all[i]).collect();
        let cost = points.cost(&subset)?;
        if cost < best_cost {
            best_cost = cost;
            best = subset;
        }
        // advance the odometer: rightmost index that can still move
        let mut pos = k;
        while pos > 0 {
            pos -= 1;
            if idx[pos] != n - k + pos {
                idx[pos] += 1;
                for j in (pos + 1)..k {
                    idx[j] = idx[j - 1] + 1;
                }
                break;
            }
            if pos == 0 {
                return Ok(BaselineResult {
                    centers: best,
                    cost: best_cost,
                });
            }
        }
    }
}
