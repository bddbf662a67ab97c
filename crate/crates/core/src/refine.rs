//! The center-refinement pipeline.
//!
//! `uniform_center` shrinks a working set by running `sample_and_solve`
//! repeatedly at one radius, square-rooting the expected survivor count each
//! time; after tau = ceil(log2 log2 t) iterations the set is small enough
//! for later stages to afford. `ext_k_center` chains alpha such stages at
//! radii scaled down by iterated logs, then finishes with beta plain
//! sampling rounds at the full radius. Every stage returns a subset of its
//! input and adds a fixed amount to a running cost bound, so the pipeline
//! carries a deterministic certificate that the final cover is within
//! `4 * c_rho * (sum of stage radii * iteration counts + beta * r)` of the
//! input set.
//!
//! Two wrappers turn the radius-parameterized pipeline into a k-center
//! algorithm: `ext_k_center_repeat` runs independent seeded instances and
//! keeps the smallest output, and `ext_k_center_search` walks a geometric
//! radius ladder downward until the center count stops fitting the budget
//! for k.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::Serialize;

use crate::clustering::{sample_and_solve, CenterSet, ClusterError, PipelineEnv, SasStats};
use crate::geometry::{PointId, DIST_TOL};
use crate::mpc::{UsageMeter, UsageReport};
use crate::seeds::mix_seed;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RefineError {
    #[error("{stage}: {source}")]
    Stage { stage: String, source: ClusterError },
    #[error("invalid arguments: {0}")]
    InvalidInput(String),
    #[error("cost certificate violated at {stage}: measured {measured} > bound {bound}")]
    Certificate {
        stage: String,
        measured: f64,
        bound: f64,
    },
    #[error("all {attempts} pipeline repetitions failed; last failure: {last}")]
    AllRepetitionsFailed { attempts: u32, last: String },
    #[error("no feasible radius: {size} centers at the diameter guess, budget {threshold}")]
    NoFeasibleRadius { size: usize, threshold: usize },
}

/// j-fold base-2 logarithm, with every application clamped below at 2 so
/// the schedules that divide by it stay positive. `iter_log(n, 0) = n`.
pub fn iter_log(n: f64, j: u32) -> f64 {
    let mut x = n;
    for _ in 0..j {
        x = x.log2().max(2.0);
    }
    x
}

/// Smallest j such that applying log2 j times to `n` gives a value <= 2.
pub fn log_star(n: f64) -> u32 {
    let mut x = n;
    let mut j = 0;
    while x > 2.0 {
        x = x.log2();
        j += 1;
    }
    j
}

/// Iterations one uniform stage runs: `max(1, ceil(c_tau * log2 log2 t))`,
/// unclamped inner logs (t >= 2 keeps them finite).
pub fn tau_iterations(t: usize, c_tau: f64) -> u32 {
    debug_assert!(t >= 2);
    let raw = c_tau * (t as f64).log2().log2();
    (raw.ceil().max(1.0)) as u32
}

/// The named scale factors of the schedules. Everything here only stretches
/// or shrinks iteration counts and ladder steps; the cost certificates are
/// computed from whatever values result.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefineConstants {
    /// Uniform-stage iteration scale (tau).
    pub c_tau: f64,
    /// First-iteration sampling rate scale (p_0).
    pub c_p: f64,
    /// Coarse size-ladder scale (t_j).
    pub c_t: f64,
    /// Final-phase iteration scale (beta).
    pub c_beta: f64,
    /// Slack subtracted from log* n when clamping the stage count alpha.
    pub c_0: u32,
}

impl Default for RefineConstants {
    fn default() -> Self {
        RefineConstants {
            c_tau: 1.0,
            c_p: 2.0,
            c_t: 1.0,
            c_beta: 2.0,
            c_0: 3,
        }
    }
}

/// One uniform stage's plan: how many sampling rounds run and at what rate.
/// `s` halves in the exponent each step (s_0 = t, s_{i+1} = sqrt(s_i)); the
/// sampling rate is tied to the instance for the first round and to `1/s_i`
/// afterwards.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UniformSchedule {
    pub t: usize,
    pub tau: u32,
    pub s: Vec<f64>,
    pub p: Vec<f64>,
}

impl UniformSchedule {
    /// `t` sizes the iteration count and survivor chain; `n` and `delta` are
    /// the instance parameters the first sampling rate comes from.
    pub fn new(t: usize, n: usize, delta: f64, c: &RefineConstants) -> Result<Self, RefineError> {
        if t < 2 {
            return Err(RefineError::InvalidInput(format!(
                "size parameter must be at least 2, got {t}"
            )));
        }
        if n < 2 {
            return Err(RefineError::InvalidInput(format!(
                "instance size must be at least 2, got {n}"
            )));
        }
        let tau = tau_iterations(t, c.c_tau);
        let nf = n as f64;
        let p0 = (c.c_p * nf.log2() / nf.powf(delta)).min(1.0);
        if !(p0 > 0.0) {
            return Err(RefineError::InvalidInput(format!(
                "initial sampling rate degenerated to {p0}"
            )));
        }
        let mut s = Vec::with_capacity(tau as usize);
        let mut p = Vec::with_capacity(tau as usize);
        let mut cur = t as f64;
        for i in 0..tau {
            s.push(cur);
            p.push(if i == 0 { p0 } else { (1.0 / cur).min(1.0) });
            cur = cur.sqrt();
        }
        debug_assert!(p.iter().all(|&x| x > 0.0 && x <= 1.0));
        Ok(UniformSchedule { t, tau, s, p })
    }
}

/// When the pipeline measures its cover against the original input. The
/// certificate arithmetic is always tracked; this only controls how often
/// the (quadratic-cost) distance measurement backing the assertion runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CostCheck {
    /// Measure and assert after every stage.
    PerStage,
    /// Measure and assert once, on the final output.
    Final,
    /// Track bounds only; no measurements.
    Off,
}

#[derive(Debug, Clone, Serialize)]
pub struct IterationNote {
    pub input: usize,
    pub output: usize,
    pub p: f64,
    pub stats: SasStats,
}

#[derive(Debug, Clone)]
pub struct UniformOutcome {
    pub centers: CenterSet,
    pub schedule: UniformSchedule,
    pub iterations: Vec<IterationNote>,
    pub usage: UsageReport,
}

fn subset_check(sub: &[PointId], sup: &[PointId], stage: &str) {
    let set: HashSet<PointId> = sup.iter().copied().collect();
    for &x in sub {
        assert!(set.contains(&x), "{stage}: output point {x} is not in the stage input");
    }
}

fn measure_cost(env: &PipelineEnv, base: &[PointId], centers: &[PointId]) -> f64 {
    env.points
        .cost_of(base, centers)
        .expect("center set is nonempty on the success path")
}

/// Runs tau sampling rounds over `v_ids` at radius `r`, each keeping the
/// centers of the previous round. Output covers the input within
/// `4 * c_rho * r * tau`, deterministically whenever no round fails; the
/// sampling rates follow the survivor chain of `t`.
pub fn uniform_center(
    env: &PipelineEnv,
    v_ids: &[PointId],
    r: f64,
    t: usize,
    c: &RefineConstants,
    cost_check: CostCheck,
    seed: u64,
) -> Result<UniformOutcome, RefineError> {
    if v_ids.is_empty() {
        return Err(RefineError::InvalidInput("empty working set".into()));
    }
    if !(r > 0.0) {
        return Err(RefineError::InvalidInput(format!("radius must be positive, got {r}")));
    }
    let schedule = UniformSchedule::new(t, env.mpc.n.max(env.points.len()), env.mpc.delta, c)?;
    let resident = env.points.len() * (env.points.dim() + 1);
    let mut meter = UsageMeter::new();
    let mut iterations = Vec::with_capacity(schedule.tau as usize);
    let mut cur: Vec<PointId> = v_ids.to_vec();
    let bound_per_round = 4.0 * env.params.c_rho * r;
    for i in 0..schedule.tau {
        let out = sample_and_solve(env, &cur, schedule.p[i as usize], r, mix_seed(&[seed, 0x755e, i as u64]))
            .map_err(|source| RefineError::Stage {
                stage: format!("iteration-{i}"),
                source,
            })?;
        subset_check(&out.centers.centers, &cur, &format!("iteration-{i}"));
        meter.charge_parallel(std::slice::from_ref(&out.usage), resident);
        iterations.push(IterationNote {
            input: cur.len(),
            output: out.centers.len(),
            p: schedule.p[i as usize],
            stats: out.stats,
        });
        cur = out.centers.centers;
        if cost_check == CostCheck::PerStage {
            let bound = bound_per_round * (i as f64 + 1.0);
            let measured = measure_cost(env, v_ids, &cur);
            if measured > bound + DIST_TOL {
                return Err(RefineError::Certificate {
                    stage: format!("iteration-{i}"),
                    measured,
                    bound,
                });
            }
        }
    }
    if cost_check == CostCheck::Final {
        let bound = bound_per_round * schedule.tau as f64;
        let measured = measure_cost(env, v_ids, &cur);
        if measured > bound + DIST_TOL {
            return Err(RefineError::Certificate {
                stage: format!("iteration-{}", schedule.tau - 1),
                measured,
                bound,
            });
        }
    }
    Ok(UniformOutcome {
        centers: CenterSet { centers: cur, source_radius: r },
        schedule,
        iterations,
        usage: meter.report(),
    })
}

/// Stage count actually run: the requested value clamped to
/// `[1, max(1, log_star(n) - c_0)]`.
pub fn clamp_alpha(n: usize, requested: u32, c_0: u32) -> u32 {
    let hi = log_star(n as f64).saturating_sub(c_0).max(1);
    requested.clamp(1, hi)
}

/// The two-phase plan: a size ladder `t_j` that collapses doubly fast, the
/// radii `r_j = r / loglog(t_j)` the coarse stages run at, the per-stage
/// iteration counts, and the final-phase length beta.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtSchedule {
    pub requested_alpha: u32,
    pub alpha: u32,
    /// t_0 = n, then `min(previous, ceil(c_t * log t * (loglog t)^(d+2)))`;
    /// the min keeps the ladder monotone where the raw formula would grow.
    pub t: Vec<usize>,
    /// r_j = r / iter_log(t_j, 2), one per ladder entry.
    pub r: Vec<f64>,
    /// Uniform iteration counts for stages 0..alpha-1.
    pub tau: Vec<u32>,
    pub beta: u32,
    pub base_r: f64,
}

impl ExtSchedule {
    pub fn new(
        n: usize,
        dim: usize,
        requested_alpha: u32,
        r: f64,
        c: &RefineConstants,
    ) -> Result<Self, RefineError> {
        if n < 2 {
            return Err(RefineError::InvalidInput(format!(
                "instance size must be at least 2, got {n}"
            )));
        }
        if !(r > 0.0) {
            return Err(RefineError::InvalidInput(format!("radius must be positive, got {r}")));
        }
        let alpha = clamp_alpha(n, requested_alpha, c.c_0);
        let mut t = vec![n];
        for j in 1..=alpha as usize {
            let prev = t[j - 1] as f64;
            let raw = (c.c_t * iter_log(prev, 1) * iter_log(prev, 2).powi(dim as i32 + 2)).ceil();
            t.push((raw as usize).min(t[j - 1]));
        }
        let r_ladder: Vec<f64> = t.iter().map(|&tj| r / iter_log(tj as f64, 2)).collect();
        let tau: Vec<u32> = t[..alpha as usize]
            .iter()
            .map(|&tj| tau_iterations(tj, c.c_tau))
            .collect();
        let beta = (c.c_beta * iter_log(n as f64, alpha + 1)).ceil().max(1.0) as u32;
        Ok(ExtSchedule {
            requested_alpha,
            alpha,
            t,
            r: r_ladder,
            tau,
            beta,
            base_r: r,
        })
    }

    /// The certificate's radius budget: `sum_j r_j * tau_j + beta * r`. The
    /// final cover provably lies within `4 * c_rho` times this of the input.
    pub fn radius_budget(&self) -> f64 {
        let coarse: f64 = self
            .tau
            .iter()
            .zip(&self.r)
            .map(|(&tau_j, &r_j)| r_j * tau_j as f64)
            .sum();
        coarse + self.beta as f64 * self.base_r
    }
}

/// One pipeline stage as reported in the trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageRecord {
    pub stage: String,
    pub input: usize,
    pub output: usize,
    pub r_used: f64,
    pub rounds_charged: u64,
    /// Certificate bound accumulated through this stage.
    pub measured_cost_bound: f64,
    /// Actual cover cost against the pipeline input, when measured.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub measured_cost: Option<f64>,
}

/// Serializes a stage trace as JSON lines, one stage per line.
pub fn trace_to_jsonl(trace: &[StageRecord]) -> String {
    let mut out = String::new();
    for rec in trace {
        out.push_str(&serde_json::to_string(rec).expect("stage records serialize"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct ExtOutcome {
    pub centers: CenterSet,
    pub schedule: ExtSchedule,
    pub trace: Vec<StageRecord>,
    /// Post-stage working sets, aligned with `trace`; feeds the planted
    /// per-cluster statistics.
    pub stage_outputs: Vec<Vec<PointId>>,
    pub usage: UsageReport,
    /// Final certificate: `4 * c_rho * radius_budget`.
    pub certificate_bound: f64,
}

/// The two-phase pipeline at one radius: alpha uniform stages over the size
/// ladder, then beta sampling rounds at rate 1/2 and radius `r`. Each stage
/// consumes the previous stage's centers, so the outputs are nested, and the
/// running cost bound is checked per `cost_check`.
pub fn ext_k_center(
    env: &PipelineEnv,
    p_ids: &[PointId],
    alpha: u32,
    r: f64,
    c: &RefineConstants,
    cost_check: CostCheck,
    seed: u64,
) -> Result<ExtOutcome, RefineError> {
    if p_ids.len() < 2 {
        return Err(RefineError::InvalidInput(format!(
            "pipeline needs at least 2 points, got {}",
            p_ids.len()
        )));
    }
    let sched = ExtSchedule::new(p_ids.len(), env.points.dim(), alpha, r, c)?;
    let resident = env.points.len() * (env.points.dim() + 1);
    let four_c_rho = 4.0 * env.params.c_rho;
    let mut meter = UsageMeter::new();
    let mut trace: Vec<StageRecord> = Vec::new();
    let mut stage_outputs: Vec<Vec<PointId>> = Vec::new();
    let mut cur: Vec<PointId> = p_ids.to_vec();
    let mut budget = 0.0f64;

    let total_stages = sched.alpha as usize + sched.beta as usize;
    let mut stage_index = 0usize;
    let check_stage = |cur: &[PointId],
                           budget: f64,
                           stage: &str,
                           is_last: bool|
     -> Result<Option<f64>, RefineError> {
        let wanted = match cost_check {
            CostCheck::PerStage => true,
            CostCheck::Final => is_last,
            CostCheck::Off => false,
        };
        if !wanted {
            return Ok(None);
        }
        let bound = four_c_rho * budget;
        let measured = measure_cost(env, p_ids, cur);
        if measured > bound + DIST_TOL {
            return Err(RefineError::Certificate {
                stage: stage.to_string(),
                measured,
                bound,
            });
        }
        Ok(Some(measured))
    };

    for j in 1..=sched.alpha {
        let stage_name = format!("uniform-{j}");
        let uo = uniform_center(
            env,
            &cur,
            sched.r[j as usize - 1],
            sched.t[j as usize - 1],
            c,
            CostCheck::Off,
            mix_seed(&[seed, 0xe45, j as u64]),
        )
        .map_err(|e| reprefix(e, &stage_name))?;
        subset_check(&uo.centers.centers, &cur, &stage_name);
        budget += sched.r[j as usize - 1] * sched.tau[j as usize - 1] as f64;
        stage_index += 1;
        let measured = check_stage(
            &uo.centers.centers,
            budget,
            &stage_name,
            stage_index == total_stages,
        )?;
        trace.push(StageRecord {
            stage: stage_name,
            input: cur.len(),
            output: uo.centers.len(),
            r_used: sched.r[j as usize - 1],
            rounds_charged: uo.usage.rounds,
            measured_cost_bound: four_c_rho * budget,
            measured_cost: measured,
        });
        meter.charge_sequential(&uo.usage);
        cur = uo.centers.centers;
        stage_outputs.push(cur.clone());
    }

    for i in 1..=sched.beta {
        let stage_name = format!("solve-{i}");
        let so = sample_and_solve(env, &cur, 0.5, r, mix_seed(&[seed, 0x5a5, i as u64]))
            .map_err(|source| RefineError::Stage {
                stage: stage_name.clone(),
                source,
            })?;
        subset_check(&so.centers.centers, &cur, &stage_name);
        budget += sched.base_r;
        stage_index += 1;
        let measured = check_stage(
            &so.centers.centers,
            budget,
            &stage_name,
            stage_index == total_stages,
        )?;
        trace.push(StageRecord {
            stage: stage_name,
            input: cur.len(),
            output: so.centers.len(),
            r_used: sched.base_r,
            rounds_charged: so.usage.rounds,
            measured_cost_bound: four_c_rho * budget,
            measured_cost: measured,
        });
        meter.charge_parallel(std::slice::from_ref(&so.usage), resident);
        cur = so.centers.centers;
        stage_outputs.push(cur.clone());
    }

    let certificate_bound = four_c_rho * budget;
    debug_assert!((budget - sched.radius_budget()).abs() < 1e-9 * budget.max(1.0));
    Ok(ExtOutcome {
        centers: CenterSet { centers: cur, source_radius: r },
        schedule: sched,
        trace,
        stage_outputs,
        usage: meter.report(),
        certificate_bound,
    })
}

fn reprefix(e: RefineError, outer: &str) -> RefineError {
    match e {
        RefineError::Stage { stage, source } => RefineError::Stage {
            stage: format!("{outer}/{stage}"),
            source,
        },
        RefineError::Certificate { stage, measured, bound } => RefineError::Certificate {
            stage: format!("{outer}/{stage}"),
            measured,
            bound,
        },
        other => other,
    }
}

/// Largest center count accepted as "fits k": `k * (1 + 1/L) + c_add * L^3`
/// rounded up, where `L = max(2, iter_log(n, alpha))`.
pub fn center_count_threshold(k: usize, n: usize, alpha: u32, c_add: f64) -> usize {
    let l = iter_log(n as f64, alpha).max(2.0);
    (k as f64 * (1.0 + 1.0 / l) + c_add * l.powi(3)).ceil() as usize
}

/// Wrapper knobs: repetition count, optional radius-ladder length override,
/// the threshold's additive scale, and how many repetitions may run at once.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WrapperConfig {
    pub psi: u32,
    /// Ladder length; derived from the diameter when absent.
    pub phi: Option<u32>,
    pub c_add: f64,
    /// Worker threads for the repeated instances; 1 means sequential.
    pub parallelism: usize,
}

impl Default for WrapperConfig {
    fn default() -> Self {
        WrapperConfig {
            psi: 1,
            phi: None,
            c_add: 8.0,
            parallelism: 1,
        }
    }
}

/// Default repetition count for an instance: `ceil(c_psi * log2(max(n, log2 diameter)))`.
pub fn default_psi(n: usize, delta_diameter: f64, c_psi: f64) -> u32 {
    let arg = (n as f64).max(delta_diameter.max(2.0).log2());
    ((c_psi * arg.log2()).ceil().max(1.0)) as u32
}

#[derive(Debug, Clone)]
pub struct RepeatOutcome {
    pub chosen: ExtOutcome,
    pub chosen_index: u32,
    /// Final center count per instance; None marks a failed instance.
    pub instance_sizes: Vec<Option<usize>>,
    pub usage: UsageReport,
}

/// Runs `psi` independently seeded pipeline instances and keeps the smallest
/// surviving output (ties to the lowest instance index). Fails only when
/// every instance fails.
pub fn ext_k_center_repeat(
    env: &PipelineEnv,
    p_ids: &[PointId],
    alpha: u32,
    r: f64,
    c: &RefineConstants,
    cost_check: CostCheck,
    wrapper: &WrapperConfig,
    seed: u64,
) -> Result<RepeatOutcome, RefineError> {
    let psi = wrapper.psi.max(1);
    let run = |i: u32| {
        ext_k_center(env, p_ids, alpha, r, c, cost_check, mix_seed(&[seed, 0x9e99, i as u64]))
    };
    let results: Vec<Result<ExtOutcome, RefineError>> =
        if wrapper.parallelism > 1 && psi > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(wrapper.parallelism)
                .build()
                .map_err(|e| RefineError::InvalidInput(format!("worker pool: {e}")))?;
            pool.install(|| (0..psi).into_par_iter().map(run).collect())
        } else {
            (0..psi).map(run).collect()
        };

    let instance_sizes: Vec<Option<usize>> = results
        .iter()
        .map(|r| r.as_ref().ok().map(|o| o.centers.len()))
        .collect();
    let mut best: Option<(usize, u32)> = None;
    for (i, size) in instance_sizes.iter().enumerate() {
        if let Some(s) = size {
            if best.map_or(true, |(bs, _)| *s < bs) {
                best = Some((*s, i as u32));
            }
        }
    }
    let Some((_, idx)) = best else {
        let last = results
            .iter()
            .rev()
            .find_map(|r| r.as_ref().err().map(|e| e.to_string()))
            .unwrap_or_else(|| "no instances ran".into());
        return Err(RefineError::AllRepetitionsFailed { attempts: psi, last });
    };
    let group: Vec<UsageReport> = results
        .iter()
        .filter_map(|r| r.as_ref().ok().map(|o| o.usage.clone()))
        .collect();
    let mut meter = UsageMeter::new();
    // each instance's usage already counts its own resident copy of the input
    meter.charge_parallel(&group, 0);
    let chosen = results
        .into_iter()
        .nth(idx as usize)
        .expect("index from enumerate")
        .expect("chosen index is a success");
    Ok(RepeatOutcome {
        chosen,
        chosen_index: idx,
        instance_sizes,
        usage: meter.report(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RungStatus {
    Feasible,
    Infeasible,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RungReport {
    pub r: f64,
    pub status: RungStatus,
    pub centers: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub chosen: RepeatOutcome,
    pub chosen_r: f64,
    pub threshold: usize,
    pub rungs: Vec<RungReport>,
    pub usage: UsageReport,
}

/// Walks the radius ladder `diameter, diameter/2, ...` downward, running the
/// repeated pipeline at each step, and returns the last rung whose center
/// count fits the budget for `k` before the first that does not (an
/// all-repetitions failure ends the scan the same way). Rungs after the
/// stopping point are reported as skipped.
pub fn ext_k_center_search(
    env: &PipelineEnv,
    p_ids: &[PointId],
    alpha: u32,
    k: usize,
    c: &RefineConstants,
    cost_check: CostCheck,
    wrapper: &WrapperConfig,
    seed: u64,
) -> Result<SearchOutcome, RefineError> {
    if k == 0 {
        return Err(RefineError::InvalidInput("k must be at least 1".into()));
    }
    let n = p_ids.len();
    let alpha_used = clamp_alpha(n, alpha, c.c_0);
    let threshold = center_count_threshold(k, n, alpha_used, wrapper.c_add);
    let diameter = env.points.delta_diameter;
    let phi = wrapper
        .phi
        .unwrap_or_else(|| (diameter.log2().ceil() as u32).saturating_add(1))
        .max(1);

    let mut rungs: Vec<RungReport> = Vec::with_capacity(phi as usize);
    let mut candidate: Option<(RepeatOutcome, f64)> = None;
    let mut first_failure: Option<(usize, Option<RefineError>)> = None;
    let mut meter = UsageMeter::new();
    let mut stopped = false;
    for i in 0..phi {
        let r_i = diameter / 2f64.powi(i as i32);
        if stopped {
            rungs.push(RungReport { r: r_i, status: RungStatus::Skipped, centers: None });
            continue;
        }
        match ext_k_center_repeat(env, p_ids, alpha, r_i, c, cost_check, wrapper, mix_seed(&[seed, 0xead, i as u64])) {
            Ok(rep) => {
                let size = rep.chosen.centers.len();
                meter.charge_sequential(&rep.usage);
                if size <= threshold {
                    rungs.push(RungReport {
                        r: r_i,
                        status: RungStatus::Feasible,
                        centers: Some(size),
                    });
                    candidate = Some((rep, r_i));
                } else {
                    rungs.push(RungReport {
                        r: r_i,
                        status: RungStatus::Infeasible,
                        centers: Some(size),
                    });
                    if first_failure.is_none() {
                        first_failure = Some((size, None));
                    }
                    stopped = true;
                }
            }
            Err(e) => {
                rungs.push(RungReport { r: r_i, status: RungStatus::Failed, centers: None });
                if first_failure.is_none() {
                    first_failure = Some((0, Some(e)));
                }
                stopped = true;
            }
        }
    }

    match candidate {
        Some((rep, chosen_r)) => Ok(SearchOutcome {
            chosen: rep,
            chosen_r,
            threshold,
            rungs,
            usage: meter.report(),
        }),
        None => match first_failure {
            Some((_, Some(e))) => Err(e),
            Some((size, None)) => Err(RefineError::NoFeasibleRadius { size, threshold }),
            None => Err(RefineError::InvalidInput("empty radius ladder".into())),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Point, PointSet};
    use crate::lsh::{LshExecution, LshParams};
    use crate::mpc::MpcConfig;
    use rand::Rng as _;
    use rand::SeedableRng as _;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn iter_log_examples() {
        assert_eq!(iter_log(12345.0, 0), 12345.0);
        assert_eq!(iter_log(65536.0, 2), 4.0);
        assert_eq!(iter_log(10.0, 5), 2.0);
        assert_eq!(iter_log(4.0, 2), 2.0);
    }

    #[test]
    fn log_star_unwinds_towers() {
        assert_eq!(log_star(2.0), 0);
        assert_eq!(log_star(4.0), 1);
        assert_eq!(log_star(16.0), 2);
        assert_eq!(log_star(65536.0), 3);
        assert_eq!(log_star((2f64).powi(64)), 4);
    }

    #[test]
    fn tau_examples() {
        assert_eq!(tau_iterations(2, 1.0), 1);
        assert_eq!(tau_iterations(4, 1.0), 1);
        assert_eq!(tau_iterations(65536, 1.0), 4);
        assert_eq!(tau_iterations(4096, 1.0), 4);
    }

    #[test]
    fn uniform_schedule_chains_square_roots() {
        let c = RefineConstants::default();
        let s = UniformSchedule::new(65536, 65536, 0.5, &c).unwrap();
        assert_eq!(s.tau, 4);
        assert_eq!(s.s[0], 65536.0);
        assert_eq!(s.s[1], 256.0);
        assert_eq!(s.s[2], 16.0);
        assert_eq!(s.s[3], 4.0);
        assert_eq!(s.p[1], 1.0 / 256.0);
        // p_0 = min(1, 2 * 16 / 256)
        assert_eq!(s.p[0], 0.125);
        assert!(s.s.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn ext_schedule_frozen_values() {
        let c = RefineConstants { c_0: 0, ..RefineConstants::default() };
        let s = ExtSchedule::new(65536, 2, 2, 8.0, &c).unwrap();
        assert_eq!(s.alpha, 2);
        // t_1 = ceil(16 * 4^4) = 4096
        assert_eq!(s.t, vec![65536, 4096, 1983]);
        assert_eq!(s.r[0], 2.0); // 8 / loglog 65536
        assert_eq!(s.tau, vec![4, 4]);
        assert_eq!(s.beta, 4); // ceil(2 * iter_log(65536, 3)) = ceil(2*2)
        for (r_j, t_j) in s.r.iter().zip(&s.t) {
            let back = r_j * iter_log(*t_j as f64, 2);
            assert!((back - 8.0).abs() < 1e-9);
        }
    }

    #[test]
    fn ext_schedule_ladder_never_grows() {
        let c = RefineConstants { c_0: 0, ..RefineConstants::default() };
        // raw formula would exceed 64 at this size; the min clamps it
        let s = ExtSchedule::new(64, 2, 2, 1.0, &c).unwrap();
        assert!(s.t.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(s.t[1], 64);
    }

    #[test]
    fn alpha_clamp_tracks_log_star() {
        assert_eq!(clamp_alpha(20_000, 5, 3), 1); // log*(20000) = 3
        assert_eq!(clamp_alpha(20_000, 2, 1), 2);
        assert_eq!(clamp_alpha(16, 1, 3), 1);
        assert_eq!(clamp_alpha(1 << 20, 9, 0), 4);
    }

    #[test]
    fn threshold_frozen_values() {
        // clamp regime: ceil(1.5 k) + 64
        assert_eq!(center_count_threshold(100, 4, 2, 8.0), 214);
        assert_eq!(center_count_threshold(101, 4, 2, 8.0), 216);
        // iter_log(65536, 1) = 16
        assert_eq!(center_count_threshold(10_000, 65536, 1, 8.0), 43_393);
        let mut prev = 0;
        for k in [1, 2, 10, 100, 1000, 10_000] {
            let cur = center_count_threshold(k, 1 << 16, 1, 8.0);
            assert!(cur >= prev, "threshold must not shrink as k grows");
            prev = cur;
        }
    }

    fn env_fixture(
        n: usize,
        side: f64,
        seed: u64,
        c_s: f64,
    ) -> (PointSet, LshParams, MpcConfig) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ps = loop {
            let pts: Vec<Point> = (0..n)
                .map(|id| Point {
                    id: id as u32,
                    coords: (0..2).map(|_| rng.gen_range(0.0..side)).collect(),
                })
                .collect();
            if let Ok(ps) = PointSet::normalize(pts) {
                break ps;
            }
        };
        let params = LshParams::calibrate(n, 0.5, 4.0, seed).unwrap();
        let mpc = MpcConfig::sized(n, 0.5, 0.5, c_s, n * 3, seed).unwrap();
        (ps, params, mpc)
    }

    #[test]
    fn uniform_cover_stays_inside_its_bound() {
        let (ps, params, mpc) = env_fixture(300, 60.0, 17, 4.0);
        let env =
            PipelineEnv { points: &ps, params: &params, mpc: &mpc, exec: LshExecution::InProcess };
        let ids = ps.ids();
        let c = RefineConstants::default();
        let out = uniform_center(&env, &ids, 1.0, 300, &c, CostCheck::PerStage, 5).unwrap();
        assert_eq!(out.iterations.len(), out.schedule.tau as usize);
        let bound = 4.0 * params.c_rho * 1.0 * out.schedule.tau as f64;
        let measured = ps.cost_of(&ids, &out.centers.centers).unwrap();
        assert!(measured <= bound + DIST_TOL);
        // every iteration shrinks or keeps the working set
        for w in out.iterations.windows(2) {
            assert!(w[1].input == w[0].output);
        }
    }

    #[test]
    fn uniform_degenerate_size_is_one_greedy_call() {
        let (ps, params, mpc) = env_fixture(30, 15.0, 19, 40.0);
        assert!(30 * 3 <= mpc.local_space_words);
        let env =
            PipelineEnv { points: &ps, params: &params, mpc: &mpc, exec: LshExecution::InProcess };
        let ids = ps.ids();
        let c = RefineConstants::default();
        // t = 4 forces tau = 1; the set fits one machine, so the single
        // iteration is exactly one greedy call from the lowest id
        let out = uniform_center(&env, &ids, 0.7, 4, &c, CostCheck::Final, 3).unwrap();
        assert_eq!(out.schedule.tau, 1);
        let direct = crate::clustering::greedy(&ps, &ids, 0, 0.7, params.c_rho).unwrap();
        assert_eq!(out.centers, direct);
    }

    #[test]
    fn ext_outputs_nest_and_certificate_holds() {
        let (ps, params, mpc) = env_fixture(400, 90.0, 23, 4.0);
        let env =
            PipelineEnv { points: &ps, params: &params, mpc: &mpc, exec: LshExecution::InProcess };
        let ids = ps.ids();
        let c = RefineConstants { c_0: 1, ..RefineConstants::default() };
        let out = ext_k_center(&env, &ids, 2, 2.0, &c, CostCheck::PerStage, 9).unwrap();
        assert_eq!(
            out.trace.len(),
            out.schedule.alpha as usize + out.schedule.beta as usize
        );
        // nesting: every stage output is a subset of the previous one
        let mut prev: HashSet<u32> = ids.iter().copied().collect();
        for stage in &out.stage_outputs {
            let cur: HashSet<u32> = stage.iter().copied().collect();
            assert!(cur.is_subset(&prev));
            prev = cur;
        }
        let measured = ps.cost_of(&ids, &out.centers.centers).unwrap();
        assert!(measured <= out.certificate_bound + DIST_TOL);
        // bound composition matches the schedule arithmetic
        let expect = 4.0 * params.c_rho * out.schedule.radius_budget();
        assert!((out.certificate_bound - expect).abs() < 1e-9 * expect);
        assert_eq!(out.usage.rounds, out.trace.iter().map(|s| s.rounds_charged).sum::<u64>());
    }

    #[test]
    fn ext_is_deterministic_per_seed() {
        let (ps, params, mpc) = env_fixture(250, 50.0, 29, 4.0);
        let env =
            PipelineEnv { points: &ps, params: &params, mpc: &mpc, exec: LshExecution::InProcess };
        let ids = ps.ids();
        let c = RefineConstants::default();
        let a = ext_k_center(&env, &ids, 1, 1.5, &c, CostCheck::Final, 41).unwrap();
        let b = ext_k_center(&env, &ids, 1, 1.5, &c, CostCheck::Final, 41).unwrap();
        assert_eq!(a.centers, b.centers);
        assert_eq!(trace_to_jsonl(&a.trace), trace_to_jsonl(&b.trace));
        let d = ext_k_center(&env, &ids, 1, 1.5, &c, CostCheck::Final, 42).unwrap();
        // different seed is allowed to pick different centers; usage schedule
        // structure stays put
        assert_eq!(a.trace.len(), d.trace.len());
    }

    #[test]
    fn repeat_keeps_the_smallest_survivor() {
        let (ps, params, mpc) = env_fixture(220, 45.0, 31, 4.0);
        let env =
            PipelineEnv { points: &ps, params: &params, mpc: &mpc, exec: LshExecution::InProcess };
        let ids = ps.ids();
        let c = RefineConstants::default();
        let wrapper = WrapperConfig { psi: 4, ..WrapperConfig::default() };
        let rep =
            ext_k_center_repeat(&env, &ids, 1, 1.2, &c, CostCheck::Off, &wrapper, 7).unwrap();
        assert_eq!(rep.instance_sizes.len(), 4);
        let sizes: Vec<usize> = rep.instance_sizes.iter().map(|s| s.unwrap()).collect();
        let min = *sizes.iter().min().unwrap();
        assert_eq!(rep.chosen.centers.len(), min);
        assert_eq!(rep.chosen_index as usize, sizes.iter().position(|&s| s == min).unwrap());
        // psi = 1 reduces to a single pipeline run
        let single = WrapperConfig::default();
        let one = ext_k_center_repeat(&env, &ids, 1, 1.2, &c, CostCheck::Off, &single, 7).unwrap();
        let direct =
            ext_k_center(&env, &ids, 1, 1.2, &c, CostCheck::Off, mix_seed(&[7, 0x9e99, 0]))
                .unwrap();
        assert_eq!(one.chosen.centers, direct.centers);
    }

    #[test]
    fn parallel_and_sequential_repeats_agree() {
        let (ps, params, mpc) = env_fixture(200, 40.0, 37, 4.0);
        let env =
            PipelineEnv { points: &ps, params: &params, mpc: &mpc, exec: LshExecution::InProcess };
        let ids = ps.ids();
        let c = RefineConstants::default();
        let seq = WrapperConfig { psi: 3, parallelism: 1, ..WrapperConfig::default() };
        let par = WrapperConfig { psi: 3, parallelism: 3, ..WrapperConfig::default() };
        let a = ext_k_center_repeat(&env, &ids, 1, 1.0, &c, CostCheck::Off, &seq, 13).unwrap();
        let b = ext_k_center_repeat(&env, &ids, 1, 1.0, &c, CostCheck::Off, &par, 13).unwrap();
        assert_eq!(a.chosen_index, b.chosen_index);
        assert_eq!(a.chosen.centers, b.chosen.centers);
        assert_eq!(a.instance_sizes, b.instance_sizes);
        assert_eq!(trace_to_jsonl(&a.chosen.trace), trace_to_jsonl(&b.chosen.trace));
    }

    #[test]
    fn search_returns_last_feasible_before_infeasible() {
        let (ps, params, mpc) = env_fixture(260, 55.0, 43, 4.0);
        let env =
            PipelineEnv { points: &ps, params: &params, mpc: &mpc, exec: LshExecution::InProcess };
        let ids = ps.ids();
        let c = RefineConstants::default();
        // tiny additive slack makes small-k budgets actually bite
        let wrapper = WrapperConfig { c_add: 0.0, ..WrapperConfig::default() };
        let out = ext_k_center_search(&env, &ids, 1, 1, &c, CostCheck::Off, &wrapper, 3).unwrap();
        assert!(out.chosen.chosen.centers.len() <= out.threshold);
        let feasible: Vec<&RungReport> =
            out.rungs.iter().filter(|r| r.status == RungStatus::Feasible).collect();
        assert!(!feasible.is_empty());
        assert_eq!(out.chosen_r, feasible.last().unwrap().r);
        // flags are a prefix of feasible/infeasible evaluations, then skips
        let mut seen_stop = false;
        for r in &out.rungs {
            match r.status {
                RungStatus::Skipped => assert!(seen_stop),
                RungStatus::Infeasible | RungStatus::Failed => seen_stop = true,
                RungStatus::Feasible => assert!(!seen_stop),
            }
        }
        // the ladder halves from the diameter
        assert_eq!(out.rungs[0].r, ps.delta_diameter);
        if out.rungs.len() > 1 {
            assert_eq!(out.rungs[1].r, ps.delta_diameter / 2.0);
        }
    }

    #[test]
    fn trace_serializes_one_stage_per_line() {
        let rec = StageRecord {
            stage: "uniform-1".into(),
            input: 100,
            output: 20,
            r_used: 0.5,
            rounds_charged: 13,
            measured_cost_bound: 8.0,
            measured_cost: None,
        };
        let text = trace_to_jsonl(&[rec.clone(), rec]);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let v: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        for key in ["stage", "input", "output", "r_used", "rounds_charged", "measured_cost_bound"] {
            assert!(v.get(key).is_some(), "missing key {key}");
        }
        assert!(v.get("measured_cost").is_none());
    }

    #[test]
    fn default_psi_scales_with_instance_size() {
        assert_eq!(default_psi(2, 2.0, 1.0), 1);
        assert_eq!(default_psi(1 << 15, 100.0, 1.0), 15);
        assert!(default_psi(20_000, 1e6, 1.0) >= 14);
    }
}
