//! Nearest-hub search: every query point gets a hub within a small constant
//! factor of its true nearest-hub distance.
//!
//! The procedure ladders radius guesses r = 2^0, 2^1, … up to the diameter.
//! At each guess it hashes hubs and still-unassigned queries under L
//! functions tuned for that radius; a query that lands in a bucket holding a
//! hub within c_rho * r of it takes that hub and drops out. The whole ladder
//! repeats up to I times with fresh hash draws for the stragglers. An
//! assignment made at the smallest successful guess satisfies
//! d(q, hub) <= c_rho * r <= 2 * c_rho * d(q, H).
//!
//! Two execution modes share one set of slice semantics. `Fabric` pushes
//! every active (trial, guess) slice through a simulated machine grid:
//! tuples (bucket, kind, id) are sorted, buckets hand their first hubs to
//! their queries via a segmented scan, and a local round picks each query's
//! hub. `InProcess` replays exactly the same decisions with hash maps, for
//! inputs where materializing the grid is not worth it. Both modes charge
//! the identical model cost: the grid runs all slices at once on disjoint
//! machine groups, so a search costs one fixed round schedule and its global
//! space is the full grid's tuple volume, independent of how the host
//! happened to execute it.

use std::collections::HashMap;

use crate::geometry::{dist2_slice, PointId, PointSet};
use crate::lsh::{guess_ladder, LshError, LshFamily, LshParams};
use crate::mpc::{MachineOutput, MpcCluster, MpcConfig, PrimitiveCounts, Record, UsageReport};
use crate::seeds::mix_seed;

/// How the slice semantics are executed. Results are bit-identical across
/// modes; only host-side mechanics differ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum LshExecution {
    /// Every active slice runs through a simulated machine grid with the
    /// space/comm constraints enforced per round.
    Fabric,
    /// Slices run with host hash maps mirroring the grid's decisions.
    InProcess,
}

impl LshExecution {
    /// Grid execution is worth it up to a few thousand points; beyond that
    /// the replicated tuple volume dominates the host's time for no extra
    /// information, since the charged costs are mode-independent anyway.
    pub fn auto(n: usize) -> Self {
        if n <= 2048 {
            LshExecution::Fabric
        } else {
            LshExecution::InProcess
        }
    }
}

/// One query's result.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Assigned {
    pub hub: PointId,
    /// Euclidean distance to the hub (satisfies dist <= c_rho * r_guess).
    pub dist: f64,
    /// The radius guess the assignment was made at.
    pub r_guess: f64,
    /// Which trial made the assignment (0-based).
    pub outer_i: u32,
}

/// Output of a successful search: `queries` and `close` are parallel.
#[derive(Debug, Clone, PartialEq)]
pub struct HubAssignment {
    pub queries: Vec<PointId>,
    pub close: Vec<Assigned>,
    /// False on the success path; a failed search surfaces as an error
    /// instead, so holders of this struct can rely on full coverage.
    pub failed: bool,
}

impl HubAssignment {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (PointId, &Assigned)> + '_ {
        self.queries.iter().copied().zip(self.close.iter())
    }
}

/// Instrumentation for one search.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize)]
pub struct SearchStats {
    /// (trial, guess) slices that actually ran (pruning skips the rest).
    pub slices_run: u64,
    /// Buckets that held more hubs than the retention cap, over all slices.
    pub buckets_truncated: u64,
    /// Largest hub pile any bucket saw.
    pub max_bucket_hubs: u64,
    /// Query-to-candidate distance evaluations. Execution-dependent: the
    /// grid evaluates all L buckets of a query at once while the host scans
    /// them lazily, so this is reported but not comparable across modes.
    pub pairs_checked: u64,
    /// Highest per-machine load any fabric slice measured (0 if no slice
    /// ran on the fabric).
    pub fabric_peak_local_words: usize,
}

/// Search output: the assignment plus charged model usage and stats.
#[derive(Debug, Clone)]
pub struct NhsOutcome {
    pub assignment: HubAssignment,
    pub stats: SearchStats,
    pub usage: UsageReport,
}

/// The model's fixed round schedule for one search: the full (trial, guess)
/// grid runs in parallel, so the cost is one pass of
/// replicate-sort, seed broadcast, hash round, grid sort, hub-delivery scan,
/// match round, merge sort, rank scan: 3 sorts, 2 scans, 1 broadcast, 2
/// plain rounds.
pub fn nhs_schedule(primitive_round_cost: u32) -> (u64, PrimitiveCounts) {
    let c = primitive_round_cost as u64;
    (
        6 * c + 2,
        PrimitiveCounts {
            sort: 3,
            prefix_sum: 2,
            broadcast: 1,
        },
    )
}

/// Per-machine fill for grid tuples: query tuples gain up to
/// `max_hubs_per_bucket` candidate words in the delivery scan, so the sort
/// fills machines only to the pre-growth fraction of their space.
fn slice_fill(space: usize, dim: usize, cap_hubs: usize) -> (usize, usize) {
    let pre = dim + 3;
    let post = dim + 3 + cap_hubs;
    let cap = space * pre / post;
    (cap, space - cap)
}

/// Grid tuple. `words` follows the record model: a point tuple is its
/// coordinates plus bucket, kind, and id; delivered candidate ids count one
/// word each; a match result is (id, distance, hub).
#[derive(Debug, Clone)]
enum Tup {
    Hub {
        ell: u16,
        bucket: u64,
        pid: u32,
        dim: u8,
    },
    Query {
        ell: u16,
        bucket: u64,
        pid: u32,
        dim: u8,
        cands: [u32; CAP],
        cand_len: u8,
    },
    Hit {
        ell: u16,
        pid: u32,
        d2_bits: u64,
        hub: u32,
        lead: bool,
    },
}

const CAP: usize = 10;

impl Record for Tup {
    fn words(&self) -> usize {
        match self {
            Tup::Hub { dim, .. } => *dim as usize + 3,
            Tup::Query { dim, cand_len, .. } => *dim as usize + 3 + *cand_len as usize,
            Tup::Hit { .. } => 3,
        }
    }
}

/// Segmented-scan state over the grid sort order: enough of a contiguous
/// range's structure to merge associatively, with the tail run's retained
/// hubs and total hub count.
#[derive(Clone)]
struct BucketRun {
    first: u64,
    last: u64,
    single: bool,
    tail_hubs: [u32; CAP],
    tail_len: u8,
    tail_seen: u32,
}

impl BucketRun {
    fn leaf(bucket: u64, hub: Option<u32>) -> Self {
        let mut tail_hubs = [0u32; CAP];
        let (tail_len, tail_seen) = match hub {
            Some(h) => {
                tail_hubs[0] = h;
                (1, 1)
            }
            None => (0, 0),
        };
        BucketRun {
            first: bucket,
            last: bucket,
            single: true,
            tail_hubs,
            tail_len,
            tail_seen,
        }
    }

    fn combine(a: &Self, b: &Self) -> Self {
        let mut out = b.clone();
        out.first = a.first;
        out.single = a.single && b.single && a.last == b.first;
        if b.single && b.first == a.last {
            // b extends a's tail run: prepend a's retained hubs
            let mut hubs = a.tail_hubs;
            let mut len = a.tail_len as usize;
            for i in 0..b.tail_len as usize {
                if len == CAP {
                    break;
                }
                hubs[len] = b.tail_hubs[i];
                len += 1;
            }
            out.tail_hubs = hubs;
            out.tail_len = len as u8;
            out.tail_seen = a.tail_seen + b.tail_seen;
        }
        out
    }
}

/// Run-rank state for the merge scan: rank 1 within a query's run marks the
/// winning (lowest function index) hit.
#[derive(Clone)]
struct PidRun {
    first: u32,
    last: u32,
    single: bool,
    tail_len: u32,
}

impl PidRun {
    fn leaf(pid: u32) -> Self {
        PidRun {
            first: pid,
            last: pid,
            single: true,
            tail_len: 1,
        }
    }

    fn combine(a: &Self, b: &Self) -> Self {
        PidRun {
            first: a.first,
            last: b.last,
            single: a.single && b.single && a.last == b.first,
            tail_len: if b.single && b.first == a.last {
                a.tail_len + b.tail_len
            } else {
                b.tail_len
            },
        }
    }
}

struct SliceCounters {
    truncated: u64,
    max_hubs: u64,
    pairs: u64,
}

/// Finds, for every q in `q_ids` minus `h_ids`, a hub from `h_ids` at
/// distance at most c_rho times the successful radius guess. Guesses run
/// 2^0 ..= 2^ceil(log2 diameter) per trial; a query keeps its first
/// assignment (earliest trial, then smallest guess, then lowest function
/// index, then nearest hub, then lowest hub id).
///
/// Charged usage is the model's: one fixed schedule of rounds and the full
/// grid's tuple volume as global space, whatever the execution mode.
pub fn nearest_hub_search(
    points: &PointSet,
    q_ids: &[PointId],
    h_ids: &[PointId],
    params: &LshParams,
    mpc: &MpcConfig,
    exec: LshExecution,
) -> Result<NhsOutcome, LshError> {
    let dim = points.dim();
    if h_ids.is_empty() {
        return Err(LshError::InvalidParams("hub set is empty".into()));
    }
    let mut hubs: Vec<u32> = h_ids.to_vec();
    hubs.sort_unstable();
    hubs.dedup();
    let mut in_q = vec![false; points.len()];
    for &q in q_ids {
        in_q[q as usize] = true;
    }
    for &h in &hubs {
        if !in_q[h as usize] {
            return Err(LshError::InvalidParams(format!(
                "hub {h} is not a member of the query set"
            )));
        }
    }
    let mut is_hub = vec![false; points.len()];
    for &h in &hubs {
        is_hub[h as usize] = true;
    }
    let queries: Vec<u32> = q_ids.iter().copied().filter(|&q| !is_hub[q as usize]).collect();

    let ladder = guess_ladder(points);
    let trials = params.i_outer.max(1);
    let (rounds, prims) = nhs_schedule(mpc.primitive_round_cost);
    let (cap_words, _) = slice_fill(mpc.local_space_words, dim, params.max_hubs_per_bucket.min(CAP));
    if cap_words < dim + 3 {
        return Err(LshError::InvalidParams(format!(
            "local space {} cannot hold one grid tuple with delivery headroom",
            mpc.local_space_words
        )));
    }
    // full-grid volume: every slice holds all L replicas of hubs and queries,
    // queries at their post-delivery width
    let grid_words = (trials as u64)
        * (ladder.len() as u64)
        * (params.l_reps as u64)
        * (hubs.len() as u64 * (dim as u64 + 3) + queries.len() as u64 * (dim as u64 + 3 + CAP as u64));
    let peak_local_model = cap_words + (cap_words / (dim + 3)) * CAP;
    let mut usage = UsageReport {
        rounds,
        peak_local_words: peak_local_model.min(mpc.local_space_words),
        peak_global_words: grid_words as usize,
        primitive_counts: prims,
    };
    let mut stats = SearchStats::default();

    if queries.is_empty() {
        usage.peak_global_words = 0;
        return Ok(NhsOutcome {
            assignment: HubAssignment { queries, close: Vec::new(), failed: false },
            stats,
            usage,
        });
    }

    let mut slot_of: HashMap<u32, usize> = HashMap::with_capacity(queries.len());
    for (s, &q) in queries.iter().enumerate() {
        slot_of.insert(q, s);
    }
    let mut close: Vec<Option<Assigned>> = vec![None; queries.len()];
    let mut remaining: Vec<usize> = (0..queries.len()).collect();

    let mut counters = SliceCounters { truncated: 0, max_hubs: 0, pairs: 0 };
    let mut hub_map: HashMap<u64, BucketCands> = HashMap::new();

    'outer: for i in 0..trials {
        for (j, &r) in ladder.iter().enumerate() {
            if remaining.is_empty() {
                break 'outer;
            }
            let slice_params = params
                .with_radius(r)
                .with_seed(mix_seed(&[params.seed, 0x6e68, i as u64, j as u64]));
            let fam = LshFamily::build(slice_params, dim)?;
            let thr = params.c_rho * r;
            let thr2 = thr * thr;
            stats.slices_run += 1;
            let winners = match exec {
                LshExecution::Fabric => fabric_slice(
                    points,
                    &hubs,
                    &queries,
                    &remaining,
                    &slot_of,
                    &fam,
                    thr2,
                    mpc,
                    &mut counters,
                    &mut stats.fabric_peak_local_words,
                )?,
                LshExecution::InProcess => local_slice(
                    points,
                    &hubs,
                    &queries,
                    &remaining,
                    &fam,
                    thr2,
                    &mut hub_map,
                    &mut counters,
                ),
            };
            if winners.is_empty() {
                continue;
            }
            for (slot, d2_bits, hub) in winners {
                debug_assert!(close[slot].is_none());
                close[slot] = Some(Assigned {
                    hub,
                    dist: f64::from_bits(d2_bits).sqrt(),
                    r_guess: r,
                    outer_i: i as u32,
                });
            }
            remaining.retain(|&s| close[s].is_none());
        }
    }

    stats.buckets_truncated = counters.truncated;
    stats.max_bucket_hubs = counters.max_hubs;
    stats.pairs_checked = counters.pairs;

    if !remaining.is_empty() {
        return Err(LshError::SearchFailed {
            unassigned: remaining.len(),
            queries: queries.len(),
        });
    }
    let close: Vec<Assigned> = close.into_iter().map(Option::unwrap).collect();
    Ok(NhsOutcome {
        assignment: HubAssignment { queries, close, failed: false },
        stats,
        usage,
    })
}

/// Per-bucket retained hubs, host-map flavor. `seen` counts every arrival
/// so truncation statistics match the grid's scan exactly.
struct BucketCands {
    ids: [u32; CAP],
    len: u8,
    seen: u32,
}

fn local_slice(
    points: &PointSet,
    hubs: &[u32],
    queries: &[u32],
    remaining: &[usize],
    fam: &LshFamily,
    thr2: f64,
    map: &mut HashMap<u64, BucketCands>,
    counters: &mut SliceCounters,
) -> Vec<(usize, u64, u32)> {
    map.clear();
    let cap = fam.params.max_hubs_per_bucket.min(CAP);
    // hubs ascending, so each bucket retains its lowest ids
    for &h in hubs {
        let hc = points.coords(h);
        for ell in 0..fam.params.l_reps {
            let bucket = fam.bucket_of(ell, hc);
            let e = map.entry(bucket).or_insert(BucketCands { ids: [0; CAP], len: 0, seen: 0 });
            e.seen += 1;
            counters.max_hubs = counters.max_hubs.max(e.seen as u64);
            if (e.len as usize) < cap {
                e.ids[e.len as usize] = h;
                e.len += 1;
            } else if e.seen == cap as u32 + 1 {
                counters.truncated += 1;
            }
        }
    }
    let mut winners = Vec::new();
    for &slot in remaining {
        let q = queries[slot];
        let qc = points.coords(q);
        // first function whose bucket holds a qualifying hub decides; within
        // that bucket the nearest qualifying hub wins, ties to lowest id
        for ell in 0..fam.params.l_reps {
            let bucket = fam.bucket_of(ell, qc);
            let Some(e) = map.get(&bucket) else { continue };
            let mut best: Option<(u64, u32)> = None;
            for &h in &e.ids[..e.len as usize] {
                counters.pairs += 1;
                let d2 = dist2_slice(qc, points.coords(h));
                if d2 <= thr2 {
                    let key = d2.to_bits();
                    if best.map_or(true, |(bd, _)| key < bd) {
                        best = Some((key, h));
                    }
                }
            }
            if let Some((d2_bits, hub)) = best {
                winners.push((slot, d2_bits, hub));
                break;
            }
        }
    }
    winners
}

#[allow(clippy::too_many_arguments)]
fn fabric_slice(
    points: &PointSet,
    hubs: &[u32],
    queries: &[u32],
    remaining: &[usize],
    slot_of: &HashMap<u32, usize>,
    fam: &LshFamily,
    thr2: f64,
    mpc: &MpcConfig,
    counters: &mut SliceCounters,
    fabric_peak: &mut usize,
) -> Result<Vec<(usize, u64, u32)>, LshError> {
    let dim = points.dim() as u8;
    let cap = fam.params.max_hubs_per_bucket.min(CAP);
    let l = fam.params.l_reps;
    let mut payload = Vec::with_capacity(l * (hubs.len() + remaining.len()));
    for ell in 0..l as u16 {
        for &h in hubs {
            payload.push(Tup::Hub { ell, bucket: 0, pid: h, dim });
        }
        for &slot in remaining {
            payload.push(Tup::Query {
                ell,
                bucket: 0,
                pid: queries[slot],
                dim,
                cands: [0; CAP],
                cand_len: 0,
            });
        }
    }
    let (cap_words, reserve) = slice_fill(mpc.local_space_words, points.dim(), cap);
    // whole tuples per machine: raw word capacity over-promises when the
    // record size does not divide it
    let per_machine = cap_words / (points.dim() + 3);
    let machines = payload.len().div_ceil(per_machine).max(1);
    // the slice's instance is its replicated tuple load, not the ambient n;
    // a slice with few remaining queries needs few machines
    let config = MpcConfig {
        machine_count: machines,
        n: payload.len().max(1),
        ..mpc.clone()
    };
    let mut grid = MpcCluster::create(config, payload)?;
    grid.set_fill_reserve(reserve)?;

    // fill buckets from the per-slice seed, then group by bucket
    grid.run_round(|_ctx, recs| {
        let kept = recs
            .iter()
            .map(|t| match t {
                Tup::Hub { ell, pid, dim, .. } => Tup::Hub {
                    ell: *ell,
                    bucket: fam.bucket_of(*ell as usize, points.coords(*pid)),
                    pid: *pid,
                    dim: *dim,
                },
                Tup::Query { ell, pid, dim, .. } => Tup::Query {
                    ell: *ell,
                    bucket: fam.bucket_of(*ell as usize, points.coords(*pid)),
                    pid: *pid,
                    dim: *dim,
                    cands: [0; CAP],
                    cand_len: 0,
                },
                Tup::Hit { .. } => unreachable!("no hits before the match round"),
            })
            .collect();
        MachineOutput::keep(kept)
    })?;
    grid.sort_by_key(|t| match t {
        Tup::Hub { bucket, pid, .. } => (*bucket, 0u8, *pid),
        Tup::Query { bucket, pid, .. } => (*bucket, 1u8, *pid),
        Tup::Hit { .. } => unreachable!(),
    })?;
    // the per-slice hash seed every machine derives its projections from
    grid.charge_transient_broadcast(1)?;

    // segmented scan: each bucket's first hubs ride along to its queries
    let mut truncated = 0u64;
    let mut max_hubs = 0u64;
    grid.scan_assoc(
        |t| match t {
            Tup::Hub { bucket, pid, .. } => BucketRun::leaf(*bucket, Some(*pid)),
            Tup::Query { bucket, .. } => BucketRun::leaf(*bucket, None),
            Tup::Hit { .. } => unreachable!(),
        },
        BucketRun::combine,
        |t, run| match t {
            Tup::Hub { .. } => {
                max_hubs = max_hubs.max(run.tail_seen as u64);
                if run.tail_seen == cap as u32 + 1 {
                    truncated += 1;
                }
            }
            Tup::Query { bucket, cands, cand_len, .. } => {
                debug_assert_eq!(run.last, *bucket);
                let take = (run.tail_len as usize).min(cap);
                cands[..take].copy_from_slice(&run.tail_hubs[..take]);
                *cand_len = take as u8;
            }
            Tup::Hit { .. } => unreachable!(),
        },
    )?;
    counters.truncated += truncated;
    counters.max_hubs = counters.max_hubs.max(max_hubs);

    // match round: each query tuple keeps its bucket's nearest qualifying hub
    let pairs = std::cell::Cell::new(0u64);
    grid.run_round(|_ctx, recs| {
        let kept = recs
            .iter()
            .filter_map(|t| match t {
                Tup::Hub { .. } => None,
                Tup::Query { ell, pid, cands, cand_len, .. } => {
                    let qc = points.coords(*pid);
                    let mut best: Option<(u64, u32)> = None;
                    for &h in &cands[..*cand_len as usize] {
                        pairs.set(pairs.get() + 1);
                        let d2 = dist2_slice(qc, points.coords(h));
                        if d2 <= thr2 {
                            let key = d2.to_bits();
                            if best.map_or(true, |(bd, _)| key < bd) {
                                best = Some((key, h));
                            }
                        }
                    }
                    best.map(|(d2_bits, hub)| Tup::Hit {
                        ell: *ell,
                        pid: *pid,
                        d2_bits,
                        hub,
                        lead: false,
                    })
                }
                Tup::Hit { .. } => unreachable!(),
            })
            .collect();
        MachineOutput::keep(kept)
    })?;
    counters.pairs += pairs.get();

    // merge across functions: first hit per query (lowest function index)
    grid.sort_by_key(|t| match t {
        Tup::Hit { pid, ell, .. } => (*pid, *ell),
        _ => unreachable!("only hits survive the match round"),
    })?;
    grid.scan_assoc(
        |t| match t {
            Tup::Hit { pid, .. } => PidRun::leaf(*pid),
            _ => unreachable!(),
        },
        PidRun::combine,
        |t, run| {
            if let Tup::Hit { lead, .. } = t {
                *lead = run.tail_len == 1;
            }
        },
    )?;

    *fabric_peak = (*fabric_peak).max(grid.peak_local_words());
    let mut winners = Vec::new();
    for t in grid.iter_global() {
        if let Tup::Hit { pid, d2_bits, hub, lead: true, .. } = t {
            winners.push((slot_of[pid], *d2_bits, *hub));
        }
    }
    Ok(winners)
}
