//! Greedy covering and the sample-based center reduction.
//!
//! `greedy` is farthest-first selection with a radius cutoff: starting from a
//! seed it keeps adding the farthest point while that point is more than
//! `4 * c_rho * r` from the chosen set, so the output simultaneously covers
//! everything within that bound and keeps its members pairwise further apart
//! than it.
//!
//! `sample_and_solve` shrinks a set that no single machine can hold: sample
//! hubs, assign every other point to a nearby hub (the hashed search), lay
//! the resulting bags out contiguously, and run `greedy` independently on
//! each machine-sized piece of each bag. The union of the per-piece outputs
//! covers the whole set at radius `4 * c_rho * r` deterministically; the
//! sampling only affects how many centers that takes.

use std::collections::HashMap;

use serde::Serialize;

use crate::geometry::{PointId, PointSet};
use crate::lsh::{
    nearest_hub_search, nhs_schedule, LshError, LshExecution, LshParams, SearchStats,
};
use crate::mpc::{MachineOutput, MpcCluster, MpcConfig, Record, UsageReport};
use crate::seeds::{mix64, mix_seed};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ClusterError {
    #[error("seed hub {0} is not a member of the set")]
    HubNotInSet(PointId),
    #[error("sampling produced no hubs (p = {p}, candidates = {candidates})")]
    SampleFailed { p: f64, candidates: usize },
    #[error("invalid arguments: {0}")]
    InvalidInput(String),
    #[error("hub search failed: {0}")]
    Search(#[from] LshError),
    #[error("cluster fault: {0}")]
    Mpc(#[from] crate::mpc::MpcError),
}

/// Centers chosen at some working radius. For the output of a single
/// `greedy` call the members are pairwise more than `4 * c_rho * r` apart;
/// unions of per-piece outputs keep only the coverage guarantee.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CenterSet {
    /// Selection order for a single greedy call; union order for composites.
    pub centers: Vec<PointId>,
    /// The radius the selection thresholds were derived from.
    pub source_radius: f64,
}

impl CenterSet {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn sorted_ids(&self) -> Vec<PointId> {
        let mut ids = self.centers.clone();
        ids.sort_unstable();
        ids
    }
}

/// Everything a pipeline stage threads through unchanged: the point store,
/// the calibrated hash parameters, the machine model, and how hashed
/// searches execute.
#[derive(Debug, Clone)]
pub struct PipelineEnv<'a> {
    pub points: &'a PointSet,
    pub params: &'a LshParams,
    pub mpc: &'a MpcConfig,
    pub exec: LshExecution,
}

impl<'a> PipelineEnv<'a> {
    /// Points a machine-sized piece of a bag may hold: one machine's fill
    /// of (hub, point) tuples, after reserving room for the two hub
    /// deliveries a boundary-straddling layout can require.
    pub fn bag_piece_points(&self) -> usize {
        let d = self.points.dim();
        let reserve = 2 * (d + 1);
        (self.mpc.local_space_words.saturating_sub(reserve)) / (d + 2)
    }

    /// Whether a working set still needs the distributed path at all.
    pub fn fits_one_machine(&self, members: usize) -> bool {
        members * (self.points.dim() + 1) <= self.mpc.local_space_words
    }
}

/// Farthest-first selection from `hub` over `members`, stopping once every
/// point lies within `4 * c_rho * r` of the chosen set. Distance ties break
/// to the lowest id, so the result is a pure function of the inputs.
pub fn greedy(
    points: &PointSet,
    members: &[PointId],
    hub: PointId,
    r: f64,
    c_rho: f64,
) -> Result<CenterSet, ClusterError> {
    if !(r > 0.0) {
        return Err(ClusterError::InvalidInput(format!("radius must be positive, got {r}")));
    }
    if !members.contains(&hub) {
        return Err(ClusterError::HubNotInSet(hub));
    }
    let threshold = 4.0 * c_rho * r;
    let mut centers = vec![hub];
    // d(x, G) for each member, updated as centers join
    let mut dist: Vec<f64> = members.iter().map(|&m| points.dist_ids(m, hub)).collect();
    loop {
        let mut far: Option<(f64, usize)> = None;
        for (i, &d) in dist.iter().enumerate() {
            let better = match far {
                None => true,
                Some((fd, fi)) => d > fd || (d == fd && members[i] < members[fi]),
            };
            if better {
                far = Some((d, i));
            }
        }
        let (fd, fi) = far.expect("members is nonempty: it contains the hub");
        if fd <= threshold {
            break;
        }
        let x = members[fi];
        centers.push(x);
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(points.dist_ids(members[i], x));
        }
    }
    Ok(CenterSet { centers, source_radius: r })
}

/// One hub's bag: the points assigned to it, hub included.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub hub: PointId,
    /// Sorted by id; contains `hub`.
    pub members: Vec<PointId>,
    /// Populated by [`split_bag`] when the bag exceeds one machine.
    pub split_parts: Option<Vec<Vec<PointId>>>,
}

impl Bag {
    pub fn new(hub: PointId, mut members: Vec<PointId>) -> Self {
        members.sort_unstable();
        debug_assert!(members.binary_search(&hub).is_ok(), "bag must contain its hub");
        Bag { hub, members, split_parts: None }
    }
}

/// Splits an oversized bag into contiguous parts of at most `capacity`
/// members each, replicating the hub into every part. The non-hub members
/// are partitioned in id order.
pub fn split_bag(bag: &Bag, capacity: usize) -> Result<Bag, ClusterError> {
    if capacity < 2 {
        return Err(ClusterError::InvalidInput(format!(
            "part capacity must be at least 2 (hub plus one member), got {capacity}"
        )));
    }
    if bag.members.len() <= capacity {
        return Err(ClusterError::InvalidInput(format!(
            "bag of {} members fits capacity {capacity}; caller must not split",
            bag.members.len()
        )));
    }
    let rest: Vec<PointId> = bag.members.iter().copied().filter(|&m| m != bag.hub).collect();
    let per = capacity - 1;
    let parts: Vec<Vec<PointId>> = rest
        .chunks(per)
        .map(|chunk| {
            let mut part = Vec::with_capacity(chunk.len() + 1);
            part.push(bag.hub);
            part.extend_from_slice(chunk);
            part
        })
        .collect();
    debug_assert!(parts.iter().all(|p| p.len() <= capacity));
    Ok(Bag {
        hub: bag.hub,
        members: bag.members.clone(),
        split_parts: Some(parts),
    })
}

/// Bag-phase record: assignment pairs carry the point, selections are bare
/// center ids.
#[derive(Debug, Clone)]
enum BagRec {
    Pair { hub: u32, pid: u32, dim: u8 },
    Center { pid: u32 },
}

impl Record for BagRec {
    fn words(&self) -> usize {
        match self {
            BagRec::Pair { dim, .. } => *dim as usize + 2,
            BagRec::Center { .. } => 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SasStats {
    /// Whole set fit one machine: a single greedy call, no sampling.
    pub shortcut: bool,
    pub hubs: usize,
    pub bags: usize,
    /// Machine-sized greedy pieces (equals bags when nothing straddles).
    pub pieces: usize,
    /// Bags that spanned more than one piece.
    pub split_bags: usize,
    pub largest_bag: usize,
    pub search: Option<SearchStats>,
}

#[derive(Debug, Clone)]
pub struct SasOutcome {
    pub centers: CenterSet,
    /// The sampled hubs (always a subset of the returned centers).
    pub hubs: Vec<PointId>,
    pub usage: UsageReport,
    pub stats: SasStats,
}

/// Rounds and primitives one distributed `sample_and_solve` charges:
/// sampling round, the hashed search schedule, the bag sort, the bag-size
/// scan, the hub-delivery round, and the local greedy round.
pub fn sas_schedule(primitive_round_cost: u32) -> (u64, crate::mpc::PrimitiveCounts) {
    let (nhs_rounds, nhs_prims) = nhs_schedule(primitive_round_cost);
    let c = primitive_round_cost as u64;
    let mut prims = nhs_prims;
    prims.sort += 1;
    prims.prefix_sum += 1;
    (nhs_rounds + 2 * c + 3, prims)
}

/// Rounds and primitives the single-machine shortcut charges: one gather
/// sort and one local greedy round.
pub fn sas_shortcut_schedule(primitive_round_cost: u32) -> (u64, crate::mpc::PrimitiveCounts) {
    let c = primitive_round_cost as u64;
    (
        c + 1,
        crate::mpc::PrimitiveCounts { sort: 1, prefix_sum: 0, broadcast: 0 },
    )
}

/// Reduces `q_ids` to a center set with `cost(Q, centers) <= 4 * c_rho * r`,
/// deterministically on success. If the set fits one machine this is exactly
/// one greedy call from the lowest id. Otherwise each point is sampled as a
/// hub with probability `p`, everyone else joins a nearby hub's bag, and
/// machine-sized bag pieces are covered independently.
pub fn sample_and_solve(
    env: &PipelineEnv,
    q_ids: &[PointId],
    p: f64,
    r: f64,
    seed: u64,
) -> Result<SasOutcome, ClusterError> {
    if q_ids.is_empty() {
        return Err(ClusterError::InvalidInput("empty query set".into()));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(ClusterError::InvalidInput(format!("p must be in (0, 1], got {p}")));
    }
    if !(r > 0.0) {
        return Err(ClusterError::InvalidInput(format!("radius must be positive, got {r}")));
    }
    let c_rho = env.params.c_rho;
    let d = env.points.dim();

    if env.fits_one_machine(q_ids.len()) {
        let lowest = *q_ids.iter().min().expect("nonempty");
        let centers = greedy(env.points, q_ids, lowest, r, c_rho)?;
        let (rounds, prims) = sas_shortcut_schedule(env.mpc.primitive_round_cost);
        let words = q_ids.len() * (d + 1);
        return Ok(SasOutcome {
            centers,
            hubs: vec![lowest],
            usage: UsageReport {
                rounds,
                peak_local_words: words,
                peak_global_words: words,
                primitive_counts: prims,
            },
            stats: SasStats { shortcut: true, ..SasStats::default() },
        });
    }

    // sampling round: every machine flips one deterministic coin per resident
    let hubs: Vec<PointId> = q_ids
        .iter()
        .copied()
        .filter(|&q| {
            let u = mix64(mix_seed(&[seed, 0x5a3f, q as u64]));
            (u as f64 / u64::MAX as f64) < p
        })
        .collect();
    if hubs.is_empty() {
        return Err(ClusterError::SampleFailed { p, candidates: q_ids.len() });
    }

    let mut assignment_pairs: Vec<(u32, u32)> = Vec::with_capacity(q_ids.len());
    for &h in &hubs {
        assignment_pairs.push((h, h));
    }
    if hubs.len() < q_ids.len() {
        let nhs = nearest_hub_search(
            env.points,
            q_ids,
            &hubs,
            &env.params.with_seed(mix_seed(&[env.params.seed, seed, 0x6e68])),
            env.mpc,
            env.exec,
        )?;
        for (q, a) in nhs.assignment.iter() {
            assignment_pairs.push((a.hub, q));
        }
        assignment_pairs.sort_unstable();

        let piece_cap = env.bag_piece_points();
        if piece_cap == 0 {
            return Err(ClusterError::InvalidInput(format!(
                "local space {} cannot hold one bag tuple plus delivery reserve",
                env.mpc.local_space_words
            )));
        }
        let (centers, stats) = match env.exec {
            LshExecution::Fabric => {
                bag_phase_fabric(env, &assignment_pairs, r, c_rho, piece_cap)?
            }
            LshExecution::InProcess => {
                bag_phase_local(env, &assignment_pairs, r, c_rho, piece_cap)
            }
        };
        let (rounds, prims) = sas_schedule(env.mpc.primitive_round_cost);
        let bag_words = assignment_pairs.len() * (d + 2);
        let usage = UsageReport {
            rounds,
            peak_local_words: nhs.usage.peak_local_words.max(
                (piece_cap * (d + 2) + 2 * (d + 1)).min(env.mpc.local_space_words),
            ),
            peak_global_words: nhs.usage.peak_global_words.max(bag_words),
            primitive_counts: prims,
        };
        let mut stats = stats;
        stats.hubs = hubs.len();
        stats.search = Some(nhs.stats);
        let mut hubs_sorted = hubs.clone();
        hubs_sorted.sort_unstable();
        return Ok(SasOutcome {
            centers: CenterSet { centers, source_radius: r },
            hubs: hubs_sorted,
            usage,
            stats,
        });
    }

    // p = 1 corner: every point is its own singleton bag's hub
    let (rounds, prims) = sas_schedule(env.mpc.primitive_round_cost);
    let bag_words = q_ids.len() * (d + 2);
    let mut hubs_sorted = hubs;
    hubs_sorted.sort_unstable();
    Ok(SasOutcome {
        centers: CenterSet { centers: hubs_sorted.clone(), source_radius: r },
        hubs: hubs_sorted.clone(),
        usage: UsageReport {
            rounds,
            peak_local_words: bag_words.min(env.mpc.local_space_words),
            peak_global_words: bag_words,
            primitive_counts: prims,
        },
        stats: SasStats {
            shortcut: false,
            hubs: hubs_sorted.len(),
            bags: hubs_sorted.len(),
            pieces: hubs_sorted.len(),
            split_bags: 0,
            largest_bag: 1,
            search: None,
        },
    })
}

/// Shared piece geometry: `pairs` sorted by (hub, pid), cut into machine
/// fills of `piece_cap` tuples, then into per-hub runs within each machine.
/// Calls `emit(hub, member_pids)` for every piece, in layout order.
fn for_each_piece(
    pairs: &[(u32, u32)],
    piece_cap: usize,
    mut emit: impl FnMut(u32, &mut Vec<u32>),
) -> (usize, usize, usize, usize) {
    let mut bags = 0usize;
    let mut pieces = 0usize;
    let mut largest_bag = 0usize;
    // count bag sizes for stats (and which bags straddle machine fills)
    let mut split_bags = 0usize;
    let mut i = 0usize;
    while i < pairs.len() {
        let hub = pairs[i].0;
        let mut j = i + 1;
        while j < pairs.len() && pairs[j].0 == hub {
            j += 1;
        }
        bags += 1;
        largest_bag = largest_bag.max(j - i);
        if i / piece_cap != (j - 1) / piece_cap {
            split_bags += 1;
        }
        i = j;
    }
    let mut members: Vec<u32> = Vec::with_capacity(piece_cap + 1);
    let mut m = 0usize;
    while m * piece_cap < pairs.len() {
        let lo = m * piece_cap;
        let hi = ((m + 1) * piece_cap).min(pairs.len());
        let slice = &pairs[lo..hi];
        let mut s = 0usize;
        while s < slice.len() {
            let hub = slice[s].0;
            members.clear();
            let mut own_hub = false;
            while s < slice.len() && slice[s].0 == hub {
                members.push(slice[s].1);
                own_hub |= slice[s].1 == hub;
                s += 1;
            }
            if !own_hub {
                // the hub tuple lives on another machine; it gets delivered
                members.push(hub);
                members.sort_unstable();
            }
            pieces += 1;
            emit(hub, &mut members);
        }
        m += 1;
    }
    (bags, pieces, split_bags, largest_bag)
}

fn bag_phase_local(
    env: &PipelineEnv,
    pairs: &[(u32, u32)],
    r: f64,
    c_rho: f64,
    piece_cap: usize,
) -> (Vec<PointId>, SasStats) {
    let mut centers: Vec<PointId> = Vec::new();
    let (bags, pieces, split_bags, largest_bag) = for_each_piece(pairs, piece_cap, |hub, members| {
        let g = greedy(env.points, members, hub, r, c_rho)
            .expect("piece contains its hub by construction");
        centers.extend(g.centers);
    });
    centers.sort_unstable();
    centers.dedup();
    (
        centers,
        SasStats {
            shortcut: false,
            hubs: 0,
            bags,
            pieces,
            split_bags,
            largest_bag,
            search: None,
        },
    )
}

fn bag_phase_fabric(
    env: &PipelineEnv,
    pairs: &[(u32, u32)],
    r: f64,
    c_rho: f64,
    piece_cap: usize,
) -> Result<(Vec<PointId>, SasStats), ClusterError> {
    let d = env.points.dim() as u8;
    let reserve = 2 * (env.points.dim() + 1);
    let machines = pairs.len().div_ceil(piece_cap).max(1);
    // a transient grid's instance is the pair list it holds, not the ambient
    // input, so late stages spin up proportionally fewer machines
    let config = MpcConfig {
        machine_count: machines,
        n: pairs.len().max(1),
        ..env.mpc.clone()
    };
    // arrival order scrambled by pid so the sort is doing real work
    let mut payload: Vec<BagRec> = pairs
        .iter()
        .map(|&(hub, pid)| BagRec::Pair { hub, pid, dim: d })
        .collect();
    payload.sort_by_key(|rec| match rec {
        BagRec::Pair { pid, .. } => *pid,
        BagRec::Center { .. } => unreachable!(),
    });
    let mut grid = MpcCluster::create(config, payload)?;
    grid.set_fill_reserve(reserve)?;
    grid.sort_by_key(|rec| match rec {
        BagRec::Pair { hub, pid, .. } => (*hub, *pid),
        BagRec::Center { .. } => unreachable!("no selections before the greedy round"),
    })?;
    // bag sizes ride a segmented rank scan over the sorted order; each
    // record learns its index within its bag, so the last one knows the size
    let mut ranks: Vec<(u32, u32)> = Vec::with_capacity(pairs.len());
    grid.scan_assoc(
        |rec| match rec {
            BagRec::Pair { hub, .. } => (*hub, *hub, 1u32, true),
            BagRec::Center { .. } => unreachable!(),
        },
        |a: &(u32, u32, u32, bool), b: &(u32, u32, u32, bool)| {
            (
                a.0,
                b.1,
                if b.3 && b.0 == a.1 { a.2 + b.2 } else { b.2 },
                a.3 && b.3 && a.1 == b.0,
            )
        },
        |rec, &(_, _, rank, _)| {
            if let BagRec::Pair { hub, .. } = rec {
                ranks.push((*hub, rank));
            }
        },
    )?;
    // a run ends where the hub changes: the rank there is the bag size
    let mut scanned_largest = 0u32;
    for (i, &(hub, rank)) in ranks.iter().enumerate() {
        if i + 1 == ranks.len() || ranks[i + 1].0 != hub {
            scanned_largest = scanned_largest.max(rank);
        }
    }
    // hub delivery: boundary pieces receive their hub's record transiently
    grid.charge_transient_broadcast(reserve.min(env.mpc.local_space_words - 1))?;
    // local greedy per piece
    let centers_cell = std::cell::RefCell::new(Vec::<PointId>::new());
    let points = env.points;
    grid.run_round(|_ctx, recs| {
        let mut kept = Vec::new();
        let mut s = 0usize;
        let mut members: Vec<u32> = Vec::new();
        while s < recs.len() {
            let (hub, _) = match &recs[s] {
                BagRec::Pair { hub, pid, .. } => (*hub, *pid),
                BagRec::Center { .. } => unreachable!(),
            };
            members.clear();
            let mut own_hub = false;
            while s < recs.len() {
                if let BagRec::Pair { hub: h, pid, .. } = &recs[s] {
                    if *h != hub {
                        break;
                    }
                    members.push(*pid);
                    own_hub |= *pid == hub;
                    s += 1;
                } else {
                    unreachable!()
                }
            }
            if !own_hub {
                members.push(hub);
                members.sort_unstable();
            }
            let g = greedy(points, &members, hub, r, c_rho)
                .expect("piece contains its hub by construction");
            centers_cell.borrow_mut().extend_from_slice(&g.centers);
            for &c in &g.centers {
                kept.push(BagRec::Center { pid: c });
            }
        }
        MachineOutput::keep(kept)
    })?;
    let mut centers = centers_cell.into_inner();
    // cross-check the grid's surviving records against the host-side list
    let mut grid_centers: Vec<u32> = grid
        .iter_global()
        .map(|rec| match rec {
            BagRec::Center { pid } => *pid,
            BagRec::Pair { .. } => unreachable!("pairs are consumed by the greedy round"),
        })
        .collect();
    grid_centers.sort_unstable();
    grid_centers.dedup();
    centers.sort_unstable();
    centers.dedup();
    debug_assert_eq!(centers, grid_centers);

    // stats come from the same layout math the host path uses
    let (bags, pieces, split_bags, largest_bag) = for_each_piece(pairs, piece_cap, |_, _| {});
    debug_assert_eq!(scanned_largest as usize, largest_bag);
    Ok((
        centers,
        SasStats {
            shortcut: false,
            hubs: 0,
            bags,
            pieces,
            split_bags,
            largest_bag,
            search: None,
        },
    ))
}

/// Per-planted-cluster bookkeeping used by the statistical checks: with
/// well-separated clusters no greedy call should select beyond the hubs, so
/// `|selected ∩ C| = |hubs ∩ C|` whenever every member of C was assigned.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterTally {
    pub cluster: u32,
    pub hubs_in: usize,
    pub selected_in: usize,
    pub premise_held: bool,
}

/// Tallies selection counts against hub counts per labeled group.
/// `membership[pid]` names the group of each point; groups lacking hubs or
/// with unassigned members have `premise_held = false`.
pub fn tally_clusters(
    membership: &[u32],
    q_ids: &[PointId],
    hubs: &[PointId],
    selected: &[PointId],
    assigned: impl Fn(PointId) -> bool,
) -> Vec<ClusterTally> {
    let mut by_cluster: HashMap<u32, (usize, usize, bool)> = HashMap::new();
    for &q in q_ids {
        let c = membership[q as usize];
        let e = by_cluster.entry(c).or_insert((0, 0, true));
        e.2 &= assigned(q);
    }
    for &h in hubs {
        by_cluster.get_mut(&membership[h as usize]).expect("hub is in q_ids").0 += 1;
    }
    for &s in selected {
        by_cluster.get_mut(&membership[s as usize]).expect("center is in q_ids").1 += 1;
    }
    let mut out: Vec<ClusterTally> = by_cluster
        .into_iter()
        .map(|(cluster, (hubs_in, selected_in, all_assigned))| ClusterTally {
            cluster,
            hubs_in,
            selected_in,
            premise_held: all_assigned && hubs_in > 0,
        })
        .collect();
    out.sort_by_key(|t| t.cluster);
    out
}
