//! Benchmark instances with known structure: k cluster centers placed
//! pairwise far apart, each dressed with a near-even share of points drawn
//! uniformly from a small ball around it. Because the ground truth
//! (membership, cluster radius, center spacing) is retained, tests can score
//! pipeline output against what was planted instead of against an
//! approximation.

use kcenter_core::geometry::{dist_slice, GeomError, Point, PointSet};
use kcenter_core::mix_seed;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::HarnessError;

/// A generated instance plus the ground truth that produced it.
///
/// The generator works in raw coordinates and then normalizes, so `r_star`,
/// `separation`, and `centers` are stored in post-normalization units: every
/// point lies within `r_star` of `centers[membership[id]]`, and distinct
/// centers are at least `separation` apart.
#[derive(Debug, Clone)]
pub struct PlantedInstance {
    pub points: PointSet,
    pub k_true: usize,
    pub r_star: f64,
    pub separation: f64,
    /// Cluster index in `0..k_true` per point id.
    pub membership: Vec<u32>,
    /// Planted center coordinates (not themselves input points).
    pub centers: Vec<Vec<f64>>,
    pub seed: u64,
}

impl PlantedInstance {
    /// Points carrying each cluster label, by id order.
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.k_true];
        for &c in &self.membership {
            sizes[c as usize] += 1;
        }
        sizes
    }
}

/// Draws per center before the placement restarts from scratch.
const PLACEMENT_DRAWS: u32 = 400;
/// Whole-instance restarts before giving up.
const PLACEMENT_RESTARTS: u32 = 16;

/// Generates a planted instance in a bounding box sized so that rejection
/// sampling of the centers succeeds with room to spare: side
/// `separation * (8k)^(1/d)` keeps the packing density low at every k.
pub fn generate_planted(
    k: usize,
    n: usize,
    d: usize,
    r_star: f64,
    separation: f64,
    seed: u64,
) -> Result<PlantedInstance, HarnessError> {
    let side = separation * (8.0 * k.max(1) as f64).powf(1.0 / d.max(1) as f64);
    generate_planted_in_box(k, n, d, r_star, separation, side, seed)
}

/// As `generate_planted`, but with the box side fixed by the caller. A box
/// too small for k centers at the requested spacing fails with
/// `InfeasibleGeometry` after bounded retries.
pub fn generate_planted_in_box(
    k: usize,
    n: usize,
    d: usize,
    r_star: f64,
    separation: f64,
    side: f64,
    seed: u64,
) -> Result<PlantedInstance, HarnessError> {
    if k == 0 || n < k {
        return Err(HarnessError::InvalidInput(format!(
            "need n >= k >= 1, got k = {k}, n = {n}"
        )));
    }
    if n < 2 {
        return Err(HarnessError::InvalidInput(
            "need at least 2 points to normalize".into(),
        ));
    }
    if d == 0 || d > kcenter_core::geometry::MAX_DIM {
        return Err(HarnessError::InvalidInput(format!(
            "dimension must be in 1..={}, got {d}",
            kcenter_core::geometry::MAX_DIM
        )));
    }
    if !(r_star > 0.0) || !(separation > 2.0 * r_star) {
        return Err(HarnessError::InvalidInput(format!(
            "need separation > 2 * r_star > 0, got r_star = {r_star}, separation = {separation}"
        )));
    }
    if !(side > 0.0) || !side.is_finite() {
        return Err(HarnessError::InvalidInput(format!(
            "box side must be positive and finite, got {side}"
        )));
    }

    let raw_centers = place_centers(k, d, separation, side, seed)?;

    // near-even split: the first n mod k clusters get one extra point
    let base = n / k;
    let extra = n % k;
    let mut membership = Vec::with_capacity(n);
    for c in 0..k {
        let size = base + usize::from(c < extra);
        membership.extend(std::iter::repeat(c as u32).take(size));
    }
    debug_assert_eq!(membership.len(), n);

    // duplicates are astronomically unlikely but cheap to retry past
    for round in 0..4u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x9073, round]));
        let mut raw: Vec<Point> = Vec::with_capacity(n);
        for (id, &c) in membership.iter().enumerate() {
            let coords = ball_point(&mut rng, &raw_centers[c as usize], r_star);
            raw.push(Point::new(id as u32, coords));
        }
        let pre_span = dist_slice(&raw[0].coords, &raw[n - 1].coords);
        let points = match PointSet::normalize(raw) {
            Ok(ps) => ps,
            Err(GeomError::DuplicatePoints) => continue,
            Err(e) => return Err(e.into()),
        };
        // normalize only rescales, so one distance ratio recovers the factor
        let scale = points.dist_ids(0, (n - 1) as u32) / pre_span;
        let instance = PlantedInstance {
            points,
            k_true: k,
            r_star: r_star * scale,
            separation: separation * scale,
            membership,
            centers: raw_centers
                .iter()
                .map(|c| c.iter().map(|x| x * scale).collect())
                .collect(),
            seed,
        };
        check_instance(&instance);
        return Ok(instance);
    }
    Err(HarnessError::InvalidInput(
        "point draws collided repeatedly; instance parameters are degenerate".into(),
    ))
}

fn place_centers(
    k: usize,
    d: usize,
    separation: f64,
    side: f64,
    seed: u64,
) -> Result<Vec<Vec<f64>>, HarnessError> {
    let sep2 = separation * separation;
    for attempt in 0..PLACEMENT_RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0xce47, attempt as u64]));
        let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
        'next_center: while centers.len() < k {
            for _ in 0..PLACEMENT_DRAWS {
                let cand: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..side)).collect();
                let clear = centers
                    .iter()
                    .all(|c| dist2(c, &cand) >= sep2);
                if clear {
                    centers.push(cand);
                    continue 'next_center;
                }
            }
            break; // this restart is stuck; reseed and try again
        }
        if centers.len() == k {
            return Ok(centers);
        }
    }
    Err(HarnessError::InfeasibleGeometry {
        k,
        separation,
        side,
        attempts: PLACEMENT_RESTARTS,
    })
}

/// Uniform draw from the r-ball around `center`: an isotropic direction and
/// a radius with the d-th-root law.
fn ball_point(rng: &mut ChaCha8Rng, center: &[f64], r: f64) -> Vec<f64> {
    let d = center.len();
    loop {
        let dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            continue;
        }
        let radius = r * rng.gen_range(0.0f64..1.0).powf(1.0 / d as f64);
        return center
            .iter()
            .zip(&dir)
            .map(|(c, x)| c + x * radius / norm)
            .collect();
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// The promises the struct makes, checked on every construction: membership
/// radius and center spacing, both in normalized units.
fn check_instance(inst: &PlantedInstance) {
    let tol = 1e-9 * inst.separation.max(1.0);
    for id in 0..inst.points.len() {
        let c = &inst.centers[inst.membership[id] as usize];
        let d = dist_slice(inst.points.coords(id as u32), c);
        assert!(
            d <= inst.r_star + tol,
            "point {id} is {d} from its planted center, radius {}",
            inst.r_star
        );
    }
    for i in 0..inst.k_true {
        for j in (i + 1)..inst.k_true {
            let d = dist_slice(&inst.centers[i], &inst.centers[j]);
            assert!(
                d >= inst.separation - tol,
                "centers {i} and {j} are {d} apart, requested {}",
                inst.separation
            );
        }
    }
}
