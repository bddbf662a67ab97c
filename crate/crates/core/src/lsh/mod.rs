//! Locality-sensitive hashing over Euclidean points.
//!
//! A family instance hashes a point by projecting it onto `k_concat` random
//! Gaussian directions, shifting by a uniform offset, and flooring at bucket
//! width `bucket_width_factor * r`; the concatenated floor values are mixed
//! into a single 64-bit bucket id. Points within distance `r` collide with
//! probability at least `n^-rho`; points beyond `c_rho * r` collide with
//! probability at most `1/n`. The gap ratio `c_rho` is not assumed: it is
//! calibrated from the collision curve so the far bound holds exactly.

mod search;

pub use search::{
    nearest_hub_search, nhs_schedule, Assigned, HubAssignment, LshExecution, NhsOutcome,
    SearchStats,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::geometry::PointSet;
use crate::mpc::MpcError;
use crate::seeds::{mix64, mix_seed};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LshError {
    #[error("invalid hashing parameters: {0}")]
    InvalidParams(String),
    #[error("hub search failed: {unassigned} of {queries} queries unassigned after all trials")]
    SearchFailed { unassigned: usize, queries: usize },
    #[error("cluster fault during hashed search: {0}")]
    Mpc(#[from] MpcError),
}

/// Default projection bucket width, in units of the guess radius. Width 4
/// puts the collision probability for a pair at distance exactly r around
/// 0.8 per concatenated projection, which calibrates to a gap ratio c_rho
/// near 4 at rho = 0.5.
pub const DEFAULT_BUCKET_WIDTH_FACTOR: f64 = 4.0;

/// Most hubs a bucket is allowed to keep; the rest are dropped so a query
/// never pays for more than a constant number of distance checks per probe.
pub const DEFAULT_MAX_HUBS_PER_BUCKET: usize = 10;

/// Calibrated hashing configuration for one guess radius.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct LshParams {
    /// Radius this instance is tuned for (collision guarantees are relative
    /// to `r` and `c_rho * r`).
    pub r: f64,
    /// Target replication exponent: near pairs must collide with
    /// probability at least `n^-rho`.
    pub rho: f64,
    /// Ambient input size; collision bounds are stated against it.
    pub n: usize,
    /// Measured gap ratio: smallest c such that pairs at distance `c * r`
    /// collide with probability at most `1/n`.
    pub c_rho: f64,
    /// Hash functions tried per guess (`ceil(n^rho)`).
    pub l_reps: usize,
    /// Projections concatenated into one bucket id.
    pub k_concat: usize,
    /// Bucket width in units of `r`.
    pub bucket_width_factor: f64,
    /// Outer amplification trials (`ceil(2 log2 n)`).
    pub i_outer: usize,
    /// Per-bucket hub cap.
    pub max_hubs_per_bucket: usize,
    pub seed: u64,
}

impl LshParams {
    /// Calibrates a family for ambient size `n` and exponent `rho` at the
    /// given bucket width.
    ///
    /// The concatenation depth is chosen from the far-pair target at a
    /// provisional gap of 4 (`K = ceil(ln n / ln(1/p2))`), then capped by
    /// the near-pair constraint `p1^K >= n^-rho`; finally `c_rho` is set to
    /// the smallest gap at which the K-fold far collision drops to `1/n`.
    /// Asking for a very small `rho` therefore buys a larger `c_rho`, never
    /// a broken guarantee.
    pub fn calibrate(n: usize, rho: f64, bucket_width_factor: f64, seed: u64) -> Result<Self, LshError> {
        if n < 2 {
            return Err(LshError::InvalidParams(format!("n must be at least 2, got {n}")));
        }
        if !(rho > 0.0) {
            return Err(LshError::InvalidParams(format!("rho must be positive, got {rho}")));
        }
        let w = bucket_width_factor;
        if !(w > 0.0) || !w.is_finite() {
            return Err(LshError::InvalidParams(format!(
                "bucket width factor must be positive, got {w}"
            )));
        }
        let ln_n = (n as f64).ln();
        let p1 = projection_collision_prob(w);
        if p1 <= 0.0 || p1 >= 1.0 {
            return Err(LshError::InvalidParams(format!(
                "width factor {w} gives degenerate near collision {p1}"
            )));
        }
        // largest depth that keeps the near side above n^-rho
        let k_near = ((rho * ln_n) / (1.0 / p1).ln()).floor() as usize;
        let k_near = k_near.max(1);
        // depth that pushes the far side to 1/n at a provisional gap of 4
        let p2_prov = projection_collision_prob(w / 4.0);
        let k_far = (ln_n / (1.0 / p2_prov).ln()).ceil() as usize;
        let k = k_far.min(k_near).max(1);
        if projection_collision_prob(w).powi(k as i32) < (n as f64).powf(-rho) - 1e-12 {
            return Err(LshError::InvalidParams(format!(
                "cannot satisfy near-pair bound at rho = {rho}, width {w}"
            )));
        }
        // smallest gap whose K-fold far collision is at most 1/n
        let target = (n as f64).powf(-1.0 / k as f64);
        let u = inverse_projection_collision(target);
        let c_rho = w / u;
        if !(c_rho > 1.0) {
            return Err(LshError::InvalidParams(format!(
                "calibration produced gap ratio {c_rho} <= 1 (rho too small for width {w})"
            )));
        }
        Ok(LshParams {
            r: 1.0,
            rho,
            n,
            c_rho,
            l_reps: (n as f64).powf(rho).ceil() as usize,
            k_concat: k,
            bucket_width_factor: w,
            i_outer: (2.0 * (n as f64).log2()).ceil() as usize,
            max_hubs_per_bucket: DEFAULT_MAX_HUBS_PER_BUCKET,
            seed,
        })
    }

    pub fn with_radius(&self, r: f64) -> Self {
        let mut p = self.clone();
        p.r = r;
        p
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut p = self.clone();
        p.seed = seed;
        p
    }

    /// Probability that one concatenated hash puts a pair at distance `d`
    /// into the same bucket (analytic).
    pub fn collision_prob(&self, d: f64) -> f64 {
        if d <= 0.0 {
            return 1.0;
        }
        projection_collision_prob(self.bucket_width_factor * self.r / d)
            .powi(self.k_concat as i32)
    }
}

/// Collision probability of a single floored Gaussian projection for a pair
/// whose bucket-width-to-distance ratio is `u`:
/// `erf(u / sqrt(2)) - sqrt(2/pi) * (1 - exp(-u^2 / 2)) / u`.
pub fn projection_collision_prob(u: f64) -> f64 {
    if u <= 0.0 {
        return 0.0;
    }
    if u.is_infinite() {
        return 1.0;
    }
    let erf_term = libm::erf(u / std::f64::consts::SQRT_2);
    let tail = (2.0 / std::f64::consts::PI).sqrt() * (1.0 - (-u * u / 2.0).exp()) / u;
    (erf_term - tail).clamp(0.0, 1.0)
}

/// Inverse of [`projection_collision_prob`] by bisection (the curve is
/// strictly increasing in `u`).
fn inverse_projection_collision(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    let mut lo = 1e-9;
    let mut hi = 1.0;
    while projection_collision_prob(hi) < p {
        hi *= 2.0;
        if hi > 1e12 {
            return hi;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if projection_collision_prob(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// One built family: `l_reps` independent hash functions, each concatenating
/// `k_concat` floored projections at width `bucket_width_factor * r`.
#[derive(Debug, Clone)]
pub struct LshFamily {
    pub params: LshParams,
    dim: usize,
    width: f64,
    /// Direction vectors, laid out [ell][k][dim].
    dirs: Vec<f64>,
    /// Offsets, laid out [ell][k].
    offs: Vec<f64>,
    salt: u64,
}

impl LshFamily {
    /// Draws the projection data for `params` deterministically from
    /// `params.seed`.
    pub fn build(params: LshParams, dim: usize) -> Result<Self, LshError> {
        if dim == 0 {
            return Err(LshError::InvalidParams("dimension must be positive".into()));
        }
        if !(params.r > 0.0) {
            return Err(LshError::InvalidParams(format!(
                "guess radius must be positive, got {}",
                params.r
            )));
        }
        let l = params.l_reps;
        let k = params.k_concat;
        let width = params.bucket_width_factor * params.r;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[params.seed, l as u64, k as u64]));
        let mut dirs = Vec::with_capacity(l * k * dim);
        for _ in 0..l * k * dim {
            let g: f64 = StandardNormal.sample(&mut rng);
            dirs.push(g);
        }
        let unif = Uniform::new(0.0, width);
        let mut offs = Vec::with_capacity(l * k);
        for _ in 0..l * k {
            offs.push(unif.sample(&mut rng));
        }
        let salt = mix64(params.seed ^ 0x5f5c_a11b_u64);
        Ok(LshFamily { params, dim, width, dirs, offs, salt })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Bucket id of `coords` under hash function `ell`. The id mixes the
    /// `k_concat` floor values together with `ell` and the family salt, so
    /// distinct functions never share bucket ids. Mixing collisions are
    /// possible in principle and ignored.
    #[inline]
    pub fn bucket_of(&self, ell: usize, coords: &[f64]) -> u64 {
        debug_assert_eq!(coords.len(), self.dim);
        let k = self.params.k_concat;
        let base = ell * k;
        let mut acc = mix64(self.salt ^ ell as u64);
        for kk in 0..k {
            let di = (base + kk) * self.dim;
            let mut dot = self.offs[base + kk];
            for (c, d) in coords.iter().zip(&self.dirs[di..di + self.dim]) {
                dot += c * d;
            }
            let cell = (dot / self.width).floor() as i64;
            acc = mix64(acc ^ cell as u64);
        }
        acc
    }

    /// Raw floor values for one hash function (test hook).
    pub fn cells_of(&self, ell: usize, coords: &[f64], out: &mut Vec<i64>) {
        let k = self.params.k_concat;
        let base = ell * k;
        out.clear();
        for kk in 0..k {
            let di = (base + kk) * self.dim;
            let mut dot = self.offs[base + kk];
            for (c, d) in coords.iter().zip(&self.dirs[di..di + self.dim]) {
                dot += c * d;
            }
            out.push((dot / self.width).floor() as i64);
        }
    }
}

/// Monte-Carlo estimate of the near / far collision rates of a calibrated
/// family: pairs at distance exactly `r` and exactly `c_rho * r`, a fresh
/// hash function per sample. Returns (near rate, far rate).
pub fn empirical_collision_rates(
    params: &LshParams,
    dim: usize,
    pairs: usize,
    seed: u64,
) -> Result<(f64, f64), LshError> {
    let mut near_hits = 0usize;
    let mut far_hits = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x9a17]));
    let r = params.r;
    let far_d = params.c_rho * r;
    // one small family per batch keeps the memory flat while still sampling
    // fresh projections across the run
    let batch = 64usize;
    let mut done = 0usize;
    let mut batch_idx = 0u64;
    while done < pairs {
        let take = batch.min(pairs - done);
        let mut p = params.clone();
        p.l_reps = 1;
        p.seed = mix_seed(&[seed, 1, batch_idx]);
        let fam = LshFamily::build(p, dim)?;
        for _ in 0..take {
            let a: Vec<f64> = (0..dim).map(|_| rng.gen_range(-100.0..100.0)).collect();
            let dir = random_unit(&mut rng, dim);
            let near: Vec<f64> = a.iter().zip(&dir).map(|(x, u)| x + u * r).collect();
            let far: Vec<f64> = a.iter().zip(&dir).map(|(x, u)| x + u * far_d).collect();
            let ba = fam.bucket_of(0, &a);
            if ba == fam.bucket_of(0, &near) {
                near_hits += 1;
            }
            if ba == fam.bucket_of(0, &far) {
                far_hits += 1;
            }
        }
        done += take;
        batch_idx += 1;
    }
    Ok((near_hits as f64 / pairs as f64, far_hits as f64 / pairs as f64))
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim)
            .map(|_| {
                let g: f64 = StandardNormal.sample(rng);
                g
            })
            .collect();
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

use rand::Rng;

/// Radius guesses for a normalized set: `2^0 ..= 2^ceil(log2 diameter)`.
/// After normalization every positive distance is at least 1, so the ladder
/// covers any nearest-hub distance that can occur.
pub fn guess_ladder(point_set: &PointSet) -> Vec<f64> {
    let delta = point_set.delta_diameter.max(1.0);
    let top = delta.log2().ceil() as i32;
    (0..=top).map(|j| (2.0f64).powi(j)).collect()
}
