//! Points, distances, and the k-center cost function.
//!
//! Everything downstream works on a [`PointSet`] that has been normalized so
//! the minimum pairwise distance is exactly 1. That convention makes radius
//! ladders start at 1 and lets the diameter stand in for the spread of the
//! instance.

use std::fmt;
use std::path::Path;

/// Index of a point inside its [`PointSet`]. Ids are dense: id == row index.
pub type PointId = u32;

/// Maximum supported dimensionality. Instances are low-dimensional by
/// assumption; the cap keeps grid neighborhoods (3^d cells) bounded.
pub const MAX_DIM: usize = 8;

/// Absolute tolerance for distance comparisons in checks and tests.
pub const DIST_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeomError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("empty point or center set")]
    EmptySet,
    #[error("duplicate points: minimum pairwise distance is zero")]
    DuplicatePoints,
    #[error("ragged row at line {line}: expected {expected} values, found {found}")]
    RaggedRow {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("io error: {0}")]
    Io(String),
}

/// A single input point. `id` is its line number / row index.
#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub id: PointId,
    pub coords: Vec<f64>,
}

impl Point {
    pub fn new(id: PointId, coords: Vec<f64>) -> Self {
        Point { id, coords }
    }
}

/// Euclidean distance between two points, checking dimensions.
pub fn dist(a: &Point, b: &Point) -> Result<f64, GeomError> {
    if a.coords.len() != b.coords.len() {
        return Err(GeomError::DimensionMismatch(
            a.coords.len(),
            b.coords.len(),
        ));
    }
    Ok(dist_slice(&a.coords, &b.coords))
}

/// Distance between equal-length coordinate slices. Hot path, unchecked.
#[inline]
pub fn dist_slice(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        s += d * d;
    }
    s.sqrt()
}

/// Squared distance, for hot paths that compare against a squared threshold
/// and want to skip the square root.
#[inline]
pub fn dist2_slice(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        s += d * d;
    }
    s
}

/// A normalized point set: min pairwise distance exactly 1, ids dense.
///
/// Coordinates are stored row-major in one flat buffer so distance loops stay
/// cache-friendly at every scale the simulator runs at.
#[derive(Debug, Clone)]
pub struct PointSet {
    dim: usize,
    flat: Vec<f64>,
    /// Diameter after normalization (max pairwise distance).
    pub delta_diameter: f64,
    /// Always 1 after normalization; kept so callers can assert it.
    pub min_pair_dist: f64,
}

impl PointSet {
    /// Normalizes a raw point list: divides all coordinates by the minimum
    /// pairwise distance, then records the resulting diameter.
    ///
    /// Requires at least 2 points, equal dimensions, finite coordinates, and
    /// ids equal to row order. Duplicate points are rejected: there is no
    /// scale at which their distance becomes 1.
    pub fn normalize(points: Vec<Point>) -> Result<Self, GeomError> {
        if points.len() < 2 {
            return Err(GeomError::InvalidInput(format!(
                "need at least 2 points, got {}",
                points.len()
            )));
        }
        let dim = points[0].coords.len();
        if dim == 0 || dim > MAX_DIM {
            return Err(GeomError::InvalidInput(format!(
                "dimension must be in 1..={MAX_DIM}, got {dim}"
            )));
        }
        for (i, p) in points.iter().enumerate() {
            if p.coords.len() != dim {
                return Err(GeomError::DimensionMismatch(dim, p.coords.len()));
            }
            if p.id as usize != i {
                return Err(GeomError::InvalidInput(format!(
                    "point ids must be dense row indices; row {i} has id {}",
                    p.id
                )));
            }
            if p.coords.iter().any(|c| !c.is_finite()) {
                return Err(GeomError::InvalidInput(format!(
                    "non-finite coordinate in point {i}"
                )));
            }
        }
        let n = points.len();
        let mut flat = Vec::with_capacity(n * dim);
        for p in &points {
            flat.extend_from_slice(&p.coords);
        }

        let min2 = closest_pair_sq(&flat, n, dim);
        if min2 <= 0.0 {
            return Err(GeomError::DuplicatePoints);
        }
        let scale = 1.0 / min2.sqrt();
        for c in &mut flat {
            *c *= scale;
        }
        // recompute on the scaled coordinates so the stored values are what
        // a consumer of this set would actually measure
        let min_pair = closest_pair_sq(&flat, n, dim).sqrt();
        let delta = diameter_sq(&flat, n, dim).sqrt();
        Ok(PointSet {
            dim,
            flat,
            delta_diameter: delta,
            min_pair_dist: min_pair,
        })
    }

    pub fn len(&self) -> usize {
        self.flat.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn coords(&self, id: PointId) -> &[f64] {
        let i = id as usize * self.dim;
        &self.flat[i..i + self.dim]
    }

    /// All ids, 0..n.
    pub fn ids(&self) -> Vec<PointId> {
        (0..self.len() as PointId).collect()
    }

    #[inline]
    pub fn dist_ids(&self, a: PointId, b: PointId) -> f64 {
        dist_slice(self.coords(a), self.coords(b))
    }

    /// Distance from point `p` to the nearest member of `set`.
    pub fn dist_to_set(&self, p: PointId, set: &[PointId]) -> Result<f64, GeomError> {
        if set.is_empty() {
            return Err(GeomError::EmptySet);
        }
        let pc = self.coords(p);
        let mut best = f64::INFINITY;
        for &s in set {
            let d = dist2_slice(pc, self.coords(s));
            if d < best {
                best = d;
            }
        }
        Ok(best.sqrt())
    }

    /// k-center cost of `centers` over the whole set:
    /// max over points of the distance to the nearest center.
    pub fn cost(&self, centers: &[PointId]) -> Result<f64, GeomError> {
        let members: Vec<PointId> = self.ids();
        self.cost_of(&members, centers)
    }

    /// k-center cost of `centers` over an explicit member list.
    pub fn cost_of(&self, members: &[PointId], centers: &[PointId]) -> Result<f64, GeomError> {
        if centers.is_empty() {
            return Err(GeomError::EmptySet);
        }
        let mut worst: f64 = 0.0;
        for &m in members {
            let mc = self.coords(m);
            let mut best = f64::INFINITY;
            for &c in centers {
                let d = dist2_slice(mc, self.coords(c));
                if d < best {
                    best = d;
                }
            }
            if best > worst {
                worst = best;
            }
        }
        Ok(worst.sqrt())
    }
}

impl fmt::Display for PointSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "PointSet(n={}, d={}, diameter={:.4})",
            self.len(),
            self.dim,
            self.delta_diameter
        )
    }
}

/// Squared minimum pairwise distance.
///
/// Small inputs use the quadratic scan. Larger ones sweep a uniform grid
/// whose cell width tracks the current best distance: each point only checks
/// the 3^d neighboring cells, and the grid is rebuilt whenever the best
/// distance drops below half the cell width.
fn closest_pair_sq(flat: &[f64], n: usize, dim: usize) -> f64 {
    debug_assert!(n >= 2);
    let at = |i: usize| &flat[i * dim..(i + 1) * dim];
    if n <= 2000 {
        let mut best = f64::INFINITY;
        for i in 0..n {
            for j in (i + 1)..n {
                let d = dist2_slice(at(i), at(j));
                if d < best {
                    best = d;
                }
            }
        }
        return best;
    }

    use std::collections::HashMap;
    let mut best = dist2_slice(at(0), at(1));
    // tighten the initial estimate on a deterministic sample so the first
    // grid is not absurdly coarse
    let stride = (n / 512).max(1);
    let mut prev = 0;
    let mut i = stride;
    while i < n {
        let d = dist2_slice(at(prev), at(i));
        if d < best && d > 0.0 {
            best = d;
        }
        prev = i;
        i += stride;
    }
    if best == 0.0 {
        return 0.0;
    }

    let neighbor_offsets = |dim: usize| -> Vec<Vec<i64>> {
        let mut offs = vec![vec![]];
        for _ in 0..dim {
            let mut next = Vec::with_capacity(offs.len() * 3);
            for o in &offs {
                for d in -1..=1i64 {
                    let mut v = o.clone();
                    v.push(d);
                    next.push(v);
                }
            }
            offs = next;
        }
        offs
    };
    let offsets = neighbor_offsets(dim);

    loop {
        let width = best.sqrt();
        let key = |p: &[f64]| -> Vec<i64> {
            p.iter().map(|c| (c / width).floor() as i64).collect()
        };
        let mut grid: HashMap<Vec<i64>, Vec<usize>> = HashMap::new();
        let mut rebuilt = false;
        for i in 0..n {
            let pc = at(i);
            let k = key(pc);
            for off in &offsets {
                let nk: Vec<i64> = k.iter().zip(off).map(|(a, b)| a + b).collect();
                if let Some(bucket) = grid.get(&nk) {
                    for &j in bucket {
                        let d = dist2_slice(pc, at(j));
                        if d < best {
                            best = d;
                            if best == 0.0 {
                                return 0.0;
                            }
                        }
                    }
                }
            }
            grid.entry(k).or_default().push(i);
            // cell width is now more than twice the best distance: restart
            // with a finer grid (amortized: widths shrink geometrically)
            if best.sqrt() < width / 2.0 {
                rebuilt = true;
                break;
            }
        }
        if !rebuilt {
            return best;
        }
    }
}

/// Squared diameter by full scan.
fn diameter_sq(flat: &[f64], n: usize, dim: usize) -> f64 {
    let at = |i: usize| &flat[i * dim..(i + 1) * dim];
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let pi = at(i);
        for j in (i + 1)..n {
            let d = dist2_slice(pi, at(j));
            if d > worst {
                worst = d;
            }
        }
    }
    worst
}

/// Reads a point file: one point per line, whitespace-separated decimals,
/// line number = id. Rows with a deviating value count are rejected.
pub fn load_points(path: &Path) -> Result<Vec<Point>, GeomError> {
    let text = std::fs::read_to_string(path).map_err(|e| GeomError::Io(e.to_string()))?;
    parse_points(&text)
}

/// Parses point-file content. Blank lines are only tolerated at the end.
pub fn parse_points(text: &str) -> Result<Vec<Point>, GeomError> {
    let mut points: Vec<Point> = Vec::new();
    let mut expected: Option<usize> = None;
    let mut blank_since: Option<usize> = None;
    for (lineno, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            blank_since.get_or_insert(lineno);
            continue;
        }
        if let Some(b) = blank_since {
            return Err(GeomError::InvalidInput(format!(
                "blank line {} before data line {}",
                b + 1,
                lineno + 1
            )));
        }
        let mut coords = Vec::new();
        for tok in trimmed.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| {
                GeomError::InvalidInput(format!("line {}: bad number {tok:?}", lineno + 1))
            })?;
            coords.push(v);
        }
        if let Some(e) = expected {
            if coords.len() != e {
                return Err(GeomError::RaggedRow {
                    line: lineno + 1,
                    expected: e,
                    found: coords.len(),
                });
            }
        } else {
            expected = Some(coords.len());
        }
        points.push(Point::new(points.len() as PointId, coords));
    }
    if points.is_empty() {
        return Err(GeomError::InvalidInput("empty point file".into()));
    }
    Ok(points)
}
