//! Geometric primitives: point sets, axis-aligned boxes, farthest point
//! sampling, k-nearest neighbours, Chamfer distance and GIoU.
//!
//! Every function here is a pure function of its inputs. Distances are
//! compared as squared Euclidean distances, and all index ties resolve to the
//! lowest index so results are reproducible bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 3];

#[inline]
pub fn sq_dist(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// A non-empty set of finite 3D points.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    points: Vec<Point>,
}

impl PointSet {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("point set must contain at least one point"));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::invalid(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn get(&self, i: usize) -> Point {
        self.points[i]
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    /// Copies out the points at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<PointSet> {
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices {
            let p = self
                .points
                .get(i)
                .ok_or_else(|| Error::invalid(format!("index {i} out of range for {} points", self.len())))?;
            out.push(*p);
        }
        PointSet::new(out)
    }

    /// Maximum absolute coordinate over all points and axes.
    pub fn max_abs(&self) -> f64 {
        self.points
            .iter()
            .flat_map(|p| p.iter())
            .fold(0.0_f64, |m, c| m.max(c.abs()))
    }
}

/// How [`aabb_params`] picks the box center.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterMode {
    /// Per-axis mean of the points. The resulting box need not enclose them.
    #[default]
    Mean,
    /// Per-axis (min + max) / 2, which always encloses the points.
    Midpoint,
}

/// Axis-aligned box stored as center and non-negative half extents.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box3D {
    pub center: Point,
    pub half_extents: [f64; 3],
}

impl Box3D {
    pub fn new(center: Point, half_extents: [f64; 3]) -> Result<Self> {
        if center.iter().chain(half_extents.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("box parameters must be finite"));
        }
        if half_extents.iter().any(|&h| h < 0.0) {
            return Err(Error::invalid(format!("negative half extent in {half_extents:?}")));
        }
        Ok(Self {
            center,
            half_extents,
        })
    }

    pub fn min_corner(&self) -> Point {
        std::array::from_fn(|d| self.center[d] - self.half_extents[d])
    }

    pub fn max_corner(&self) -> Point {
        std::array::from_fn(|d| self.center[d] + self.half_extents[d])
    }

    /// The 8 corners. Corner `i` takes the `+` side on axis `d` when bit `d`
    /// of `i` is set, so corner 0 is the min corner and corner 7 the max.
    pub fn corners(&self) -> [Point; 8] {
        std::array::from_fn(|i| {
            std::array::from_fn(|d| {
                if (i >> d) & 1 == 1 {
                    self.center[d] + self.half_extents[d]
                } else {
                    self.center[d] - self.half_extents[d]
                }
            })
        })
    }

    pub fn volume(&self) -> f64 {
        8.0 * self.half_extents[0] * self.half_extents[1] * self.half_extents[2]
    }

    pub fn translated(&self, t: Point) -> Box3D {
        Box3D {
            center: std::array::from_fn(|d| self.center[d] + t[d]),
            half_extents: self.half_extents,
        }
    }

    /// True when every point lies inside the closed box.
    pub fn encloses(&self, points: &[Point], tol: f64) -> bool {
        let lo = self.min_corner();
        let hi = self.max_corner();
        points
            .iter()
            .all(|p| (0..3).all(|d| p[d] >= lo[d] - tol && p[d] <= hi[d] + tol))
    }

    /// Center then half extents, the layout used by the box head.
    pub fn to_array(&self) -> [f64; 6] {
        let c = self.center;
        let h = self.half_extents;
        [c[0], c[1], c[2], h[0], h[1], h[2]]
    }
}

/// Farthest point sampling starting at `seed_index`.
pub fn fps(points: &PointSet, m: usize, seed_index: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if m == 0 || m > n {
        return Err(Error::invalid(format!("fps: m = {m} must be in 1..={n}")));
    }
    if seed_index >= n {
        return Err(Error::invalid(format!("fps: seed index {seed_index} out of range for {n} points")));
    }
    let pts = points.points();
    let mut selected = Vec::with_capacity(m);
    selected.push(seed_index);
    let mut min_d: Vec<f64> = pts.iter().map(|p| sq_dist(p, &pts[seed_index])).collect();
    while selected.len() < m {
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &d) in min_d.iter().enumerate() {
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        selected.push(best);
        let anchor = pts[best];
        for (d, p) in min_d.iter_mut().zip(pts) {
            let nd = sq_dist(p, &anchor);
            if nd < *d {
                *d = nd;
            }
        }
    }
    Ok(selected)
}

/// The `k` nearest points to `query`, sorted by (distance, index).
pub fn knn(points: &PointSet, query: Point, k: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("knn: k = {k} must be in 1..={n}")));
    }
    let d: Vec<f64> = points.points().iter().map(|p| sq_dist(p, &query)).collect();
    let cmp = |a: &usize, b: &usize| d[*a].total_cmp(&d[*b]).then(a.cmp(b));
    let mut idx: Vec<usize> = (0..n).collect();
    if k < n {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    Ok(idx)
}

/// Box from per-axis extents of a point set; see [`CenterMode`].
pub fn aabb_params(points: &PointSet, mode: CenterMode) -> Box3D {
    let pts = points.points();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    let mut sum = [0.0; 3];
    for p in pts {
        for d in 0..3 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
            sum[d] += p[d];
        }
    }
    let n = pts.len() as f64;
    let center = match mode {
        CenterMode::Mean => std::array::from_fn(|d| sum[d] / n),
        CenterMode::Midpoint => std::array::from_fn(|d| (lo[d] + hi[d]) / 2.0),
    };
    Box3D {
        center,
        half_extents: std::array::from_fn(|d| (hi[d] - lo[d]) / 2.0),
    }
}

/// For every point of `a`, the index of its nearest point in `b` (lowest index on ties),
/// and the squared distance.
pub fn nearest_in(a: &[Point], b: &[Point]) -> Vec<(usize, f64)> {
    a.iter()
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for (j, q) in b.iter().enumerate() {
                let d = sq_dist(p, q);
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .collect()
}

/// Symmetric Chamfer distance: mean squared nearest distance from `a` to `b`
/// plus the same from `b` to `a`.
pub fn chamfer(a: &[Point], b: &[Point]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("chamfer: both point sets must be non-empty"));
    }
    let mut row_min = vec![f64::INFINITY; a.len()];
    let mut col_min = vec![f64::INFINITY; b.len()];
    for (i, p) in a.iter().enumerate() {
        for (j, q) in b.iter().enumerate() {
            let d = sq_dist(p, q);
            if d < row_min[i] {
                row_min[i] = d;
            }
            if d < col_min[j] {
                col_min[j] = d;
            }
        }
    }
    let ab: f64 = row_min.iter().sum::<f64>() / a.len() as f64;
    let ba: f64 = col_min.iter().sum::<f64>() / b.len() as f64;
    Ok(ab + ba)
}

/// Volumes needed by IoU-style metrics: (intersection, union, enclosure).
fn overlap_volumes(a: &Box3D, b: &Box3D) -> (f64, f64, f64) {
    let (alo, ahi) = (a.min_corner(), a.max_corner());
    let (blo, bhi) = (b.min_corner(), b.max_corner());
    let mut inter = 1.0;
    let mut encl = 1.0;
    for d in 0..3 {
        inter *= (ahi[d].min(bhi[d]) - alo[d].max(blo[d])).max(0.0);
        encl *= ahi[d].max(bhi[d]) - alo[d].min(blo[d]);
    }
    let union = a.volume() + b.volume() - inter;
    (inter, union, encl)
}

/// Plain 3D IoU. Two zero-volume boxes score 1 when identical and 0 otherwise.
pub fn iou(a: &Box3D, b: &Box3D) -> f64 {
    let (inter, union, _) = overlap_volumes(a, b);
    if union <= 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    inter / union
}

/// Generalized IoU of two axis-aligned boxes.
///
/// Degenerate rules: with zero union volume, identical boxes give 1 and any
/// other pair has IoU 0; the enclosure penalty is then -1 when the enclosure
/// has volume and 0 when it is flat too.
pub fn giou(a: &Box3D, b: &Box3D) -> f64 {
    let (inter, union, encl) = overlap_volumes(a, b);
    if union <= 0.0 {
        if a == b {
            return 1.0;
        }
        return if encl > 0.0 { -1.0 } else { 0.0 };
    }
    let iou = inter / union;
    if encl <= 0.0 {
        return iou;
    }
    iou - (encl - union) / encl
}

/// Rigid rotation about the z (up) axis.
pub fn rotate_about_up(points: &PointSet, angle: f64) -> PointSet {
    let (s, c) = angle.sin_cos();
    let pts = points
        .points()
        .iter()
        .map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]])
        .collect();
    PointSet { points: pts }
}

/// How [`normalize_unit`] measures the spread that maps to 1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizeMode {
    /// Largest absolute coordinate on any axis.
    #[default]
    MaxAbs,
    /// Largest of the x-y radius and |z|; keeps [-1,1] under any up-axis rotation.
    Radial,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitTransform {
    pub centroid: Point,
    pub scale: f64,
}

impl UnitTransform {
    pub fn apply(&self, p: &Point) -> Point {
        std::array::from_fn(|d| (p[d] - self.centroid[d]) / self.scale)
    }

    pub fn invert(&self, p: &Point) -> Point {
        std::array::from_fn(|d| p[d] * self.scale + self.centroid[d])
    }
}

/// Maps `points` into the unit cube about `centroid` with one isotropic
/// scale. An all-coincident set uses scale 1.
pub fn normalize_unit(points: &PointSet, centroid: Point, mode: NormalizeMode) -> (PointSet, UnitTransform) {
    let mut scale = 0.0_f64;
    for p in points.points() {
        let r: [f64; 3] = std::array::from_fn(|d| p[d] - centroid[d]);
        let s = match mode {
            NormalizeMode::MaxAbs => r[0].abs().max(r[1].abs()).max(r[2].abs()),
            NormalizeMode::Radial => r[0].hypot(r[1]).max(r[2].abs()),
        };
        scale = scale.max(s);
    }
    if scale <= 0.0 || !scale.is_finite() {
        scale = 1.0;
    }
    let t = UnitTransform { centroid, scale };
    let pts = points.points().iter().map(|p| t.apply(p)).collect();
    (PointSet { points: pts }, t)
}

/// Per-axis mean of the points.
pub fn centroid(points: &PointSet) -> Point {
    let n = points.len() as f64;
    let mut s = [0.0; 3];
    for p in points.points() {
        for d in 0..3 {
            s[d] += p[d];
        }
    }
    s.map(|v| v / n)
}
