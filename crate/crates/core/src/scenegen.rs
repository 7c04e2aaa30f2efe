//! Synthetic indoor scenes and single-object shapes with exact labels.
//!
//! A scene is a rectangular room (floor at z = 0, four walls) holding a few
//! scaled primitive shapes that never overlap in the floor plane. Every output
//! is a pure function of the spec and the seed.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geom::{aabb_params, rotate_about_up, Box3D, CenterMode, Point, PointSet};
use crate::rng::{self, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    BoxSurface,
    SphereSurface,
    CylinderSurface,
    ConeSurface,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 4] = [
        ShapeClass::BoxSurface,
        ShapeClass::SphereSurface,
        ShapeClass::CylinderSurface,
        ShapeClass::ConeSurface,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::BoxSurface => "box_surface",
            ShapeClass::SphereSurface => "sphere_surface",
            ShapeClass::CylinderSurface => "cylinder_surface",
            ShapeClass::ConeSurface => "cone_surface",
        }
    }
}

/// `n` points on the surface of a unit-scale shape centered at the origin.
///
/// Box: the cube `[-1,1]^3`. Sphere: radius 1. Cylinder: radius 1, height 2,
/// with caps. Cone: base radius 1 at z = -1, apex at z = 1, with base disk.
/// Sampling is uniform by area.
pub fn gen_shape(class: ShapeClass, n: usize, seed: u64) -> Result<PointSet> {
    if n < 8 {
        return Err(Error::invalid(format!("gen_shape needs at least 8 points, got {n}")));
    }
    let mut r = rng::stream(seed, Stream::Shape, &[class.index() as u64, n as u64]);
    let pts = (0..n).map(|_| sample_surface(class, &mut r)).collect();
    PointSet::new(pts)
}

fn sample_surface(class: ShapeClass, r: &mut impl Rng) -> Point {
    use std::f64::consts::{PI, TAU};
    match class {
        ShapeClass::BoxSurface => {
            let face = r.gen_range(0..6);
            let axis = face / 2;
            let sign = if face % 2 == 0 { -1.0 } else { 1.0 };
            let mut p: Point = [r.gen_range(-1.0..=1.0), r.gen_range(-1.0..=1.0), r.gen_range(-1.0..=1.0)];
            p[axis] = sign;
            p
        }
        ShapeClass::SphereSurface => loop {
            let v: [f64; 3] = [
                StandardNormal.sample(r),
                StandardNormal.sample(r),
                StandardNormal.sample(r),
            ];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if n > 1e-9 {
                break [v[0] / n, v[1] / n, v[2] / n];
            }
        },
        ShapeClass::CylinderSurface => {
            // side 4π, caps 2π
            let theta = r.gen_range(0.0..TAU);
            if r.gen_bool(2.0 / 3.0) {
                [theta.cos(), theta.sin(), r.gen_range(-1.0..=1.0)]
            } else {
                let rad = r.gen::<f64>().sqrt();
                let z = if r.gen_bool(0.5) { 1.0 } else { -1.0 };
                [rad * theta.cos(), rad * theta.sin(), z]
            }
        }
        ShapeClass::ConeSurface => {
            // lateral π√5, base π
            let theta = r.gen_range(0.0..TAU);
            let lateral = PI * 5f64.sqrt();
            if r.gen_bool(lateral / (lateral + PI)) {
                let t = r.gen::<f64>().sqrt();
                [t * theta.cos(), t * theta.sin(), 1.0 - 2.0 * t]
            } else {
                let rad = r.gen::<f64>().sqrt();
                [rad * theta.cos(), rad * theta.sin(), -1.0]
            }
        }
    }
}

/// Scene generation parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub num_points: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Room size along x, y, z. The floor spans `[-x/2, x/2] × [-y/2, y/2]` at z = 0.
    pub extent: [f64; 3],
    /// Fraction of points on the floor and walls when the scene holds objects.
    pub clutter_ratio: f64,
    /// Range of object half extents.
    pub object_half_min: f64,
    pub object_half_max: f64,
    /// Standard deviation of the noise on floor heights and wall offsets.
    pub surface_noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            num_points: 2048,
            min_objects: 4,
            max_objects: 8,
            extent: [8.0, 8.0, 3.0],
            clutter_ratio: 0.3,
            object_half_min: 0.35,
            object_half_max: 0.9,
            surface_noise: 0.02,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.min_objects > self.max_objects {
            return Err(Error::invalid("min_objects exceeds max_objects"));
        }
        if !(0.0..=1.0).contains(&self.clutter_ratio) {
            return Err(Error::invalid("clutter_ratio must be in [0, 1]"));
        }
        if self.extent.iter().any(|e| *e <= 0.0 || !e.is_finite()) {
            return Err(Error::invalid("room extent must be positive"));
        }
        if !(0.0 < self.object_half_min && self.object_half_min <= self.object_half_max) {
            return Err(Error::invalid("object half-extent range is empty"));
        }
        if 2.0 * self.object_half_max > self.extent[2] {
            return Err(Error::invalid("objects taller than the room"));
        }
        let n_obj = self.num_points - self.background_points(self.max_objects);
        if self.max_objects > 0 && n_obj / self.max_objects < 8 {
            return Err(Error::invalid(format!(
                "{} points cannot host {} objects of at least 8 points",
                self.num_points, self.max_objects
            )));
        }
        if self.num_points == 0 {
            return Err(Error::invalid("num_points must be positive"));
        }
        Ok(())
    }

    fn background_points(&self, objects: usize) -> usize {
        if objects == 0 {
            self.num_points
        } else {
            ((self.num_points as f64) * self.clutter_ratio).round() as usize
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlacedObject {
    pub class: ShapeClass,
    /// Midpoint box of the object's sampled points.
    pub gt_box: Box3D,
    /// Where the object's points sit inside [`Scene::points`].
    pub point_range: Range<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub points: PointSet,
    pub objects: Vec<PlacedObject>,
    pub seed: u64,
}

impl Scene {
    /// SHA-256 over the little-endian coordinates.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in self.points.points() {
            for c in p {
                h.update(c.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

const PLACEMENT_TRIES: usize = 1000;
const FOOTPRINT_GAP: f64 = 0.1;

pub fn gen_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let mut r = rng::stream(seed, Stream::Scene, &[]);
    let count = r.gen_range(spec.min_objects..=spec.max_objects);
    let [ex, ey, ez] = spec.extent;
    let (hx, hy) = (ex / 2.0, ey / 2.0);

    // footprints first, so an infeasible layout fails before any sampling
    let mut placed: Vec<(ShapeClass, Point, [f64; 3])> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut ok = false;
        for _ in 0..PLACEMENT_TRIES {
            let half = [
                r.gen_range(spec.object_half_min..=spec.object_half_max),
                r.gen_range(spec.object_half_min..=spec.object_half_max),
                r.gen_range(spec.object_half_min..=spec.object_half_max),
            ];
            if half[0] >= hx || half[1] >= hy {
                continue;
            }
            let c = [
                r.gen_range(-hx + half[0]..=hx - half[0]),
                r.gen_range(-hy + half[1]..=hy - half[1]),
                half[2],
            ];
            let clear = placed.iter().all(|(_, oc, oh)| {
                (c[0] - oc[0]).abs() >= half[0] + oh[0] + FOOTPRINT_GAP
                    || (c[1] - oc[1]).abs() >= half[1] + oh[1] + FOOTPRINT_GAP
            });
            if clear {
                let class = ShapeClass::ALL[r.gen_range(0..4)];
                placed.push((class, c, half));
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::Generation(format!(
                "could not place object {} of {count} after {PLACEMENT_TRIES} tries",
                placed.len() + 1
            )));
        }
    }

    let n_bg = spec.background_points(count);
    let n_obj_total = spec.num_points - n_bg;
    let mut points: Vec<Point> = Vec::with_capacity(spec.num_points);
    let mut objects = Vec::with_capacity(count);
    for (i, (class, c, half)) in placed.into_iter().enumerate() {
        let n_i = n_obj_total / count + usize::from(i < n_obj_total % count);
        let shape_seed = rng::derive(seed, Stream::Shape, &[i as u64]);
        let unit = gen_shape(class, n_i, shape_seed)?;
        let start = points.len();
        points.extend(
            unit.points()
                .iter()
                .map(|p| [c[0] + p[0] * half[0], c[1] + p[1] * half[1], c[2] + p[2] * half[2]]),
        );
        let range = start..points.len();
        let own = PointSet::new(points[range.clone()].to_vec())?;
        objects.push(PlacedObject {
            class,
            gt_box: aabb_params(&own, CenterMode::Midpoint),
            point_range: range,
        });
    }

    let noise = Normal::new(0.0, spec.surface_noise.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let n_floor = (n_bg as f64 * 0.7).round() as usize;
    for k in 0..n_bg {
        if k < n_floor {
            points.push([r.gen_range(-hx..=hx), r.gen_range(-hy..=hy), noise.sample(&mut r).abs()]);
        } else {
            // walls chosen by length
            let along = r.gen_range(0.0..2.0 * (ex + ey));
            let z = r.gen_range(0.0..=ez);
            let off = noise.sample(&mut r);
            let p = if along < ex {
                [along - hx, -hy - off.abs(), z]
            } else if along < 2.0 * ex {
                [along - ex - hx, hy + off.abs(), z]
            } else if along < 2.0 * ex + ey {
                [-hx - off.abs(), along - 2.0 * ex - hy, z]
            } else {
                [hx + off.abs(), along - 2.0 * ex - ey - hy, z]
            };
            points.push(p);
        }
    }
    Ok(Scene {
        points: PointSet::new(points)?,
        objects,
        seed,
    })
}

/// Seed ranges for the three splits.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSeeds {
    pub train: Range<u64>,
    pub val: Range<u64>,
    pub test: Range<u64>,
}

impl SplitSeeds {
    /// Cuts `seeds` into consecutive train/val/test ranges by fraction;
    /// the test split takes the remainder.
    pub fn proportional(seeds: Range<u64>, train_frac: f64, val_frac: f64) -> Self {
        let n = seeds.end.saturating_sub(seeds.start);
        let n_train = (n as f64 * train_frac).round() as u64;
        let n_val = ((n as f64 * val_frac).round() as u64).min(n - n_train);
        let a = seeds.start + n_train;
        let b = a + n_val;
        Self {
            train: seeds.start..a,
            val: a..b,
            test: b..seeds.end,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rs = [("train", &self.train), ("val", &self.val), ("test", &self.test)];
        for i in 0..3 {
            for j in i + 1..3 {
                let (a, b) = (rs[i].1, rs[j].1);
                if a.start < b.end && b.start < a.end {
                    return Err(Error::invalid(format!(
                        "{} seeds {:?} overlap {} seeds {:?}",
                        rs[i].0, a, rs[j].0, b
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
    pub test: Vec<Scene>,
}

pub fn gen_scenes(spec: &SceneSpec, seeds: Range<u64>) -> Result<Vec<Scene>> {
    seeds.into_par_iter().map(|s| gen_scene(spec, s)).collect()
}

pub fn make_splits(spec: &SceneSpec, seeds: &SplitSeeds) -> Result<Splits> {
    seeds.validate()?;
    Ok(Splits {
        train: gen_scenes(spec, seeds.train.clone())?,
        val: gen_scenes(spec, seeds.val.clone())?,
        test: gen_scenes(spec, seeds.test.clone())?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledShape {
    pub points: PointSet,
    pub class: ShapeClass,
}

/// A class-balanced shape set: `per_class` shapes of each class, each rotated
/// about the up axis by a random angle. Ordered by sample then class.
pub fn gen_shape_dataset(per_class: usize, points: usize, seed: u64) -> Result<Vec<LabeledShape>> {
    (0..per_class)
        .into_par_iter()
        .flat_map_iter(|i| ShapeClass::ALL.into_iter().map(move |c| (i, c)))
        .map(|(i, class)| {
            let s = rng::derive(seed, Stream::Shape, &[i as u64, class.index() as u64]);
            let base = gen_shape(class, points, s)?;
            let angle = rng::stream(s, Stream::ObjectRotation, &[]).gen_range(0.0..std::f64::consts::TAU);
            Ok(LabeledShape {
                points: rotate_about_up(&base, angle),
                class,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_on_their_surfaces() {
        let s = gen_shape(ShapeClass::SphereSurface, 300, 1).unwrap();
        for p in s.points() {
            let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        let b = gen_shape(ShapeClass::BoxSurface, 300, 1).unwrap();
        for p in b.points() {
            assert!(p.iter().any(|c| (c.abs() - 1.0).abs() < 1e-6));
        }
        for class in ShapeClass::ALL {
            let s = gen_shape(class, 200, 9).unwrap();
            assert!(s.max_abs() <= 1.0 + 1e-12, "{class:?}");
        }
    }

    #[test]
    fn shape_determinism_and_minimum() {
        let a = gen_shape(ShapeClass::ConeSurface, 64, 42).unwrap();
        let b = gen_shape(ShapeClass::ConeSurface, 64, 42).unwrap();
        assert_eq!(a, b);
        assert!(gen_shape(ShapeClass::ConeSurface, 7, 42).is_err());
    }

    #[test]
    fn empty_scene_is_background_only() {
        let spec = SceneSpec {
            min_objects: 0,
            max_objects: 0,
            ..SceneSpec::default()
        };
        let s = gen_scene(&spec, 3).unwrap();
        assert!(s.objects.is_empty());
        assert_eq!(s.points.len(), spec.num_points);
    }

    #[test]
    fn scene_contract() {
        let spec = SceneSpec::default();
        for seed in 0..5 {
            let s = gen_scene(&spec, seed).unwrap();
            assert_eq!(s.points.len(), spec.num_points);
            assert!((spec.min_objects..=spec.max_objects).contains(&s.objects.len()));
            for o in &s.objects {
                let pts = &s.points.points()[o.point_range.clone()];
                assert!(o.gt_box.encloses(pts, 1e-12));
            }
            assert_eq!(s, gen_scene(&spec, seed).unwrap());
        }
    }

    #[test]
    fn infeasible_placement_fails() {
        let spec = SceneSpec {
            extent: [2.0, 2.0, 3.0],
            min_objects: 8,
            max_objects: 8,
            ..SceneSpec::default()
        };
        assert!(matches!(gen_scene(&spec, 0), Err(Error::Generation(_))));
    }

    #[test]
    fn splits() {
        let seeds = SplitSeeds::proportional(0..100, 0.8, 0.1);
        assert_eq!(seeds.train.end - seeds.train.start, 80);
        assert_eq!(seeds.val.end - seeds.val.start, 10);
        assert_eq!(seeds.test.end - seeds.test.start, 10);
        seeds.validate().unwrap();
        let bad = SplitSeeds {
            train: 0..10,
            val: 5..12,
            test: 20..30,
        };
        assert!(bad.validate().is_err());
        let spec = SceneSpec {
            num_points: 256,
            ..SceneSpec::default()
        };
        let small = SplitSeeds::proportional(0..10, 0.8, 0.1);
        let a = make_splits(&spec, &small).unwrap();
        let b = make_splits(&spec, &small).unwrap();
        let sums = |v: &[Scene]| v.iter().map(Scene::checksum).collect::<Vec<_>>();
        assert_eq!(sums(&a.train), sums(&b.train));
        assert_eq!(a.train.len(), 8);
        assert!(a.train.iter().all(|s| a.test.iter().all(|t| t.seed != s.seed)));
    }

    #[test]
    fn shape_dataset_balanced() {
        let d = gen_shape_dataset(3, 64, 1).unwrap();
        assert_eq!(d.len(), 12);
        for c in ShapeClass::ALL {
            assert_eq!(d.iter().filter(|s| s.class == c).count(), 3);
        }
    }
}
