//! Random point blocks: selection, ground-truth boxes and the mapping from
//! scene coordinates into the object expert's unit space.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, aabb_params, normalize_unit, rotate_about_up, Box3D, CenterMode, NormalizeMode, Point, PointSet};
use crate::rng::{self, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlockConfig {
    /// Blocks per scene.
    pub num_blocks: usize,
    /// Points per block.
    pub points_per_block: usize,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            num_blocks: 8,
            points_per_block: 128,
        }
    }
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 {
            return Err(Error::invalid("num_blocks must be at least 1"));
        }
        if self.points_per_block < 8 {
            return Err(Error::invalid("points_per_block must be at least 8"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockSet {
    pub center_indices: Vec<usize>,
    /// One row of scene indices per block, nearest first.
    pub member_indices: Vec<Vec<usize>>,
}

impl BlockSet {
    pub fn len(&self) -> usize {
        self.center_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.center_indices.is_empty()
    }

    pub fn block_points(&self, scene: &PointSet, i: usize) -> Result<PointSet> {
        scene.select(&self.member_indices[i])
    }
}

/// Draws `num_blocks` distinct centers uniformly and gathers each one's
/// `points_per_block` nearest neighbours.
pub fn sample_blocks(scene: &PointSet, cfg: &BlockConfig, seed: u64) -> Result<BlockSet> {
    cfg.validate()?;
    let n = scene.len();
    if n < cfg.num_blocks.max(cfg.points_per_block) {
        return Err(Error::invalid(format!(
            "scene of {n} points cannot supply {} blocks of {} points",
            cfg.num_blocks, cfg.points_per_block
        )));
    }
    let mut r = rng::stream(seed, Stream::BlockCenters, &[]);
    let centers = rand::seq::index::sample(&mut r, n, cfg.num_blocks).into_vec();
    let members = centers
        .iter()
        .map(|&c| geom::knn(scene, scene.get(c), cfg.points_per_block))
        .collect::<Result<Vec<_>>>()?;
    Ok(BlockSet {
        center_indices: centers,
        member_indices: members,
    })
}

/// Per-block box from the block's scene-space points.
pub fn gt_boxes(bs: &BlockSet, scene: &PointSet, mode: CenterMode) -> Result<Vec<Box3D>> {
    (0..bs.len())
        .map(|i| Ok(aabb_params(&bs.block_points(scene, i)?, mode)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectTransform {
    pub center: Point,
    pub scale: f64,
    pub rotation_angle: f64,
}

impl ObjectTransform {
    pub fn to_object(&self, p: &Point) -> Point {
        let q: Point = std::array::from_fn(|d| (p[d] - self.center[d]) / self.scale);
        let (s, c) = self.rotation_angle.sin_cos();
        [c * q[0] - s * q[1], s * q[0] + c * q[1], q[2]]
    }

    pub fn to_scene(&self, p: &Point) -> Point {
        let (s, c) = self.rotation_angle.sin_cos();
        let q = [c * p[0] + s * p[1], -s * p[0] + c * p[1], p[2]];
        std::array::from_fn(|d| q[d] * self.scale + self.center[d])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectBlock {
    pub points: PointSet,
    pub transform: ObjectTransform,
}

impl ObjectBlock {
    pub fn to_scene(&self) -> Vec<Point> {
        self.points.points().iter().map(|p| self.transform.to_scene(p)).collect()
    }
}

/// Uniform angle in `[0, 2π)` from the object-rotation stream.
pub fn rotation_angle(seed: u64) -> f64 {
    rng::stream(seed, Stream::ObjectRotation, &[]).gen_range(0.0..std::f64::consts::TAU)
}

/// Subtract the block center, scale into the unit cube, then (optionally)
/// rotate about the up axis by an angle drawn from `rng_seed`.
pub fn to_object_space(points: &PointSet, center: Point, rotate: bool, rng_seed: u64, mode: NormalizeMode) -> ObjectBlock {
    let angle = if rotate { rotation_angle(rng_seed) } else { 0.0 };
    to_object_space_with_angle(points, center, angle, mode)
}

pub fn to_object_space_with_angle(points: &PointSet, center: Point, angle: f64, mode: NormalizeMode) -> ObjectBlock {
    let (unit, t) = normalize_unit(points, center, mode);
    let pts = if angle != 0.0 { rotate_about_up(&unit, angle) } else { unit };
    ObjectBlock {
        points: pts,
        transform: ObjectTransform {
            center,
            scale: t.scale,
            rotation_angle: angle,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(n: usize) -> PointSet {
        PointSet::new((0..n).map(|i| [i as f64 * 0.1, (i % 3) as f64, 0.0]).collect()).unwrap()
    }

    #[test]
    fn whole_scene_block() {
        let s = line(20);
        let cfg = BlockConfig {
            num_blocks: 1,
            points_per_block: 20,
        };
        let bs = sample_blocks(&s, &cfg, 5).unwrap();
        let mut m = bs.member_indices[0].clone();
        m.sort();
        assert_eq!(m, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn centers_are_members_and_deterministic() {
        let s = line(200);
        let cfg = BlockConfig {
            num_blocks: 10,
            points_per_block: 16,
        };
        let bs = sample_blocks(&s, &cfg, 1).unwrap();
        assert_eq!(bs, sample_blocks(&s, &cfg, 1).unwrap());
        let mut distinct = bs.center_indices.clone();
        distinct.sort();
        distinct.dedup();
        assert_eq!(distinct.len(), 10);
        for (c, m) in bs.center_indices.iter().zip(&bs.member_indices) {
            assert!(m.contains(c));
            assert_eq!(geom::sq_dist(&s.get(m[0]), &s.get(*c)), 0.0);
        }
    }

    #[test]
    fn too_few_points() {
        let s = line(10);
        let cfg = BlockConfig {
            num_blocks: 2,
            points_per_block: 11,
        };
        assert!(sample_blocks(&s, &cfg, 0).is_err());
    }

    #[test]
    fn boxes() {
        let s = PointSet::new(vec![[0.0; 3], [2.0, 4.0, 6.0], [1.0; 3], [1.0; 3]]).unwrap();
        let bs = BlockSet {
            center_indices: vec![0, 2],
            member_indices: vec![vec![0, 1], vec![2, 3]],
        };
        let b = gt_boxes(&bs, &s, CenterMode::Mean).unwrap();
        assert_eq!(b[0].center, [1.0, 2.0, 3.0]);
        assert_eq!(b[0].half_extents, [1.0, 2.0, 3.0]);
        assert_eq!(b[1].center, [1.0; 3]);
        assert_eq!(b[1].half_extents, [0.0; 3]);
    }

    #[test]
    fn object_space_examples() {
        let p = PointSet::new(vec![[1.0; 3], [3.0; 3]]).unwrap();
        let ob = to_object_space(&p, [2.0; 3], false, 0, NormalizeMode::MaxAbs);
        assert_eq!(ob.points.points(), &[[-1.0; 3], [1.0; 3]]);
        assert_eq!(ob.transform.scale, 1.0);

        let deg = PointSet::new(vec![[4.0; 3]; 5]).unwrap();
        let ob = to_object_space(&deg, [4.0; 3], true, 3, NormalizeMode::MaxAbs);
        assert_eq!(ob.transform.scale, 1.0);
        assert!(ob.points.points().iter().all(|q| q.iter().all(|c| c.abs() < 1e-15)));
    }

    #[test]
    fn object_space_roundtrip() {
        let p = PointSet::new(vec![[1.0, 5.0, 0.2], [3.0, 2.0, 1.0], [2.5, 4.0, 0.7]]).unwrap();
        let ob = to_object_space(&p, [2.5, 4.0, 0.7], true, 11, NormalizeMode::MaxAbs);
        for (a, b) in ob.to_scene().iter().zip(p.points()) {
            for d in 0..3 {
                assert!((a[d] - b[d]).abs() < 1e-12);
            }
        }
        let q = ob.transform.to_object(&p.get(0));
        for d in 0..3 {
            assert!((q[d] - ob.points.get(0)[d]).abs() < 1e-12);
        }
    }
}
