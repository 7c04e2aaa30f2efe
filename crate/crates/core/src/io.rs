//! Point-cloud files, dataset directories and their checksummed manifest.
//!
//! Layout written by [`save_dataset`]:
//!
//! ```text
//! manifest.toml
//! scenes/{train,val,test}/scene_<seed>.pmd
//! shapes/{train,test}/shape_<index>_<class>.xyz
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geom::{Point, PointSet};
use crate::scenegen::{gen_scenes, gen_shape_dataset, LabeledShape, Scene, ShapeClass};

pub const POINTS_MAGIC: &[u8; 4] = b"PMD1";
pub const MANIFEST_VERSION: u32 = 1;

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// One `x y z` line per point, shortest round-trip decimal form.
pub fn points_to_text(points: &[Point]) -> String {
    let mut s = String::with_capacity(points.len() * 32);
    for p in points {
        s.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    s
}

pub fn points_from_text(text: &str, path: &Path) -> Result<PointSet> {
    let bad = |line: usize, msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: format!("line {line}: {msg}"),
    };
    let mut pts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad(i + 1, "expected three numbers"))?;
        if vals.len() != 3 {
            return Err(bad(i + 1, "expected three numbers"));
        }
        pts.push([vals[0], vals[1], vals[2]]);
    }
    PointSet::new(pts).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// `PMD1`, little-endian u32 count, then f32 triplets.
pub fn points_to_bytes(points: &[Point]) -> Vec<u8> {
    let mut b = Vec::with_capacity(8 + points.len() * 12);
    b.extend_from_slice(POINTS_MAGIC);
    b.extend_from_slice(&(points.len() as u32).to_le_bytes());
    for p in points {
        for c in p {
            b.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    b
}

pub fn points_from_bytes(bytes: &[u8], path: &Path) -> Result<PointSet> {
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < 8 || &bytes[..4] != POINTS_MAGIC {
        return Err(bad("missing PMD1 header".into()));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    if bytes.len() != 8 + n * 12 {
        return Err(bad(format!("header says {n} points, file holds {} bytes", bytes.len())));
    }
    let pts = bytes[8..]
        .chunks_exact(12)
        .map(|c| std::array::from_fn(|d| f32::from_le_bytes(c[d * 4..d * 4 + 4].try_into().expect("4 bytes")) as f64))
        .collect();
    PointSet::new(pts).map_err(|e| bad(e.to_string()))
}

pub fn write_points(path: &Path, points: &[Point]) -> Result<()> {
    let bytes = match path.extension().and_then(|e| e.to_str()) {
        Some("pmd") => points_to_bytes(points),
        _ => points_to_text(points).into_bytes(),
    };
    write_atomic(path, &bytes)
}

pub fn read_points(path: &Path) -> Result<PointSet> {
    let bytes = read_bytes(path)?;
    decode_points(&bytes, path)
}

fn decode_points(bytes: &[u8], path: &Path) -> Result<PointSet> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pmd") => points_from_bytes(bytes, path),
        _ => {
            let text = std::str::from_utf8(bytes).map_err(|_| Error::Format {
                path: path.to_path_buf(),
                msg: "not UTF-8 text".into(),
            })?;
            points_from_text(text, path)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Relative to the dataset directory.
    pub path: String,
    pub sha256: String,
    pub split: String,
    /// Scene seed, or shape index.
    pub id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub scenes: Vec<ManifestEntry>,
    pub shapes: Vec<ManifestEntry>,
    /// Resolved configuration that produced the data.
    pub config: String,
}

impl Manifest {
    pub fn scene_count(&self, split: &str) -> usize {
        self.scenes.iter().filter(|e| e.split == split).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
    pub test: Vec<Scene>,
    pub shapes_train: Vec<LabeledShape>,
    pub shapes_test: Vec<LabeledShape>,
}

/// Seeds of the three scene splits, consecutive from the run seed.
pub fn split_seeds(cfg: &RunConfig) -> [std::ops::Range<u64>; 3] {
    let d = &cfg.data;
    let a = cfg.seed.wrapping_mul(1_000_003) >> 8;
    let b = a + d.train_scenes as u64;
    let c = b + d.val_scenes as u64;
    [a..b, b..c, c..c + d.test_scenes as u64]
}

pub fn gen_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let d = &cfg.data;
    let [tr, va, te] = split_seeds(cfg);
    let shape_seed = crate::rng::derive(cfg.seed, crate::rng::Stream::Shape, &[]);
    Ok(Dataset {
        train: gen_scenes(&d.scene, tr)?,
        val: gen_scenes(&d.scene, va)?,
        test: gen_scenes(&d.scene, te)?,
        shapes_train: gen_shape_dataset(d.shapes_train_per_class, d.shape_points, shape_seed)?,
        shapes_test: gen_shape_dataset(d.shapes_test_per_class, d.shape_points, shape_seed ^ 1)?,
    })
}

pub fn save_dataset(dir: &Path, ds: &Dataset, cfg: &RunConfig) -> Result<Manifest> {
    let mut scenes = Vec::new();
    for (split, list) in [("train", &ds.train), ("val", &ds.val), ("test", &ds.test)] {
        for s in list {
            let rel = format!("scenes/{split}/scene_{}.pmd", s.seed);
            let bytes = points_to_bytes(s.points.points());
            write_atomic(&dir.join(&rel), &bytes)?;
            scenes.push(ManifestEntry {
                path: rel,
                sha256: sha256_hex(&bytes),
                split: split.into(),
                id: s.seed,
                class: None,
            });
        }
    }
    let mut shapes = Vec::new();
    for (split, list) in [("train", &ds.shapes_train), ("test", &ds.shapes_test)] {
        for (i, s) in list.iter().enumerate() {
            let rel = format!("shapes/{split}/shape_{i}_{}.xyz", s.class.name());
            let bytes = points_to_text(s.points.points()).into_bytes();
            write_atomic(&dir.join(&rel), &bytes)?;
            shapes.push(ManifestEntry {
                path: rel,
                sha256: sha256_hex(&bytes),
                split: split.into(),
                id: i as u64,
                class: Some(s.class.name().into()),
            });
        }
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed: cfg.seed,
        scenes,
        shapes,
        config: cfg.echo(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::invalid(e.to_string()))?;
    write_atomic(&dir.join("manifest.toml"), text.as_bytes())?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.toml");
    if !path.exists() {
        return Err(Error::Format {
            path,
            msg: "dataset manifest not found (run gen-data first)".into(),
        });
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = toml::from_str(&text).map_err(|e| Error::Format {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    if m.version > MANIFEST_VERSION {
        return Err(Error::Version {
            found: m.version,
            supported: MANIFEST_VERSION,
        });
    }
    Ok(m)
}

fn load_entry(dir: &Path, e: &ManifestEntry) -> Result<PointSet> {
    let path = dir.join(&e.path);
    let bytes = read_bytes(&path)?;
    let found = sha256_hex(&bytes);
    if found != e.sha256 {
        return Err(Error::Checksum {
            path,
            expected: e.sha256.clone(),
            found,
        });
    }
    decode_points(&bytes, &path)
}

/// Loads every file listed in the manifest, verifying checksums. Loaded
/// scenes carry their seed but no object annotations.
pub fn load_dataset(dir: &Path) -> Result<(Dataset, Manifest)> {
    let m = load_manifest(dir)?;
    let mut ds = Dataset {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        shapes_train: Vec::new(),
        shapes_test: Vec::new(),
    };
    for e in &m.scenes {
        let scene = Scene {
            points: load_entry(dir, e)?,
            objects: Vec::new(),
            seed: e.id,
        };
        match e.split.as_str() {
            "train" => ds.train.push(scene),
            "val" => ds.val.push(scene),
            "test" => ds.test.push(scene),
            other => return Err(Error::invalid(format!("unknown split `{other}` in manifest"))),
        }
    }
    for e in &m.shapes {
        let name = e.class.as_deref().unwrap_or_default();
        let class = ShapeClass::ALL
            .into_iter()
            .find(|c| c.name() == name)
            .ok_or_else(|| Error::invalid(format!("unknown shape class `{name}` in manifest")))?;
        let shape = LabeledShape {
            points: load_entry(dir, e)?,
            class,
        };
        match e.split.as_str() {
            "train" => ds.shapes_train.push(shape),
            "test" => ds.shapes_test.push(shape),
            other => return Err(Error::invalid(format!("unknown split `{other}` in manifest"))),
        }
    }
    Ok((ds, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_points_roundtrip_exactly() {
        let pts = vec![[0.1, -2.5e-7, 3.0], [1.0 / 3.0, 2.0, -0.0]];
        let back = points_from_text(&points_to_text(&pts), Path::new("x.xyz")).unwrap();
        assert_eq!(back.points(), &pts[..]);
    }

    #[test]
    fn binary_points_roundtrip_within_f32() {
        let pts = vec![[0.1, -2.5, 3.0], [1.0 / 3.0, 2.0, 7.0]];
        let bytes = points_to_bytes(&pts);
        assert_eq!(&bytes[..4], b"PMD1");
        assert_eq!(bytes.len(), 8 + 24);
        let back = points_from_bytes(&bytes, Path::new("x.pmd")).unwrap();
        for (a, b) in back.points().iter().zip(&pts) {
            for d in 0..3 {
                assert!((a[d] - b[d]).abs() <= 1e-7 * b[d].abs().max(1.0));
            }
        }
        assert_eq!(points_to_bytes(back.points()), bytes);
    }

    #[test]
    fn malformed_inputs() {
        assert!(points_from_text("1 2\n", Path::new("a")).is_err());
        assert!(points_from_text("1 2 x\n", Path::new("a")).is_err());
        assert!(points_from_bytes(b"PMD2\0\0\0\0", Path::new("a")).is_err());
        let mut b = points_to_bytes(&[[1.0; 3]]);
        b.pop();
        assert!(points_from_bytes(&b, Path::new("a")).is_err());
    }
}
