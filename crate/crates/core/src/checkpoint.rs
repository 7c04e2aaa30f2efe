//! Single-file binary checkpoints.
//!
//! Little-endian throughout:
//!
//! ```text
//! "PMCK" u32 version
//! u64 seed  u64 step  u64 optimizer_step
//! u32 len + UTF-8   resolved run configuration
//! u32 tensor count
//! per tensor: u32 len + UTF-8 name, u8 dtype (0 = f64, 1 = f32),
//!             u32 rank, u64 dims[rank], values
//! ```
//!
//! Parameters keep their model names; AdamW moments are stored as
//! `adamw.m/<name>` and `adamw.v/<name>`. Every random draw is keyed by the
//! seed and step, so those two numbers are the complete RNG state.

use std::path::Path;

use crate::autodiff::{AdamW, AdamWConfig, ParamStore, Tensor};
use crate::config::Precision;
use crate::error::{Error, Result};
use crate::io::{read_bytes, write_atomic};
use crate::model::{ModeModel, ModelConfig};
use crate::pretrain::TrainState;

pub const MAGIC: &[u8; 4] = b"PMCK";
pub const VERSION: u32 = 1;

const M_PREFIX: &str = "adamw.m/";
const V_PREFIX: &str = "adamw.v/";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F64 = 0,
    F32 = 1,
}

impl From<Precision> for DType {
    fn from(p: Precision) -> Self {
        match p {
            Precision::F64 => DType::F64,
            Precision::F32 => DType::F32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Values widened to f64; f32 tensors hold exactly representable values.
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub seed: u64,
    pub step: u64,
    pub opt_step: u64,
    pub config: String,
    pub tensors: Vec<NamedTensor>,
}

fn named(name: String, t: &Tensor, dtype: DType) -> NamedTensor {
    let data = match dtype {
        DType::F64 => t.data().to_vec(),
        DType::F32 => t.data().iter().map(|&x| x as f32 as f64).collect(),
    };
    NamedTensor {
        name,
        dtype,
        shape: t.shape(),
        data,
    }
}

impl Checkpoint {
    /// Captures parameters and, when `opt` is given, optimizer state.
    pub fn capture(model: &ModeModel, opt: Option<&AdamW>, step: usize, seed: u64, config: String, dtype: DType) -> Self {
        let mut tensors: Vec<NamedTensor> = model.params.iter().map(|(_, n, t)| named(n.to_string(), t, dtype)).collect();
        let mut opt_step = 0;
        if let Some(opt) = opt {
            opt_step = opt.step_count();
            let (m, v) = opt.moments();
            for (prefix, list) in [(M_PREFIX, m), (V_PREFIX, v)] {
                for ((_, n, _), t) in model.params.iter().zip(list) {
                    tensors.push(named(format!("{prefix}{n}"), t, dtype));
                }
            }
        }
        Self {
            version: VERSION,
            seed,
            step: step as u64,
            opt_step,
            config,
            tensors,
        }
    }

    pub fn from_state(state: &TrainState, seed: u64, config: String, dtype: DType) -> Self {
        Self::capture(&state.model, Some(&state.opt), state.step, seed, config, dtype)
    }

    fn params(&self, prefix: Option<&str>) -> Result<ParamStore> {
        let mut ps = ParamStore::new();
        for t in &self.tensors {
            let is_opt = t.name.starts_with(M_PREFIX) || t.name.starts_with(V_PREFIX);
            let name = match prefix {
                None if !is_opt => t.name.as_str(),
                Some(p) => match t.name.strip_prefix(p) {
                    Some(rest) => rest,
                    None => continue,
                },
                None => continue,
            };
            let tensor = match t.shape.as_slice() {
                [r, c] => Tensor::new(*r, *c, t.data.clone())?,
                other => return Err(Error::Incompatible(format!("tensor `{}` has rank {}", t.name, other.len()))),
            };
            ps.add(name, tensor)?;
        }
        Ok(ps)
    }

    pub fn has_optimizer(&self) -> bool {
        self.tensors.iter().any(|t| t.name.starts_with(M_PREFIX))
    }

    /// A model of architecture `cfg` holding the stored parameters.
    pub fn model(&self, cfg: &ModelConfig) -> Result<ModeModel> {
        let mut model = ModeModel::new(cfg, self.seed)?;
        model.load_params(self.params(None)?)?;
        Ok(model)
    }

    /// Model, optimizer (fresh when none was stored) and step counter.
    pub fn restore(&self, cfg: &ModelConfig, opt_cfg: AdamWConfig) -> Result<TrainState> {
        let model = self.model(cfg)?;
        let opt = if self.has_optimizer() {
            let take = |prefix: &str| -> Result<Vec<Tensor>> {
                let ps = self.params(Some(prefix))?;
                let mut out = Vec::with_capacity(model.params.len());
                for (_, n, t) in model.params.iter() {
                    let id = ps
                        .id(n)
                        .ok_or_else(|| Error::Incompatible(format!("optimizer state lacks `{n}`")))?;
                    let mt = ps.get(id);
                    if mt.shape() != t.shape() {
                        return Err(Error::Incompatible(format!("optimizer state for `{n}` has the wrong shape")));
                    }
                    out.push(mt.clone());
                }
                Ok(out)
            };
            AdamW::from_parts(opt_cfg, self.opt_step, take(M_PREFIX)?, take(V_PREFIX)?)
        } else {
            AdamW::new(opt_cfg, &model.params)
        };
        Ok(TrainState {
            model,
            opt,
            step: self.step as usize,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&self.version.to_le_bytes());
        for x in [self.seed, self.step, self.opt_step] {
            b.extend_from_slice(&x.to_le_bytes());
        }
        put_str(&mut b, &self.config);
        b.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_str(&mut b, &t.name);
            b.push(t.dtype as u8);
            b.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in &t.data {
                match t.dtype {
                    DType::F64 => b.extend_from_slice(&x.to_le_bytes()),
                    DType::F32 => b.extend_from_slice(&(x as f32).to_le_bytes()),
                }
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { b: bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(r.err("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version > VERSION {
            return Err(Error::Version {
                found: version,
                supported: VERSION,
            });
        }
        let seed = r.u64()?;
        let step = r.u64()?;
        let opt_step = r.u64()?;
        let config = r.string()?;
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = r.string()?;
            let dtype = match r.take(1)?[0] {
                0 => DType::F64,
                1 => DType::F32,
                other => return Err(r.err(&format!("tensor `{name}` has unknown dtype tag {other}"))),
            };
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| Ok(r.u64()? as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let data = match dtype {
                DType::F64 => (0..count).map(|_| Ok(f64::from_le_bytes(r.array()?))).collect::<Result<Vec<_>>>()?,
                DType::F32 => (0..count)
                    .map(|_| Ok(f32::from_le_bytes(r.array()?) as f64))
                    .collect::<Result<Vec<_>>>()?,
            };
            tensors.push(NamedTensor { name, dtype, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes after last tensor"));
        }
        Ok(Self {
            version,
            seed,
            step,
            opt_step,
            config,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_bytes(path)?, path)
    }
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    b.extend_from_slice(&(s.len() as u32).to_le_bytes());
    b.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn err(&self, msg: &str) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            msg: format!("{msg} (at byte {})", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.b.len() - self.pos < n {
            return Err(self.err("truncated"));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?.to_vec();
        String::from_utf8(bytes).map_err(|_| self.err("name is not UTF-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pretrain::micro_setup;

    fn sample(dtype: DType) -> Checkpoint {
        let (model, _, cfg) = micro_setup(1).unwrap();
        let state = TrainState::new(model, cfg.optimizer);
        Checkpoint::from_state(&state, 1, "seed = 1\n".into(), dtype)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        for dtype in [DType::F64, DType::F32] {
            let ck = sample(dtype);
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes, Path::new("c")).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn restore_gives_same_parameters() {
        let (model, _, cfg) = micro_setup(1).unwrap();
        let ck = sample(DType::F64);
        let st = ck.restore(&model.cfg, cfg.optimizer).unwrap();
        assert_eq!(st.model.params, model.params);
        assert_eq!(st.opt.step_count(), 0);
    }

    #[test]
    fn future_version_and_corruption_rejected() {
        let mut bytes = sample(DType::F64).to_bytes();
        bytes[4..8].copy_from_slice(&(VERSION + 1).to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&bytes, Path::new("c")), Err(Error::Version { .. })));
        let mut bytes = sample(DType::F64).to_bytes();
        bytes.truncate(bytes.len() - 3);
        assert!(Checkpoint::from_bytes(&bytes, Path::new("c")).is_err());
        assert!(Checkpoint::from_bytes(b"PMCX", Path::new("c")).is_err());
    }

    #[test]
    fn width_mismatch_is_incompatible() {
        let (model, _, _) = micro_setup(1).unwrap();
        let ck = sample(DType::F64);
        let mut other = model.cfg.clone();
        other.object.width = 16;
        assert!(matches!(ck.model(&other), Err(Error::Incompatible(_))));
    }
}
