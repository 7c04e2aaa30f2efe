//! The mixture-of-domain-experts network.
//!
//! Four blocks of parameters, each under a stable name prefix:
//!
//! | prefix      | contents                                                     |
//! |-------------|--------------------------------------------------------------|
//! | `object.`   | patch embedding, encoder, decoder, mask token, recon head    |
//! | `scene.`    | patch embedding, encoder, learned queries, decoder, box head |
//! | `bridge.`   | projection from object width to scene width                  |
//! | `cls_head.` | classification head used only when fine-tuning on objects    |
//!
//! The object expert is a single parameter set; every block of a scene runs
//! through the same tensors, so their gradients add up on one tape.
//!
//! All transformer layers are pre-norm. An encoder layer is
//! `x += attn(ln(x)); x += ffn(ln(x))`; a scene decoder layer adds a
//! cross-attention sub-layer against the scene tokens between the two. With
//! width `C`, MLP ratio `r` and `H` heads an encoder layer holds
//! `4(C² + C) + 2rC² + rC + C + 4C` scalars and a decoder layer
//! `8(C² + C) + 2rC² + rC + C + 6C`; see [`layer_param_counts`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::geom::{self, Box3D, Point, PointSet};
use crate::rng::{self, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectExpertConfig {
    /// Patches per block.
    pub num_patches: usize,
    /// Points per patch.
    pub patch_size: usize,
    pub width: usize,
    pub depth: usize,
    pub decoder_depth: usize,
    pub mask_ratio: f64,
    pub heads: usize,
}

impl Default for ObjectExpertConfig {
    fn default() -> Self {
        Self {
            num_patches: 16,
            patch_size: 16,
            width: 64,
            depth: 3,
            decoder_depth: 2,
            mask_ratio: 0.6,
            heads: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneExpertConfig {
    pub num_patches: usize,
    pub patch_size: usize,
    pub width: usize,
    pub depth: usize,
    pub decoder_depth: usize,
    pub num_queries: usize,
    pub heads: usize,
}

impl Default for SceneExpertConfig {
    fn default() -> Self {
        Self {
            num_patches: 64,
            patch_size: 16,
            width: 64,
            depth: 3,
            decoder_depth: 8,
            num_queries: 8,
            heads: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub object: ObjectExpertConfig,
    pub scene: SceneExpertConfig,
    /// Hidden width of transformer feed-forward blocks, as a multiple of the width.
    pub mlp_ratio: usize,
    pub num_classes: usize,
    /// Standard deviation of the initial queries and mask token.
    pub token_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            object: ObjectExpertConfig::default(),
            scene: SceneExpertConfig::default(),
            mlp_ratio: 2,
            num_classes: 4,
            token_init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let o = &self.object;
        let s = &self.scene;
        if o.num_patches == 0 || o.patch_size == 0 || s.num_patches == 0 || s.patch_size == 0 {
            return Err(Error::invalid("patch counts and sizes must be positive"));
        }
        if o.heads == 0 || o.width % o.heads != 0 {
            return Err(Error::invalid(format!("object width {} not divisible by {} heads", o.width, o.heads)));
        }
        if s.heads == 0 || s.width % s.heads != 0 {
            return Err(Error::invalid(format!("scene width {} not divisible by {} heads", s.width, s.heads)));
        }
        if !(0.0..1.0).contains(&o.mask_ratio) {
            return Err(Error::invalid("mask_ratio must be in [0, 1)"));
        }
        if s.depth == 0 || s.decoder_depth == 0 || o.depth == 0 || o.decoder_depth == 0 {
            return Err(Error::invalid("every transformer stack needs at least one layer"));
        }
        if s.num_queries == 0 || self.num_classes < 2 || self.mlp_ratio == 0 {
            return Err(Error::invalid("need at least one query, two classes and a positive mlp ratio"));
        }
        Ok(())
    }
}

/// Parameter scalars in one (encoder, decoder) layer of width `c`.
pub fn layer_param_counts(c: usize, mlp_ratio: usize) -> (usize, usize) {
    let attn = 4 * (c * c + c);
    let ffn = 2 * mlp_ratio * c * c + mlp_ratio * c + c;
    (attn + ffn + 4 * c, 2 * attn + ffn + 6 * c)
}

/// Which sub-networks a task runs and trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    ObjectClassify,
    ObjectReconstruct,
    SceneLocalize,
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "object_classify" => Ok(Task::ObjectClassify),
            "object_reconstruct" => Ok(Task::ObjectReconstruct),
            "scene_localize" => Ok(Task::SceneLocalize),
            other => Err(Error::invalid(format!(
                "unknown task `{other}` (expected object_classify, object_reconstruct or scene_localize)"
            ))),
        }
    }
}

const OBJECT_ENCODER_PREFIXES: [&str; 3] = ["object.embed.", "object.encoder.", "object.enc_norm."];

/// True for the parameters the object encoder path uses (not the decoder side).
pub fn is_object_encoder(name: &str) -> bool {
    OBJECT_ENCODER_PREFIXES.iter().any(|p| name.starts_with(p))
}

pub fn is_object_decoder(name: &str) -> bool {
    name.starts_with("object.") && !is_object_encoder(name)
}

pub fn is_scene_decoder(name: &str) -> bool {
    name.starts_with("scene.decoder.")
}

fn task_uses(task: Task, name: &str) -> bool {
    match task {
        Task::ObjectClassify => is_object_encoder(name) || name.starts_with("cls_head."),
        Task::ObjectReconstruct => name.starts_with("object."),
        Task::SceneLocalize => is_object_encoder(name) || name.starts_with("scene.") || name.starts_with("bridge."),
    }
}

#[derive(Clone, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new(ps: &mut ParamStore, r: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Tensor::new(fan_in, fan_out, (0..fan_in * fan_out).map(|_| r.gen_range(-a..a)).collect())?;
        Ok(Self {
            w: ps.add(format!("{name}.weight"), w)?,
            b: ps.add(format!("{name}.bias"), Tensor::zeros(1, fan_out))?,
        })
    }

    fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new(ps: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            gain: ps.add(format!("{name}.gain"), Tensor::full(1, c, 1.0))?,
            bias: ps.add(format!("{name}.bias"), Tensor::zeros(1, c))?,
        })
    }

    fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let n = g.layer_norm(x);
        let gain = g.param(ps, self.gain);
        let bias = g.param(ps, self.bias);
        let y = g.mul_row(n, gain)?;
        g.add_row(y, bias)
    }
}

/// Two linear layers with a GELU between.
#[derive(Clone, Debug)]
struct Mlp {
    l1: Linear,
    l2: Linear,
}

impl Mlp {
    fn new(ps: &mut ParamStore, r: &mut ChaCha8Rng, name: &str, i: usize, h: usize, o: usize) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(ps, r, &format!("{name}.fc1"), i, h)?,
            l2: Linear::new(ps, r, &format!("{name}.fc2"), h, o)?,
        })
    }

    fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let h = self.l1.forward(g, ps, x)?;
        let h = g.gelu(h);
        self.l2.forward(g, ps, h)
    }
}

#[derive(Clone, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    fn new(ps: &mut ParamStore, r: &mut ChaCha8Rng, name: &str, c: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::new(ps, r, &format!("{name}.q"), c, c)?,
            k: Linear::new(ps, r, &format!("{name}.k"), c, c)?,
            v: Linear::new(ps, r, &format!("{name}.v"), c, c)?,
            o: Linear::new(ps, r, &format!("{name}.out"), c, c)?,
            heads,
        })
    }

    /// Multi-head attention of `x` over `mem` (pass `x` twice for self-attention).
    fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var, mem: Var) -> Result<Var> {
        let q = self.q.forward(g, ps, x)?;
        let k = self.k.forward(g, ps, mem)?;
        let v = self.v.forward(g, ps, mem)?;
        let c = g.shape(q).1;
        let dh = c / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, a, b)?;
            let kh = g.slice_cols(k, a, b)?;
            let vh = g.slice_cols(v, a, b)?;
            let s = g.matmul_bt(qh, kh)?;
            let s = g.scale(s, scale);
            let w = g.softmax(s);
            outs.push(g.matmul(w, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        self.o.forward(g, ps, cat)
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    n1: Norm,
    attn: Attention,
    n2: Norm,
    ffn: Mlp,
}

impl EncoderLayer {
    fn new(ps: &mut ParamStore, r: &mut ChaCha8Rng, name: &str, c: usize, heads: usize, ratio: usize) -> Result<Self> {
        Ok(Self {
            n1: Norm::new(ps, &format!("{name}.norm1"), c)?,
            attn: Attention::new(ps, r, &format!("{name}.attn"), c, heads)?,
            n2: Norm::new(ps, &format!("{name}.norm2"), c)?,
            ffn: Mlp::new(ps, r, &format!("{name}.ffn"), c, ratio * c, c)?,
        })
    }

    fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let h = self.n1.forward(g, ps, x)?;
        let a = self.attn.forward(g, ps, h, h)?;
        let x = g.add(x, a)?;
        let h = self.n2.forward(g, ps, x)?;
        let f = self.ffn.forward(g, ps, h)?;
        g.add(x, f)
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    n1: Norm,
    self_attn: Attention,
    n2: Norm,
    cross_attn: Attention,
    n3: Norm,
    ffn: Mlp,
}

impl DecoderLayer {
    fn new(ps: &mut ParamStore, r: &mut ChaCha8Rng, name: &str, c: usize, heads: usize, ratio: usize) -> Result<Self> {
        Ok(Self {
            n1: Norm::new(ps, &format!("{name}.norm1"), c)?,
            self_attn: Attention::new(ps, r, &format!("{name}.self_attn"), c, heads)?,
            n2: Norm::new(ps, &format!("{name}.norm2"), c)?,
            cross_attn: Attention::new(ps, r, &format!("{name}.cross_attn"), c, heads)?,
            n3: Norm::new(ps, &format!("{name}.norm3"), c)?,
            ffn: Mlp::new(ps, r, &format!("{name}.ffn"), c, ratio * c, c)?,
        })
    }

    fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var, mem: Var) -> Result<Var> {
        let h = self.n1.forward(g, ps, x)?;
        let a = self.self_attn.forward(g, ps, h, h)?;
        let x = g.add(x, a)?;
        let h = self.n2.forward(g, ps, x)?;
        let a = self.cross_attn.forward(g, ps, h, mem)?;
        let x = g.add(x, a)?;
        let h = self.n3.forward(g, ps, x)?;
        let f = self.ffn.forward(g, ps, h)?;
        g.add(x, f)
    }
}

/// Mini point network over each patch plus a position MLP over its center.
#[derive(Clone, Debug)]
struct PatchEmbed {
    point: Mlp,
    pos: Mlp,
}

impl PatchEmbed {
    fn new(ps: &mut ParamStore, r: &mut ChaCha8Rng, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            point: Mlp::new(ps, r, &format!("{name}.point"), 3, c, c)?,
            pos: Mlp::new(ps, r, &format!("{name}.pos"), 3, c, c)?,
        })
    }
}

/// Farthest-point centers and their k-NN patches in center-relative coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Patches {
    pub centers: Vec<Point>,
    pub local: Vec<Vec<Point>>,
}

impl Patches {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn patch_size(&self) -> usize {
        self.local.first().map_or(0, Vec::len)
    }

    fn points_tensor(&self, which: &[usize]) -> Tensor {
        let k = self.patch_size();
        let mut data = Vec::with_capacity(which.len() * k * 3);
        for &i in which {
            for p in &self.local[i] {
                data.extend_from_slice(p);
            }
        }
        Tensor::new(which.len() * k, 3, data).expect("patch tensor shape")
    }

    fn centers_tensor(&self, which: &[usize]) -> Tensor {
        let data = which.iter().flat_map(|&i| self.centers[i]).collect();
        Tensor::new(which.len(), 3, data).expect("center tensor shape")
    }
}

pub fn patchify(points: &PointSet, m: usize, k: usize, seed_index: usize) -> Result<Patches> {
    let centers_idx = geom::fps(points, m, seed_index)?;
    let mut centers = Vec::with_capacity(m);
    let mut local = Vec::with_capacity(m);
    for &ci in &centers_idx {
        let c = points.get(ci);
        let nn = geom::knn(points, c, k)?;
        local.push(
            nn.iter()
                .map(|&j| {
                    let p = points.get(j);
                    [p[0] - c[0], p[1] - c[1], p[2] - c[2]]
                })
                .collect(),
        );
        centers.push(c);
    }
    Ok(Patches { centers, local })
}

/// Split of patch indices into masked and visible sets, each ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub masked: Vec<usize>,
    pub unmasked: Vec<usize>,
}

impl MaskPlan {
    pub fn none(m: usize) -> Self {
        Self {
            masked: Vec::new(),
            unmasked: (0..m).collect(),
        }
    }
}

/// Masks `round(ratio · m)` patches (halves round up), chosen uniformly.
pub fn plan_mask(m: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::invalid(format!("mask ratio {ratio} outside [0, 1)")));
    }
    let n_mask = ((ratio * m as f64) + 0.5).floor() as usize;
    let n_mask = n_mask.min(m.saturating_sub(1));
    let mut r = rng::stream(seed, Stream::Mask, &[]);
    let mut masked = rand::seq::index::sample(&mut r, m, n_mask).into_vec();
    masked.sort_unstable();
    let mut is_masked = vec![false; m];
    for &i in &masked {
        is_masked[i] = true;
    }
    let unmasked = (0..m).filter(|&i| !is_masked[i]).collect();
    Ok(MaskPlan { masked, unmasked })
}

#[derive(Clone, Debug)]
struct ObjectExpert {
    embed: PatchEmbed,
    encoder: Vec<EncoderLayer>,
    enc_norm: Norm,
    mask_token: ParamId,
    dec_pos: Mlp,
    decoder: Vec<EncoderLayer>,
    dec_norm: Norm,
    recon: Linear,
}

#[derive(Clone, Debug)]
struct SceneExpert {
    embed: PatchEmbed,
    encoder: Vec<EncoderLayer>,
    enc_norm: Norm,
    queries: ParamId,
    decoder: Vec<DecoderLayer>,
    dec_norm: Norm,
    box_head: Mlp,
}

#[derive(Clone, Debug)]
struct ClassHead {
    mlp: Mlp,
}

/// The whole network: configuration, parameters and their layout.
#[derive(Clone, Debug)]
pub struct ModeModel {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    object: ObjectExpert,
    scene: SceneExpert,
    projection: Linear,
    cls: ClassHead,
}

impl ModeModel {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new();
        let mut r = rng::stream(seed, Stream::Init, &[]);
        let token_std = Normal::new(0.0, cfg.token_init_std).map_err(|e| Error::invalid(e.to_string()))?;
        let ratio = cfg.mlp_ratio;

        let o = &cfg.object;
        let co = o.width;
        let object = ObjectExpert {
            embed: PatchEmbed::new(&mut ps, &mut r, "object.embed", co)?,
            encoder: (0..o.depth)
                .map(|i| EncoderLayer::new(&mut ps, &mut r, &format!("object.encoder.layer{i}"), co, o.heads, ratio))
                .collect::<Result<_>>()?,
            enc_norm: Norm::new(&mut ps, "object.enc_norm", co)?,
            mask_token: ps.add(
                "object.mask_token",
                Tensor::new(1, co, (0..co).map(|_| token_std.sample(&mut r)).collect())?,
            )?,
            dec_pos: Mlp::new(&mut ps, &mut r, "object.dec_pos", 3, co, co)?,
            decoder: (0..o.decoder_depth)
                .map(|i| EncoderLayer::new(&mut ps, &mut r, &format!("object.decoder.layer{i}"), co, o.heads, ratio))
                .collect::<Result<_>>()?,
            dec_norm: Norm::new(&mut ps, "object.dec_norm", co)?,
            recon: Linear::new(&mut ps, &mut r, "object.recon_head", co, o.patch_size * 3)?,
        };

        let s = &cfg.scene;
        let cs = s.width;
        let scene = SceneExpert {
            embed: PatchEmbed::new(&mut ps, &mut r, "scene.embed", cs)?,
            encoder: (0..s.depth)
                .map(|i| EncoderLayer::new(&mut ps, &mut r, &format!("scene.encoder.layer{i}"), cs, s.heads, ratio))
                .collect::<Result<_>>()?,
            enc_norm: Norm::new(&mut ps, "scene.enc_norm", cs)?,
            queries: ps.add(
                "scene.queries",
                Tensor::new(
                    s.num_queries,
                    cs,
                    (0..s.num_queries * cs).map(|_| token_std.sample(&mut r)).collect(),
                )?,
            )?,
            decoder: (0..s.decoder_depth)
                .map(|i| DecoderLayer::new(&mut ps, &mut r, &format!("scene.decoder.layer{i}"), cs, s.heads, ratio))
                .collect::<Result<_>>()?,
            dec_norm: Norm::new(&mut ps, "scene.dec_norm", cs)?,
            box_head: Mlp::new(&mut ps, &mut r, "scene.box_head", cs, cs, 6)?,
        };

        let projection = Linear::new(&mut ps, &mut r, "bridge.projection", co, cs)?;
        let cls = ClassHead {
            mlp: Mlp::new(&mut ps, &mut r, "cls_head", 2 * co, co, cfg.num_classes)?,
        };

        Ok(Self {
            cfg: cfg.clone(),
            params: ps,
            object,
            scene,
            projection,
            cls,
        })
    }

    /// Replaces all parameter values, checking names and shapes.
    pub fn load_params(&mut self, other: ParamStore) -> Result<()> {
        if other.len() != self.params.len() {
            return Err(Error::Incompatible(format!(
                "checkpoint has {} tensors, model has {}",
                other.len(),
                self.params.len()
            )));
        }
        for (id, name, t) in self.params.iter() {
            let oid = other
                .id(name)
                .ok_or_else(|| Error::Incompatible(format!("checkpoint lacks parameter `{name}`")))?;
            if oid != id {
                return Err(Error::Incompatible(format!("parameter `{name}` out of order")));
            }
            if other.get(oid).shape() != t.shape() {
                return Err(Error::Incompatible(format!(
                    "parameter `{name}` has shape {:?} in checkpoint, {:?} in model",
                    other.get(oid).shape(),
                    t.shape()
                )));
            }
        }
        self.params = other;
        Ok(())
    }

    pub fn active_params(&self, task: Task) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, n, _)| task_uses(task, n))
            .map(|(_, n, _)| n.to_string())
            .collect()
    }

    /// One flag per parameter: is it used (and trained) by any of `tasks`?
    pub fn active_mask(&self, tasks: &[Task]) -> Vec<bool> {
        self.params
            .iter()
            .map(|(_, n, _)| tasks.iter().any(|&t| task_uses(t, n)))
            .collect()
    }

    pub fn param_ids_where(&self, pred: impl Fn(&str) -> bool) -> Vec<ParamId> {
        self.params.iter().filter(|(_, n, _)| pred(n)).map(|(id, _, _)| id).collect()
    }

    fn embed(&self, g: &mut Graph, e: &PatchEmbed, patches: &Patches, which: &[usize]) -> Result<Var> {
        let ps = &self.params;
        let pts = g.constant(patches.points_tensor(which));
        let per_point = e.point.forward(g, ps, pts)?;
        let tokens = g.group_max(per_point, patches.patch_size())?;
        let ctr = g.constant(patches.centers_tensor(which));
        let pos = e.pos.forward(g, ps, ctr)?;
        g.add(tokens, pos)
    }

    /// Initial object tokens for the listed patches.
    pub fn embed_object_patches(&self, g: &mut Graph, patches: &Patches, which: &[usize]) -> Result<Var> {
        self.embed(g, &self.object.embed, patches, which)
    }

    pub fn object_patches(&self, points: &PointSet) -> Result<Patches> {
        let o = &self.cfg.object;
        patchify(points, o.num_patches, o.patch_size, 0)
    }

    /// Encodes the visible patches; one output row per `plan.unmasked` entry.
    pub fn object_encode(&self, g: &mut Graph, patches: &Patches, plan: &MaskPlan) -> Result<Var> {
        if plan.unmasked.is_empty() {
            return Err(Error::invalid("object_encode needs at least one visible patch"));
        }
        let mut x = self.embed_object_patches(g, patches, &plan.unmasked)?;
        for layer in &self.object.encoder {
            x = layer.forward(g, &self.params, x)?;
        }
        self.object.enc_norm.forward(g, &self.params, x)
    }

    /// Predicted local coordinates for the masked patches, `[n_mask · patch_size, 3]`,
    /// or `None` when nothing is masked.
    pub fn object_decode(&self, g: &mut Graph, enc: Var, patches: &Patches, plan: &MaskPlan) -> Result<Option<Var>> {
        if plan.masked.is_empty() {
            return Ok(None);
        }
        if g.shape(enc).0 != plan.unmasked.len() {
            return Err(Error::invalid(format!(
                "encoder output has {} rows, plan has {} visible patches",
                g.shape(enc).0,
                plan.unmasked.len()
            )));
        }
        let ps = &self.params;
        let n_mask = plan.masked.len();
        let mt = g.param(ps, self.object.mask_token);
        let masks = g.gather_rows(mt, &vec![0; n_mask])?;
        let x = g.concat_rows(&[enc, masks])?;
        let order: Vec<usize> = plan.unmasked.iter().chain(&plan.masked).copied().collect();
        let ctr = g.constant(patches.centers_tensor(&order));
        let pos = self.object.dec_pos.forward(g, ps, ctr)?;
        let mut x = g.add(x, pos)?;
        for layer in &self.object.decoder {
            x = layer.forward(g, ps, x)?;
        }
        let total = g.shape(x).0;
        let x = g.slice_rows(x, total - n_mask, total)?;
        let x = self.object.dec_norm.forward(g, ps, x)?;
        let out = self.object.recon.forward(g, ps, x)?;
        let k = self.cfg.object.patch_size;
        Ok(Some(g.reshape(out, n_mask * k, 3)?))
    }

    /// Ground-truth local coordinates for the masked patches, aligned with [`Self::object_decode`].
    pub fn masked_targets(patches: &Patches, plan: &MaskPlan) -> Tensor {
        patches.points_tensor(&plan.masked)
    }

    /// Max-pools each block's tokens, optionally behind a gradient barrier,
    /// and projects to the scene width: `[K, C_s]`.
    pub fn block_global_features(&self, g: &mut Graph, per_block: &[Var], barrier: bool) -> Result<Var> {
        if per_block.is_empty() {
            return Err(Error::invalid("no blocks to pool"));
        }
        let mut pooled = Vec::with_capacity(per_block.len());
        for &e in per_block {
            if g.shape(e).0 == 0 {
                return Err(Error::invalid("block with no tokens"));
            }
            pooled.push(g.max_rows(e)?);
        }
        let mut x = g.concat_rows(&pooled)?;
        if barrier {
            x = g.stop_gradient(x);
        }
        self.projection.forward(g, &self.params, x)
    }

    /// `learned_query[j] + block_feature[j mod K]`.
    pub fn enhance_queries(&self, g: &mut Graph, block_features: Var) -> Result<Var> {
        let k = g.shape(block_features).0;
        let q = self.cfg.scene.num_queries;
        let idx: Vec<usize> = (0..q).map(|j| j % k).collect();
        let tiled = g.gather_rows(block_features, &idx)?;
        let queries = g.param(&self.params, self.scene.queries);
        g.add(queries, tiled)
    }

    pub fn scene_patches(&self, scene: &PointSet) -> Result<Patches> {
        let s = &self.cfg.scene;
        patchify(scene, s.num_patches, s.patch_size, 0)
    }

    pub fn scene_encode(&self, g: &mut Graph, patches: &Patches) -> Result<Var> {
        let all: Vec<usize> = (0..patches.len()).collect();
        let mut x = self.embed(g, &self.scene.embed, patches, &all)?;
        for layer in &self.scene.encoder {
            x = layer.forward(g, &self.params, x)?;
        }
        self.scene.enc_norm.forward(g, &self.params, x)
    }

    pub fn scene_decode(&self, g: &mut Graph, queries: Var, scene_tokens: Var) -> Result<Var> {
        let mut x = queries;
        for layer in &self.scene.decoder {
            x = layer.forward(g, &self.params, x, scene_tokens)?;
        }
        self.scene.dec_norm.forward(g, &self.params, x)
    }

    /// Box parameters per query, `[q, 6]`: center then softplus half extents.
    pub fn regress_boxes(&self, g: &mut Graph, decoded: Var) -> Result<Var> {
        let raw = self.scene.box_head.forward(g, &self.params, decoded)?;
        let c = g.slice_cols(raw, 0, 3)?;
        let h = g.slice_cols(raw, 3, 6)?;
        let h = g.softplus(h);
        g.concat_cols(&[c, h])
    }

    /// Class logits `[1, classes]` for a unit-space object, all patches visible.
    pub fn classify(&self, g: &mut Graph, points: &PointSet) -> Result<Var> {
        let patches = self.object_patches(points)?;
        let plan = MaskPlan::none(patches.len());
        let tokens = self.object_encode(g, &patches, &plan)?;
        let mx = g.max_rows(tokens)?;
        let mean = g.mean_rows(tokens)?;
        let feat = g.concat_cols(&[mx, mean])?;
        self.cls.mlp.forward(g, &self.params, feat)
    }
}

/// Reads `[q, 6]` box parameters back into boxes.
pub fn boxes_from_tensor(t: &Tensor) -> Result<Vec<Box3D>> {
    if t.cols() != 6 {
        return Err(Error::invalid(format!("box tensor needs 6 columns, has {}", t.cols())));
    }
    (0..t.rows())
        .map(|i| {
            let r = t.row(i);
            Box3D::new([r[0], r[1], r[2]], [r[3], r[4], r[5]])
        })
        .collect()
}

pub fn boxes_to_tensor(boxes: &[Box3D]) -> Tensor {
    let rows: Vec<[f64; 6]> = boxes.iter().map(Box3D::to_array).collect();
    Tensor::from_rows(&rows)
}

/// Differentiable mean over rows of `1 - GIoU(pred_i, target_i)`; both `[n, 6]`.
pub fn giou_loss(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    const TINY: f64 = 1e-12;
    let (pc, ph) = (g.slice_cols(pred, 0, 3)?, g.slice_cols(pred, 3, 6)?);
    let (tc, th) = (g.slice_cols(target, 0, 3)?, g.slice_cols(target, 3, 6)?);
    let p_lo = g.sub(pc, ph)?;
    let p_hi = g.add(pc, ph)?;
    let t_lo = g.sub(tc, th)?;
    let t_hi = g.add(tc, th)?;

    let prod3 = |g: &mut Graph, x: Var| -> Result<Var> {
        let a = g.slice_cols(x, 0, 1)?;
        let b = g.slice_cols(x, 1, 2)?;
        let c = g.slice_cols(x, 2, 3)?;
        let ab = g.mul(a, b)?;
        g.mul(ab, c)
    };

    let lo = g.maximum(p_lo, t_lo)?;
    let hi = g.minimum(p_hi, t_hi)?;
    let ext = g.sub(hi, lo)?;
    let ext = g.relu(ext);
    let inter = prod3(g, ext)?;

    let vp = prod3(g, ph)?;
    let vp = g.scale(vp, 8.0);
    let vt = prod3(g, th)?;
    let vt = g.scale(vt, 8.0);
    let union = g.add(vp, vt)?;
    let union = g.sub(union, inter)?;
    let union = g.add_scalar(union, TINY);

    let elo = g.minimum(p_lo, t_lo)?;
    let ehi = g.maximum(p_hi, t_hi)?;
    let eext = g.sub(ehi, elo)?;
    let encl = prod3(g, eext)?;
    let encl = g.add_scalar(encl, TINY);

    let iou = g.div(inter, union)?;
    let gap = g.sub(encl, union)?;
    let pen = g.div(gap, encl)?;
    let giou = g.sub(iou, pen)?;
    let loss = g.scale(giou, -1.0);
    let loss = g.add_scalar(loss, 1.0);
    g.mean(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            object: ObjectExpertConfig {
                num_patches: 4,
                patch_size: 4,
                width: 8,
                depth: 1,
                decoder_depth: 1,
                mask_ratio: 0.5,
                heads: 2,
            },
            scene: SceneExpertConfig {
                num_patches: 4,
                patch_size: 4,
                width: 8,
                depth: 1,
                decoder_depth: 2,
                num_queries: 3,
                heads: 2,
            },
            ..ModelConfig::default()
        }
    }

    fn cloud(n: usize, seed: u64) -> PointSet {
        let mut r = rng::stream(seed, Stream::Scene, &[]);
        PointSet::new((0..n).map(|_| [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)]).collect()).unwrap()
    }

    #[test]
    fn patchify_contract() {
        let p = cloud(40, 1);
        let one = patchify(&p, 1, 40, 5).unwrap();
        assert_eq!(one.centers, vec![p.get(5)]);
        let many = patchify(&p, 6, 5, 0).unwrap();
        assert_eq!(
            many.centers,
            geom::fps(&p, 6, 0).unwrap().iter().map(|&i| p.get(i)).collect::<Vec<_>>()
        );
        for patch in &many.local {
            assert!(patch.contains(&[0.0; 3]));
        }
    }

    #[test]
    fn mask_counts() {
        assert!(plan_mask(10, 0.0, 1).unwrap().masked.is_empty());
        let p = plan_mask(64, 0.6, 3).unwrap();
        assert_eq!((p.masked.len(), p.unmasked.len()), (38, 26));
        assert_eq!(p, plan_mask(64, 0.6, 3).unwrap());
        assert!(plan_mask(10, 1.0, 1).is_err());
        // 2.5 rounds up
        assert_eq!(plan_mask(5, 0.5, 0).unwrap().masked.len(), 3);
    }

    #[test]
    fn embed_is_permutation_invariant_and_additive() {
        let mut model = ModeModel::new(&tiny_cfg(), 3).unwrap();
        let p = cloud(32, 2);
        let patches = model.object_patches(&p).unwrap();
        let mut shuffled = patches.clone();
        for patch in &mut shuffled.local {
            patch.reverse();
        }
        let all: Vec<usize> = (0..patches.len()).collect();
        let mut g = Graph::new();
        let a = model.embed_object_patches(&mut g, &patches, &all).unwrap();
        let b = model.embed_object_patches(&mut g, &shuffled, &all).unwrap();
        assert_eq!(g.shape(a), (4, 8));
        for (x, y) in g.value(a).data().iter().zip(g.value(b).data()) {
            assert!((x - y).abs() < 1e-9);
        }

        // zero the position branch: tokens reduce to the point-network term
        for id in model.param_ids_where(|n| n.starts_with("object.embed.pos.")) {
            model.params.get_mut(id).data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let tok = model.embed_object_patches(&mut g, &patches, &all).unwrap();
        let pts = g.constant(patches.points_tensor(&all));
        let pp = model.object.embed.point.forward(&mut g, &model.params, pts).unwrap();
        let pooled = g.group_max(pp, 4).unwrap();
        assert_eq!(g.value(tok), g.value(pooled));
    }

    #[test]
    fn object_pipeline_shapes() {
        let model = ModeModel::new(&tiny_cfg(), 3).unwrap();
        let p = cloud(32, 2);
        let patches = model.object_patches(&p).unwrap();
        let plan = plan_mask(4, 0.5, 9).unwrap();
        let mut g = Graph::new();
        let enc = model.object_encode(&mut g, &patches, &plan).unwrap();
        assert_eq!(g.shape(enc), (2, 8));
        let rec = model.object_decode(&mut g, enc, &patches, &plan).unwrap().unwrap();
        assert_eq!(g.shape(rec), (2 * 4, 3));

        let none = MaskPlan::none(4);
        let enc = model.object_encode(&mut g, &patches, &none).unwrap();
        assert_eq!(g.shape(enc), (4, 8));
        assert!(model.object_decode(&mut g, enc, &patches, &none).unwrap().is_none());
    }

    #[test]
    fn identical_blocks_identical_features() {
        let model = ModeModel::new(&tiny_cfg(), 3).unwrap();
        let p = cloud(32, 2);
        let patches = model.object_patches(&p).unwrap();
        let plan = plan_mask(4, 0.5, 9).unwrap();
        let mut g = Graph::new();
        let a = model.object_encode(&mut g, &patches, &plan).unwrap();
        let b = model.object_encode(&mut g, &patches, &plan).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn scene_pipeline_shapes_and_positive_extents() {
        let model = ModeModel::new(&tiny_cfg(), 4).unwrap();
        let scene = cloud(64, 5);
        let sp = model.scene_patches(&scene).unwrap();
        let mut g = Graph::new();
        let es = model.scene_encode(&mut g, &sp).unwrap();
        assert_eq!(g.shape(es), (4, 8));
        let blk = g.constant(Tensor::full(2, 8, 0.3));
        let bg = model.block_global_features(&mut g, &[blk], false).unwrap();
        assert_eq!(g.shape(bg), (1, 8));
        let q0 = model.enhance_queries(&mut g, bg).unwrap();
        assert_eq!(g.shape(q0), (3, 8));
        let dec = model.scene_decode(&mut g, q0, es).unwrap();
        let boxes = model.regress_boxes(&mut g, dec).unwrap();
        let b = boxes_from_tensor(g.value(boxes)).unwrap();
        assert_eq!(b.len(), 3);
        assert!(b.iter().all(|b| b.half_extents.iter().all(|h| *h > 0.0)));
    }

    #[test]
    fn single_token_pool_is_identity() {
        let model = ModeModel::new(&tiny_cfg(), 4).unwrap();
        let mut g = Graph::new();
        let tok = g.constant(Tensor::new(1, 8, (0..8).map(|i| i as f64 - 3.0).collect()).unwrap());
        let pooled = g.max_rows(tok).unwrap();
        assert_eq!(g.value(pooled), g.value(tok));
        let bg = model.block_global_features(&mut g, &[tok, tok], true).unwrap();
        assert_eq!(g.shape(bg), (2, 8));
    }

    #[test]
    fn query_tiling() {
        let mut cfg = tiny_cfg();
        cfg.scene.num_queries = 4;
        let mut model = ModeModel::new(&cfg, 1).unwrap();
        let qid = model.params.id("scene.queries").unwrap();
        model.params.get_mut(qid).data_mut().fill(0.0);
        let mut g = Graph::new();
        let bg = g.constant(Tensor::new(2, 8, (0..16).map(f64::from).collect()).unwrap());
        let q0 = model.enhance_queries(&mut g, bg).unwrap();
        let v = g.value(q0);
        assert_eq!(v.row(0), g.value(bg).row(0));
        assert_eq!(v.row(1), g.value(bg).row(1));
        assert_eq!(v.row(2), g.value(bg).row(0));
        assert_eq!(v.row(3), g.value(bg).row(1));
    }

    #[test]
    fn decoder_depth_and_param_counts() {
        let cfg = tiny_cfg();
        let model = ModeModel::new(&cfg, 1).unwrap();
        let layers: std::collections::BTreeSet<String> = model
            .params
            .iter()
            .filter(|(_, n, _)| n.starts_with("scene.decoder."))
            .map(|(_, n, _)| n.split('.').nth(2).unwrap().to_string())
            .collect();
        assert_eq!(layers.len(), cfg.scene.decoder_depth);
        let count = |prefix: &str| -> usize {
            model
                .params
                .iter()
                .filter(|(_, n, _)| n.starts_with(prefix))
                .map(|(_, _, t)| t.len())
                .sum()
        };
        let (enc, dec) = layer_param_counts(8, cfg.mlp_ratio);
        assert_eq!(count("scene.decoder.layer0."), dec);
        assert_eq!(count("scene.encoder.layer0."), enc);
        assert_eq!(count("object.encoder.layer0."), enc);
    }

    #[test]
    fn activation_lists() {
        let model = ModeModel::new(&tiny_cfg(), 1).unwrap();
        let cls = model.active_params(Task::ObjectClassify);
        assert!(cls.iter().all(|n| !n.starts_with("scene.") && !n.starts_with("bridge.")));
        assert!(cls.iter().any(|n| n.starts_with("cls_head.")));
        let loc = model.active_params(Task::SceneLocalize);
        assert!(loc.iter().any(|n| n.starts_with("scene.encoder.")));
        assert!(loc.iter().any(|n| n.starts_with("scene.decoder.")));
        assert!(loc.iter().any(|n| n.starts_with("object.encoder.")));
        assert!(loc.iter().any(|n| n.starts_with("scene.box_head.")));
        assert!(loc.iter().any(|n| n.starts_with("bridge.")));
        assert!("object_detect".parse::<Task>().is_err());
        assert_eq!("scene_localize".parse::<Task>().unwrap(), Task::SceneLocalize);
    }

    #[test]
    fn giou_loss_matches_geometry() {
        let a = [
            Box3D::new([0.0; 3], [1.0; 3]).unwrap(),
            Box3D::new([0.2, -0.3, 0.1], [0.5, 0.7, 0.4]).unwrap(),
        ];
        let b = [
            Box3D::new([1.0, 0.0, 0.0], [1.0; 3]).unwrap(),
            Box3D::new([3.0, 1.0, 0.0], [0.3, 0.2, 0.9]).unwrap(),
        ];
        let mut g = Graph::new();
        let pa = g.constant(boxes_to_tensor(&a));
        let pb = g.constant(boxes_to_tensor(&b));
        let l = giou_loss(&mut g, pa, pb).unwrap();
        let expect = ((1.0 - geom::giou(&a[0], &b[0])) + (1.0 - geom::giou(&a[1], &b[1]))) / 2.0;
        assert!((g.value(l).item() - expect).abs() < 1e-9);
    }

    #[test]
    fn giou_loss_gradient() {
        let pred = boxes_to_tensor(&[
            Box3D::new([0.1, 0.2, 0.35], [0.8, 0.6, 0.9]).unwrap(),
            Box3D::new([1.5, -0.8, 0.35], [0.4, 0.5, 0.3]).unwrap(),
        ]);
        let target = boxes_to_tensor(&[
            Box3D::new([0.5, 0.0, 0.0], [1.0, 0.7, 0.6]).unwrap(),
            Box3D::new([1.0, -0.5, 0.2], [0.6, 0.3, 0.5]).unwrap(),
        ]);
        let e = grad_check(
            |g, x| {
                let t = g.constant(target.clone());
                giou_loss(g, x, t)
            },
            &pred,
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-4, "{e}");
    }
}
