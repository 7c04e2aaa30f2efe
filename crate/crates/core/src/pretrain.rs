//! Block-to-scene pretraining: masked reconstruction of blocks in object
//! space jointly with regression of the blocks' scene-space boxes.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{global_norm, AdamW, AdamWConfig, Graph, Tensor, Var};
use crate::blocks::{gt_boxes, sample_blocks, to_object_space, BlockConfig, BlockSet};
use crate::error::{Error, Result};
use crate::geom::{rotate_about_up, Box3D, CenterMode, NormalizeMode, PointSet};
use crate::matching::{match_predictions, tiled_pairing, validate_pairing, MatchMode, Pairing};
use crate::model::{boxes_from_tensor, boxes_to_tensor, giou_loss, plan_mask, MaskPlan, ModeModel, ModelConfig, Task};
use crate::rng::{self, Stream};
use crate::scenegen::Scene;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Reconstruction weight.
    pub lambda1: f64,
    /// Box-regression weight.
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if !ok(self.lambda1) || !ok(self.lambda2) {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        if self.lambda1 == 0.0 && self.lambda2 == 0.0 {
            return Err(Error::invalid("loss weights cannot both be zero"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from the base rate to zero over the run.
    Cosine,
}

/// Ablation switches. Everything on is the full method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toggles {
    pub scene_regression: bool,
    pub object_reconstruction: bool,
    /// Map blocks into object space before the object expert; off feeds raw scene coordinates.
    pub coord_transform: bool,
    /// Feed pooled block features into the scene queries; off replaces them with zeros.
    pub joint_coupling: bool,
    /// Barrier between the pooled block features and the object encoder.
    pub stop_gradient: bool,
    pub matching: MatchMode,
    pub object_rotation: bool,
    pub scene_rotation: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            scene_regression: true,
            object_reconstruction: true,
            coord_transform: true,
            joint_coupling: true,
            stop_gradient: true,
            matching: MatchMode::Assigned,
            object_rotation: true,
            scene_rotation: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub blocks: BlockConfig,
    pub weights: LossWeights,
    pub optimizer: AdamWConfig,
    pub schedule: LrSchedule,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many optimizer steps even if epochs remain (0 = no cap).
    pub max_steps: usize,
    /// Checkpoint period in steps (0 = final checkpoint only).
    pub checkpoint_every: usize,
    pub toggles: Toggles,
    pub center_mode: CenterMode,
    pub normalize_mode: NormalizeMode,
    /// Filled from the run's top-level seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            blocks: BlockConfig::default(),
            weights: LossWeights::default(),
            optimizer: AdamWConfig {
                lr: 1e-3,
                weight_decay: 0.05,
                ..AdamWConfig::default()
            },
            schedule: LrSchedule::Constant,
            epochs: 50,
            batch_size: 4,
            max_steps: 0,
            checkpoint_every: 0,
            toggles: Toggles::default(),
            center_mode: CenterMode::Mean,
            normalize_mode: NormalizeMode::MaxAbs,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.blocks.validate()?;
        self.weights.validate()?;
        self.optimizer.validate()?;
        let t = &self.toggles;
        if !t.scene_regression && !t.object_reconstruction {
            return Err(Error::invalid("enable at least one of scene_regression and object_reconstruction"));
        }
        if t.joint_coupling && !(t.scene_regression && t.object_reconstruction) {
            return Err(Error::invalid("joint_coupling requires both scene_regression and object_reconstruction"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        Ok(())
    }

    /// Number of optimizer steps a run over `n` scenes performs.
    pub fn total_steps(&self, n: usize) -> usize {
        let all = self.epochs * n.div_ceil(self.batch_size);
        if self.max_steps > 0 {
            all.min(self.max_steps)
        } else {
            all
        }
    }

    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.optimizer.lr,
            LrSchedule::Cosine => {
                let t = step as f64 / total.max(1) as f64;
                0.5 * self.optimizer.lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Everything random about one scene at one step, drawn up front.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    /// Scene points after the optional up-axis rotation.
    pub points: PointSet,
    pub blocks: BlockSet,
    /// Scene-space box of every block.
    pub gt: Vec<Box3D>,
    /// Object-expert input per block (object space, or scene space when the transform is off).
    pub object_inputs: Vec<PointSet>,
    pub masks: Vec<MaskPlan>,
}

/// Seed for every draw about `scene` at `draw` (usually the global step).
pub fn scene_draw_seed(cfg: &PretrainConfig, draw: u64, scene: &Scene) -> u64 {
    rng::derive(cfg.seed, Stream::Step, &[draw, scene.seed])
}

pub fn prepare_scene(points: &PointSet, cfg: &PretrainConfig, model_cfg: &ModelConfig, base: u64) -> Result<PreparedScene> {
    let t = &cfg.toggles;
    let points = if t.scene_rotation {
        let angle = rng::stream(base, Stream::SceneRotation, &[]).gen_range(0.0..std::f64::consts::TAU);
        rotate_about_up(points, angle)
    } else {
        points.clone()
    };
    let blocks = sample_blocks(&points, &cfg.blocks, base)?;
    let gt = gt_boxes(&blocks, &points, cfg.center_mode)?;
    let m = model_cfg.object.num_patches;
    let mut object_inputs = Vec::with_capacity(blocks.len());
    let mut masks = Vec::with_capacity(blocks.len());
    for i in 0..blocks.len() {
        let raw = blocks.block_points(&points, i)?;
        let input = if t.coord_transform {
            let center = points.get(blocks.center_indices[i]);
            let seed = rng::derive(base, Stream::ObjectRotation, &[i as u64]);
            to_object_space(&raw, center, t.object_rotation, seed, cfg.normalize_mode).points
        } else {
            raw
        };
        object_inputs.push(input);
        masks.push(if t.object_reconstruction {
            plan_mask(m, model_cfg.object.mask_ratio, rng::derive(base, Stream::Mask, &[i as u64]))?
        } else {
            MaskPlan::none(m)
        });
    }
    Ok(PreparedScene {
        points,
        blocks,
        gt,
        object_inputs,
        masks,
    })
}

/// Per-scene outputs of the joint forward pass.
pub struct SceneOutputs {
    /// Mean Chamfer over the scene's blocks, when reconstruction is on.
    pub cd: Option<Var>,
    /// Mean `1 - GIoU` over matched pairs, when regression is on.
    pub giou: Option<Var>,
    /// Predicted boxes `[q, 6]`, when regression is on.
    pub boxes: Option<Var>,
    pub pairing: Pairing,
}

/// Runs both pipelines on a prepared scene.
pub fn forward_scene(model: &ModeModel, g: &mut Graph, prep: &PreparedScene, cfg: &PretrainConfig) -> Result<SceneOutputs> {
    let t = &cfg.toggles;
    let k = model.cfg.object.patch_size;
    let mut cd_terms = Vec::new();
    let mut encoded = Vec::new();
    if t.object_reconstruction || t.joint_coupling {
        for (input, plan) in prep.object_inputs.iter().zip(&prep.masks) {
            let patches = model.object_patches(input)?;
            let enc = model.object_encode(g, &patches, plan)?;
            if t.object_reconstruction {
                if let Some(rec) = model.object_decode(g, enc, &patches, plan)? {
                    let target = ModeModel::masked_targets(&patches, plan);
                    cd_terms.push(g.chamfer(rec, &target, k)?);
                }
            }
            encoded.push(enc);
        }
    }
    let cd = if cd_terms.is_empty() {
        None
    } else {
        let stacked = g.concat_rows(&cd_terms)?;
        Some(g.mean(stacked)?)
    };

    let mut out = SceneOutputs {
        cd,
        giou: None,
        boxes: None,
        pairing: Vec::new(),
    };
    if !t.scene_regression {
        return Ok(out);
    }
    let bg = if t.joint_coupling {
        model.block_global_features(g, &encoded, t.stop_gradient)?
    } else {
        g.constant(Tensor::zeros(prep.gt.len(), model.cfg.scene.width))
    };
    let queries = model.enhance_queries(g, bg)?;
    let sp = model.scene_patches(&prep.points)?;
    let tokens = model.scene_encode(g, &sp)?;
    let decoded = model.scene_decode(g, queries, tokens)?;
    let boxes = model.regress_boxes(g, decoded)?;
    let q = g.shape(boxes).0;
    let pairing = match t.matching {
        MatchMode::Assigned => tiled_pairing(q, prep.gt.len()),
        MatchMode::Hungarian => match_predictions(&boxes_from_tensor(g.value(boxes))?, &prep.gt, MatchMode::Hungarian)?,
    };
    out.giou = Some(box_loss(g, boxes, &prep.gt, &pairing)?);
    out.boxes = Some(boxes);
    out.pairing = pairing;
    Ok(out)
}

/// Mean `1 - GIoU` over the pairs of `pairing`.
pub fn box_loss(g: &mut Graph, pred: Var, gts: &[Box3D], pairing: &Pairing) -> Result<Var> {
    validate_pairing(pairing, g.shape(pred).0, gts.len())?;
    let pi: Vec<usize> = pairing.iter().map(|p| p.0).collect();
    let gi: Vec<Box3D> = pairing.iter().map(|p| gts[p.1]).collect();
    let sel = g.gather_rows(pred, &pi)?;
    let target = g.constant(boxes_to_tensor(&gi));
    giou_loss(g, sel, target)
}

/// The three scalars of the joint objective.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub cd: Var,
    pub giou: Var,
}

/// `λ1·cd + λ2·giou`, with absent terms standing in as exact zeros.
pub fn joint_loss(g: &mut Graph, cd: Option<Var>, giou: Option<Var>, w: &LossWeights) -> Result<LossTerms> {
    let cd = cd.unwrap_or_else(|| g.constant(Tensor::scalar(0.0)));
    let giou = giou.unwrap_or_else(|| g.constant(Tensor::scalar(0.0)));
    let a = g.scale(cd, w.lambda1);
    let b = g.scale(giou, w.lambda2);
    let total = g.add(a, b)?;
    Ok(LossTerms { total, cd, giou })
}

fn mean_of(g: &mut Graph, xs: &[Var]) -> Result<Option<Var>> {
    if xs.is_empty() {
        return Ok(None);
    }
    let s = g.concat_rows(xs)?;
    Ok(Some(g.mean(s)?))
}

/// Joint loss over a batch on a single tape: Chamfer averaged over all blocks,
/// `1 - GIoU` averaged over scenes.
pub fn forward_losses(model: &ModeModel, g: &mut Graph, scenes: &[Scene], cfg: &PretrainConfig, draw: u64) -> Result<LossTerms> {
    if scenes.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut cds = Vec::new();
    let mut gious = Vec::new();
    for s in scenes {
        let prep = prepare_scene(&s.points, cfg, &model.cfg, scene_draw_seed(cfg, draw, s))?;
        let o = forward_scene(model, g, &prep, cfg)?;
        cds.extend(o.cd);
        gious.extend(o.giou);
    }
    let cd = mean_of(g, &cds)?;
    let giou = mean_of(g, &gious)?;
    joint_loss(g, cd, giou, &cfg.weights)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_cd: f64,
    pub loss_giou: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

impl fmt::Display for StepStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step:{} epoch:{} loss_total:{} loss_cd:{} loss_giou:{} grad_norm:{} wall_ms:{:.3}",
            self.step, self.epoch, self.loss_total, self.loss_cd, self.loss_giou, self.grad_norm, self.wall_ms
        )
    }
}

impl FromStr for StepStats {
    type Err = Error;
    fn from_str(line: &str) -> Result<Self> {
        let mut s = StepStats {
            step: 0,
            epoch: 0,
            loss_total: 0.0,
            loss_cd: 0.0,
            loss_giou: 0.0,
            grad_norm: 0.0,
            wall_ms: 0.0,
        };
        let mut seen = 0;
        for field in line.split_whitespace() {
            let (k, v) = field
                .split_once(':')
                .ok_or_else(|| Error::invalid(format!("metrics field `{field}` lacks a colon")))?;
            let bad = |_| Error::invalid(format!("bad value in metrics field `{field}`"));
            match k {
                "step" => s.step = v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "epoch" => s.epoch = v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "loss_total" => s.loss_total = v.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                "loss_cd" => s.loss_cd = v.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                "loss_giou" => s.loss_giou = v.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                "grad_norm" => s.grad_norm = v.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                "wall_ms" => s.wall_ms = v.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                _ => return Err(Error::invalid(format!("unknown metrics key `{k}`"))),
            }
            seen += 1;
        }
        if seen != 7 {
            return Err(Error::invalid(format!("metrics line has {seen} of 7 fields")));
        }
        Ok(s)
    }
}

/// Model, optimizer and the global step counter.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: ModeModel,
    pub opt: AdamW,
    pub step: usize,
}

impl TrainState {
    pub fn new(model: ModeModel, opt_cfg: AdamWConfig) -> Self {
        let opt = AdamW::new(opt_cfg, &model.params);
        Self { model, opt, step: 0 }
    }
}

/// Gradients of one step: per-scene tapes run in parallel and are summed in
/// scene order, so the result does not depend on the thread count.
pub struct BatchGrads {
    pub grads: Vec<Tensor>,
    pub touched: Vec<bool>,
    pub loss_total: f64,
    pub loss_cd: f64,
    pub loss_giou: f64,
}

pub fn batch_gradients(model: &ModeModel, scenes: &[&Scene], cfg: &PretrainConfig, draw: u64) -> Result<BatchGrads> {
    if scenes.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let b = scenes.len() as f64;
    let per_scene: Vec<Result<(Vec<Tensor>, Vec<bool>, [f64; 3])>> = scenes
        .par_iter()
        .map(|s| {
            let mut g = Graph::new();
            let prep = prepare_scene(&s.points, cfg, &model.cfg, scene_draw_seed(cfg, draw, s))?;
            let o = forward_scene(model, &mut g, &prep, cfg)?;
            let terms = joint_loss(&mut g, o.cd, o.giou, &cfg.weights)?;
            g.check_finite()?;
            let scaled = g.scale(terms.total, 1.0 / b);
            let grads = g.backward(scaled)?;
            let pg = g.param_grads(&grads, &model.params);
            let mut touched = vec![false; model.params.len()];
            for id in g.touched_params() {
                touched[id.0] = true;
            }
            let v = |x: Var| g.value(x).item();
            Ok((pg, touched, [v(terms.total), v(terms.cd), v(terms.giou)]))
        })
        .collect();
    let mut out: Option<BatchGrads> = None;
    for r in per_scene {
        let (pg, touched, [lt, lc, lg]) = r?;
        match &mut out {
            None => {
                out = Some(BatchGrads {
                    grads: pg,
                    touched,
                    loss_total: lt / b,
                    loss_cd: lc / b,
                    loss_giou: lg / b,
                })
            }
            Some(acc) => {
                for (a, p) in acc.grads.iter_mut().zip(&pg) {
                    for (x, y) in a.data_mut().iter_mut().zip(p.data()) {
                        *x += y;
                    }
                }
                for (a, t) in acc.touched.iter_mut().zip(&touched) {
                    *a |= t;
                }
                acc.loss_total += lt / b;
                acc.loss_cd += lc / b;
                acc.loss_giou += lg / b;
            }
        }
    }
    let out = out.expect("nonempty batch");
    for (name, v) in [("loss_cd", out.loss_cd), ("loss_giou", out.loss_giou)] {
        if !v.is_finite() {
            return Err(Error::NonFinite { op: name.to_string() });
        }
    }
    if let Some(i) = out.grads.iter().position(|t| !t.is_finite()) {
        return Err(Error::NonFinite {
            op: format!("backward into {}", model.params.name(crate::autodiff::ParamId(i))),
        });
    }
    Ok(out)
}

/// Parameters pretraining may update: object expert (with its decoder when
/// reconstructing), scene expert and bridge.
pub fn pretrain_mask(model: &ModeModel) -> Vec<bool> {
    model.active_mask(&[Task::ObjectReconstruct, Task::SceneLocalize])
}

/// One optimizer step on `scenes`. Parameters the step's tapes never reached
/// are left alone (no decay), so disabled pipelines stay bit-identical.
pub fn pretrain_step(state: &mut TrainState, scenes: &[&Scene], cfg: &PretrainConfig, epoch: usize, lr: f64) -> Result<StepStats> {
    let start = Instant::now();
    let bg = batch_gradients(&state.model, scenes, cfg, state.step as u64)?;
    let allowed = pretrain_mask(&state.model);
    let active: Vec<bool> = allowed.iter().zip(&bg.touched).map(|(a, t)| *a && *t).collect();
    let norm = global_norm(
        &bg.grads
            .iter()
            .zip(&active)
            .filter(|(_, a)| **a)
            .map(|(t, _)| t.clone())
            .collect::<Vec<_>>(),
    );
    state.opt.step(&mut state.model.params, &bg.grads, &active, lr)?;
    let stats = StepStats {
        step: state.step,
        epoch,
        loss_total: bg.loss_total,
        loss_cd: bg.loss_cd,
        loss_giou: bg.loss_giou,
        grad_norm: norm,
        // whole microseconds, so the written record parses back to the same value
        wall_ms: start.elapsed().as_micros() as f64 / 1e3,
    };
    state.step += 1;
    Ok(stats)
}

/// Scene indices of the batch used at global step `step`.
pub fn batch_indices(cfg: &PretrainConfig, n: usize, step: usize) -> (usize, Vec<usize>) {
    let per_epoch = n.div_ceil(cfg.batch_size);
    let epoch = step / per_epoch;
    let within = step % per_epoch;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(cfg.seed, Stream::Shuffle, &[epoch as u64]));
    let lo = within * cfg.batch_size;
    let hi = (lo + cfg.batch_size).min(n);
    (epoch, order[lo..hi].to_vec())
}

/// Called after every step; a returned error aborts the run.
pub trait StepHook {
    fn on_step(&mut self, stats: &StepStats, state: &TrainState) -> Result<()>;
}

impl<F: FnMut(&StepStats, &TrainState) -> Result<()>> StepHook for F {
    fn on_step(&mut self, stats: &StepStats, state: &TrainState) -> Result<()> {
        self(stats, state)
    }
}

/// Runs from `state.step` to the configured end. Batches and all random draws
/// are functions of the global step, so a resumed state continues the trace
/// exactly.
pub fn pretrain_run(state: &mut TrainState, scenes: &[Scene], cfg: &PretrainConfig, hook: &mut dyn StepHook) -> Result<Vec<StepStats>> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::invalid("pretraining needs at least one scene"));
    }
    let total = cfg.total_steps(scenes.len());
    let mut trace = Vec::with_capacity(total.saturating_sub(state.step));
    while state.step < total {
        let (epoch, idx) = batch_indices(cfg, scenes.len(), state.step);
        let batch: Vec<&Scene> = idx.iter().map(|&i| &scenes[i]).collect();
        let lr = cfg.lr_at(state.step, total);
        let stats = pretrain_step(state, &batch, cfg, epoch, lr)?;
        hook.on_step(&stats, state)?;
        trace.push(stats);
    }
    Ok(trace)
}

/// A two-block scene and a width-8 model small enough for exhaustive
/// finite-difference checks. The barrier is off so gradients cross it.
pub fn micro_setup(seed: u64) -> Result<(ModeModel, Scene, PretrainConfig)> {
    use crate::model::{ObjectExpertConfig, SceneExpertConfig};
    let mcfg = ModelConfig {
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
            patch_size: 8,
            width: 8,
            depth: 1,
            decoder_depth: 1,
            num_queries: 2,
            heads: 2,
        },
        ..ModelConfig::default()
    };
    let model = ModeModel::new(&mcfg, seed)?;
    let spec = crate::scenegen::SceneSpec {
        num_points: 96,
        min_objects: 1,
        max_objects: 2,
        ..Default::default()
    };
    let scene = crate::scenegen::gen_scene(&spec, seed)?;
    let cfg = PretrainConfig {
        blocks: BlockConfig {
            num_blocks: 2,
            points_per_block: 16,
        },
        toggles: Toggles {
            stop_gradient: false,
            ..Toggles::default()
        },
        seed,
        ..PretrainConfig::default()
    };
    Ok((model, scene, cfg))
}
