//! Downstream harnesses: object classification with only the object encoder
//! and class head trainable, and block localization through the full scene
//! pipeline.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamW, Graph, Tensor};
use crate::config::FinetuneConfig;
use crate::error::{Error, Result};
use crate::geom::{centroid, iou, normalize_unit, Box3D, NormalizeMode, PointSet};
use crate::model::{boxes_from_tensor, ModeModel, Task};
use crate::pretrain::{forward_scene, prepare_scene, PretrainConfig};
use crate::rng::{self, Stream};
use crate::scenegen::{LabeledShape, Scene};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub task: String,
    pub metrics: BTreeMap<String, f64>,
    pub samples: usize,
    pub config_fingerprint: String,
}

impl EvalReport {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }
}

/// Shapes are centred on their centroid and scaled into the unit cube before
/// they reach the object expert.
pub fn classifier_input(points: &PointSet) -> PointSet {
    normalize_unit(points, centroid(points), NormalizeMode::MaxAbs).0
}

fn class_count(shapes: &[LabeledShape]) -> usize {
    let mut seen: Vec<usize> = shapes.iter().map(|s| s.class.index()).collect();
    seen.sort_unstable();
    seen.dedup();
    seen.len()
}

/// Fine-tunes the object encoder and class head with cross-entropy. Returns
/// the mean training loss of every epoch. Parameters outside the
/// classification task are never written.
pub fn finetune_classify(model: &mut ModeModel, shapes: &[LabeledShape], cfg: &FinetuneConfig, seed: u64) -> Result<Vec<f64>> {
    if class_count(shapes) < 2 {
        return Err(Error::invalid("classification fine-tuning needs at least two classes"));
    }
    if shapes.iter().any(|s| s.class.index() >= model.cfg.num_classes) {
        return Err(Error::invalid("shape label outside the classifier's range"));
    }
    cfg.optimizer.validate()?;
    let inputs: Vec<PointSet> = shapes.par_iter().map(|s| classifier_input(&s.points)).collect();
    let active = model.active_mask(&[Task::ObjectClassify]);
    let mut opt = AdamW::new(cfg.optimizer, &model.params);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..shapes.len()).collect();
        order.shuffle(&mut rng::stream(seed, Stream::Shuffle, &[epoch as u64]));
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let b = batch.len() as f64;
            let m: &ModeModel = model;
            let per: Vec<Result<(Vec<Tensor>, f64)>> = batch
                .par_iter()
                .map(|&i| {
                    let mut g = Graph::new();
                    let logits = m.classify(&mut g, &inputs[i])?;
                    let loss = g.cross_entropy(logits, &[shapes[i].class.index()])?;
                    g.check_finite()?;
                    let scaled = g.scale(loss, 1.0 / b);
                    let grads = g.backward(scaled)?;
                    Ok((g.param_grads(&grads, &m.params), g.value(loss).item()))
                })
                .collect();
            let mut acc: Option<Vec<Tensor>> = None;
            for r in per {
                let (gr, l) = r?;
                total += l;
                match &mut acc {
                    None => acc = Some(gr),
                    Some(a) => {
                        for (x, y) in a.iter_mut().zip(&gr) {
                            for (p, q) in x.data_mut().iter_mut().zip(y.data()) {
                                *p += q;
                            }
                        }
                    }
                }
            }
            let grads = acc.expect("nonempty batch");
            opt.step(&mut model.params, &grads, &active, cfg.optimizer.lr)?;
        }
        epoch_losses.push(total / shapes.len() as f64);
    }
    Ok(epoch_losses)
}

/// Argmax class per shape (lowest index on ties).
pub fn predict_classes(model: &ModeModel, shapes: &[LabeledShape]) -> Result<Vec<usize>> {
    shapes
        .par_iter()
        .map(|s| {
            let mut g = Graph::new();
            let logits = model.classify(&mut g, &classifier_input(&s.points))?;
            let row = g.value(logits).row(0);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            Ok(best)
        })
        .collect()
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> Result<f64> {
    if pred.is_empty() || pred.len() != labels.len() {
        return Err(Error::invalid("accuracy needs equally long, nonempty label lists"));
    }
    let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

pub fn eval_classify(model: &ModeModel, shapes: &[LabeledShape], fingerprint: &str) -> Result<EvalReport> {
    if shapes.is_empty() {
        return Err(Error::invalid("no shapes to evaluate"));
    }
    let pred = predict_classes(model, shapes)?;
    let labels: Vec<usize> = shapes.iter().map(|s| s.class.index()).collect();
    Ok(EvalReport {
        task: "object_classify".into(),
        metrics: BTreeMap::from([("accuracy".to_string(), accuracy(&pred, &labels)?)]),
        samples: shapes.len(),
        config_fingerprint: fingerprint.into(),
    })
}

/// Per ground-truth box: the best IoU among the predictions paired with it
/// (0 when none is).
pub fn best_matched_ious(preds: &[Box3D], gts: &[Box3D], pairing: &[(usize, usize)]) -> Vec<f64> {
    let mut best = vec![0.0_f64; gts.len()];
    for &(p, g) in pairing {
        best[g] = best[g].max(iou(&preds[p], &gts[g]));
    }
    best
}

/// Mean IoU and recall at 0.25 / 0.5 over a flat list of per-box IoUs.
pub fn localization_metrics(ious: &[f64]) -> BTreeMap<String, f64> {
    let n = ious.len().max(1) as f64;
    let frac = |t: f64| ious.iter().filter(|&&x| x >= t).count() as f64 / n;
    BTreeMap::from([
        ("mean_iou".to_string(), ious.iter().sum::<f64>() / n),
        ("recall_at_025".to_string(), frac(0.25)),
        ("recall_at_05".to_string(), frac(0.5)),
    ])
}

/// Runs the full scene pipeline on blocks drawn with `eval_seed` and scores
/// the paired predictions. Scene rotation is off; everything else follows
/// `cfg`, including the mask applied to the object tokens.
pub fn eval_localize(model: &ModeModel, scenes: &[Scene], cfg: &PretrainConfig, eval_seed: u64, fingerprint: &str) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::invalid("no scenes to evaluate"));
    }
    if !cfg.toggles.scene_regression {
        return Err(Error::invalid("localization needs the scene regression pipeline"));
    }
    let mut cfg = cfg.clone();
    cfg.toggles.scene_rotation = false;
    let per_scene: Vec<Result<Vec<f64>>> = scenes
        .par_iter()
        .map(|s| {
            let base = rng::derive(eval_seed, Stream::Eval, &[s.seed]);
            let prep = prepare_scene(&s.points, &cfg, &model.cfg, base)?;
            let mut g = Graph::new();
            let out = forward_scene(model, &mut g, &prep, &cfg)?;
            let boxes = out.boxes.expect("scene regression enabled");
            let preds = boxes_from_tensor(g.value(boxes))?;
            Ok(best_matched_ious(&preds, &prep.gt, &out.pairing))
        })
        .collect();
    let mut ious = Vec::new();
    for r in per_scene {
        ious.extend(r?);
    }
    Ok(EvalReport {
        task: "scene_localize".into(),
        samples: ious.len(),
        metrics: localization_metrics(&ious),
        config_fingerprint: fingerprint.into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ObjectExpertConfig};
    use crate::scenegen::{gen_shape_dataset, ShapeClass};

    fn small_model() -> ModeModel {
        let cfg = ModelConfig {
            object: ObjectExpertConfig {
                num_patches: 8,
                patch_size: 8,
                width: 16,
                depth: 1,
                decoder_depth: 1,
                mask_ratio: 0.6,
                heads: 2,
            },
            ..ModelConfig::default()
        };
        ModeModel::new(&cfg, 2).unwrap()
    }

    #[test]
    fn accuracy_matches_confusion_trace() {
        let pred = [0, 1, 2, 3, 3, 1, 0, 2, 2];
        let labels = [0, 1, 2, 3, 0, 2, 0, 2, 1];
        let mut conf = [[0usize; 4]; 4];
        for (p, l) in pred.iter().zip(&labels) {
            conf[*l][*p] += 1;
        }
        let trace: usize = (0..4).map(|i| conf[i][i]).sum();
        assert_eq!(accuracy(&pred, &labels).unwrap(), trace as f64 / 9.0);
        assert_eq!(accuracy(&labels, &labels).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0, 0, 0], &[0, 1, 2, 3]).unwrap(), 0.25);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn localization_metric_edges() {
        let gts = vec![Box3D::new([0.0; 3], [1.0; 3]).unwrap(), Box3D::new([3.0; 3], [0.5; 3]).unwrap()];
        let pairs = vec![(0, 0), (1, 1)];
        let m = localization_metrics(&best_matched_ious(&gts, &gts, &pairs));
        assert_eq!((m["mean_iou"], m["recall_at_025"], m["recall_at_05"]), (1.0, 1.0, 1.0));
        let flat: Vec<Box3D> = gts.iter().map(|b| Box3D::new(b.center, [0.0; 3]).unwrap()).collect();
        let m = localization_metrics(&best_matched_ious(&flat, &gts, &pairs));
        assert_eq!(m["mean_iou"], 0.0);
    }

    #[test]
    fn single_class_rejected() {
        let mut model = small_model();
        let shapes: Vec<LabeledShape> = gen_shape_dataset(3, 64, 1)
            .unwrap()
            .into_iter()
            .filter(|s| s.class == ShapeClass::ALL[0])
            .collect();
        assert!(finetune_classify(&mut model, &shapes, &FinetuneConfig::default(), 0).is_err());
    }

    #[test]
    fn finetune_leaves_scene_side_untouched() {
        let mut model = small_model();
        let before = model.params.clone();
        let shapes = gen_shape_dataset(2, 64, 4).unwrap();
        let cfg = FinetuneConfig {
            epochs: 1,
            ..Default::default()
        };
        finetune_classify(&mut model, &shapes, &cfg, 0).unwrap();
        for (id, name, t) in model.params.iter() {
            let changed = t != before.get(id);
            if name.starts_with("scene.") || name.starts_with("bridge.") || name.starts_with("object.decoder.") {
                assert!(!changed, "{name} changed");
            }
        }
        let enc = model.param_ids_where(|n| n.starts_with("object.encoder."));
        assert!(enc.iter().any(|&id| model.params.get(id) != before.get(id)));
        let rep = eval_classify(&model, &shapes, "x").unwrap();
        let back = EvalReport::from_toml(&rep.to_toml()).unwrap();
        assert_eq!(back, rep);
    }
}
