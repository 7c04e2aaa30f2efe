//! Run configuration: one TOML file covering data, model, pretraining,
//! fine-tuning and evaluation. Unknown keys are rejected and every field has
//! a default, so an empty file is a valid configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::AdamWConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pretrain::PretrainConfig;
use crate::scenegen::SceneSpec;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    /// Parameters are stored as 32-bit floats in checkpoints.
    F32,
    #[default]
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub scene: SceneSpec,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
    /// Labeled shapes per class for fine-tuning and for held-out evaluation.
    pub shapes_train_per_class: usize,
    pub shapes_test_per_class: usize,
    pub shape_points: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            train_scenes: 16,
            val_scenes: 4,
            test_scenes: 8,
            shapes_train_per_class: 24,
            shapes_test_per_class: 16,
            shape_points: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            optimizer: AdamWConfig {
                lr: 1e-3,
                weight_decay: 0.05,
                ..AdamWConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Seed for the blocks drawn at evaluation time.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { seed: 1234 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.data.scene.validate()?;
        self.model.validate()?;
        self.pretrain().validate()?;
        self.finetune.optimizer.validate()?;
        if self.data.train_scenes == 0 {
            return Err(Error::Config("data.train_scenes must be at least 1".into()));
        }
        if self.finetune.batch_size == 0 {
            return Err(Error::Config("finetune.batch_size must be at least 1".into()));
        }
        let n_o = self.pretrain.blocks.points_per_block;
        let o = &self.model.object;
        if o.num_patches > n_o || o.patch_size > n_o {
            return Err(Error::Config(format!(
                "object patches ({} of {} points) do not fit blocks of {n_o} points",
                o.num_patches, o.patch_size
            )));
        }
        let s = &self.model.scene;
        let n_s = self.data.scene.num_points;
        if s.num_patches > n_s || s.patch_size > n_s || self.pretrain.blocks.points_per_block > n_s {
            return Err(Error::Config(format!("scene patches or blocks do not fit scenes of {n_s} points")));
        }
        Ok(())
    }

    /// Pretraining settings with the run seed filled in.
    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            seed: self.seed,
            ..self.pretrain.clone()
        }
    }

    /// The fully resolved configuration as TOML; embedded in every artifact.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Short hash of [`Self::echo`].
    pub fn fingerprint(&self) -> String {
        fingerprint(&self.echo())
    }
}

pub fn fingerprint(echo: &str) -> String {
    hex::encode(&Sha256::digest(echo.as_bytes())[..8])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("sed = 3").is_err());
        assert!(RunConfig::from_toml("[model.object]\nwidht = 8").is_err());
    }

    #[test]
    fn echo_reparses_to_same_config() {
        let cfg = RunConfig::from_toml("seed = 9\nprecision = \"f32\"\n[pretrain.toggles]\nmatching = \"hungarian\"").unwrap();
        assert_eq!(cfg.pretrain().seed, 9);
        let back = RunConfig::from_toml(&cfg.echo()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.fingerprint(), cfg.fingerprint());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_toml("[pretrain.toggles]\nscene_regression = false").is_err());
        assert!(RunConfig::from_toml("[model.object]\nwidth = 10\nheads = 4").is_err());
    }
}
