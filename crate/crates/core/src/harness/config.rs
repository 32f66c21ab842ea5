use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::baselines::{published, BaselineConstants};
use crate::data::{DatasetSource, DatasetSpec, Normalization};
use crate::error::{Error, Result};
use crate::ga::GaConfig;
use crate::model::Architecture;
use crate::otdd::{OtddConfig, Solver};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub arch: Architecture,
    /// Pre-trained weights (safetensors). Relative paths resolve against the
    /// weight cache.
    pub weights: Option<PathBuf>,
    /// Train the stem together with the selected blocks.
    pub stem_trainable: bool,
    /// Epochs of source pre-training when no weights are given (toy only).
    pub pretrain_epochs: usize,
    pub pretrain_learning_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: Architecture::EfficientNetB0,
            weights: None,
            stem_trainable: false,
            pretrain_epochs: 10,
            pretrain_learning_rate: 3e-3,
        }
    }
}

/// Baselines are either one of the built-in published sets, by key, or a
/// full table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BaselineRef {
    Published(String),
    Custom(Box<BaselineConstants>),
}

impl BaselineRef {
    pub fn resolve(&self) -> Result<BaselineConstants> {
        match self {
            BaselineRef::Published(key) => {
                published(key).ok_or_else(|| Error::Config(format!("unknown baseline {key:?}")))
            }
            BaselineRef::Custom(b) => Ok((**b).clone()),
        }
    }
}

/// Everything one run needs. Stored as TOML; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    /// Target dataset.
    pub dataset: DatasetSpec,
    /// Dataset the backbone was pre-trained on; needed for block importance.
    #[serde(default)]
    pub source: Option<DatasetSpec>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub ga: GaConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub otdd: OtddConfig,
    #[serde(default)]
    pub baseline_constants: Option<BaselineRef>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.ga.validate()?;
        self.train.validate()?;
        self.otdd.validate()?;
        if let Some(b) = &self.baseline_constants {
            b.resolve()?;
        }
        if self.dataset.num_classes == 0 {
            return Err(Error::Config("dataset.num_classes must be positive".into()));
        }
        Ok(())
    }

    /// Overrides every seed in the config.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.ga.seed = seed;
        self.train.seed = seed;
        self
    }

    /// Canonical JSON of everything that determines results: all fields
    /// except `output_dir`, keys sorted.
    pub fn hash_preimage(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(m) = v.as_object_mut() {
            m.remove("output_dir");
        }
        Ok(serde_json::to_string(&v)?)
    }

    /// Hex SHA-256 of [`RunConfig::hash_preimage`].
    pub fn config_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.hash_preimage()?.as_bytes())))
    }

    /// The CI-scale setup: the toy CNN pre-trained on three synthetic
    /// pattern classes, transferred to three other pattern classes.
    pub fn toy(output_dir: impl Into<PathBuf>) -> Self {
        let synthetic = |name: &str, offset: usize, per_class: usize, seed: u64| DatasetSpec {
            name: name.into(),
            source: DatasetSource::Synthetic {
                per_class,
                pattern_offset: offset,
                noise: 0.08,
                seed,
                native_size: 32,
            },
            num_classes: 3,
            image_size: (32, 32),
            val_fraction: 0.1,
            test_fraction: 0.1,
            normalization: Normalization::Unit,
            augment_flip: false,
        };
        RunConfig {
            output_dir: output_dir.into(),
            dataset: synthetic("synthetic-target", 3, 120, 2),
            source: Some(synthetic("synthetic-source", 0, 100, 1)),
            model: ModelConfig {
                arch: Architecture::Toy,
                weights: None,
                stem_trainable: false,
                pretrain_epochs: 10,
                pretrain_learning_rate: 3e-3,
            },
            ga: GaConfig {
                generations: 10,
                early_stop: false,
                ..GaConfig::default()
            },
            train: TrainConfig {
                learning_rate: 3e-4,
                batch_size: 16,
                epochs: 15,
                block_accuracy_epochs: 10,
                ..TrainConfig::default()
            },
            otdd: OtddConfig {
                solver: Solver::Exact,
                subsample: 60,
                ..OtddConfig::default()
            },
            baseline_constants: None,
        }
    }
}

/// Directory for pre-trained weights: `BLOCKSEL_CACHE` when set, otherwise
/// `<output_dir>/cache`.
pub fn cache_dir(cfg: &RunConfig) -> PathBuf {
    std::env::var_os("BLOCKSEL_CACHE")
        .map(PathBuf::from)
        .unwrap_or_else(|| cfg.output_dir.join("cache"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip() {
        let mut cfg = RunConfig::toy("out");
        cfg.baseline_constants = Some(BaselineRef::Published("food101".into()));
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        let mut custom = cfg.clone();
        custom.baseline_constants = Some(BaselineRef::Custom(Box::new(published("mangoleafbd").unwrap())));
        assert_eq!(RunConfig::from_toml(&custom.to_toml().unwrap()).unwrap(), custom);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = RunConfig::toy("out").to_toml().unwrap();
        let typo = text.replace("[ga]\n", "[ga]\npopulaton_size = 3\n");
        assert!(matches!(RunConfig::from_toml(&typo), Err(Error::Config(_))));
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::toy("a");
        let b = RunConfig::toy("elsewhere");
        assert_eq!(a.config_hash().unwrap(), b.config_hash().unwrap());
        assert_ne!(a.config_hash().unwrap(), a.clone().with_seed(9).config_hash().unwrap());
        let mut d = a.clone();
        d.train = TrainConfig::default();
        assert!(d.hash_preimage().unwrap().contains("\"learning_rate\":0.0001"));
    }
}
