//! Experiment configuration file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{parse_pipelines, AugPipeline, PIPELINES_COLOR};
use crate::episodes::SyntheticSpec;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::pipeline::{FinetuneConfig, TrainConfig};

/// Locations and generators of the source and target datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source_dir: PathBuf,
    pub target_dir: PathBuf,
    pub source: SyntheticSpec,
    pub target: SyntheticSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source_dir: "data/source".into(),
            target_dir: "data/target".into(),
            source: SyntheticSpec {
                name: "source".into(),
                classes: 8,
                samples_per_class: 100,
                seed: 1,
                ..SyntheticSpec::default()
            },
            target: SyntheticSpec {
                name: "target".into(),
                classes: 10,
                samples_per_class: 40,
                domain_shift: 0.8,
                seed: 2,
                class_offset: 8,
                ..SyntheticSpec::default()
            },
        }
    }
}

/// Augmentation pipelines used for ensemble prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub pipelines: Vec<String>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            pipelines: PIPELINES_COLOR.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
    pub augment: AugmentConfig,
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.data.source.validate()?;
        self.data.target.validate()?;
        self.train.validate()?;
        self.finetune.validate()?;
        self.eval.validate()?;
        self.pipelines()?;
        Ok(())
    }

    /// Augmentation pipelines producing images at the model input size.
    pub fn pipelines(&self) -> Result<Vec<AugPipeline>> {
        parse_pipelines(&self.augment.pipelines, self.train.backbone.input_hw)
    }

    /// Overrides every seed with one derived from `seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.data.source.seed = crate::seed::derive(seed, &[0]);
        self.data.target.seed = crate::seed::derive(seed, &[1]);
        self.train.seed = crate::seed::derive(seed, &[2]);
        self.eval.seed = crate::seed::derive(seed, &[3]);
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}
