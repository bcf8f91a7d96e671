//! Experiment configuration file.
//!
//! A single JSON document. `version`, `encoder`, `dataset`, `train` and
//! `output_dir` must be present; fields inside the sections fall back to
//! their documented defaults. Unknown fields are rejected everywhere.
//!
//! ```json
//! {
//!   "version": 1,
//!   "encoder": { "d_model": 32, "d_embed": 16, "seed": 7 },
//!   "dataset": { "num_classes": 8, "per_class_count": 40, "sigma": 0.5, "seed": 1 },
//!   "train": { "learning_rate": 0.2, "epochs": 50, "shots": 16, "seeds": [1, 2, 3], "mode": "dapt" },
//!   "output_dir": "runs/default"
//! }
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DatasetConfig, FewShotDataset};
use crate::encoders::{EncoderConfig, FrozenEncoderPair};
use crate::error::{Error, Result};
use crate::trainer::{TrainConfig, BETA_GRID};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisToggles {
    pub pdist: bool,
    pub hull: bool,
    pub beta_t_grid: Vec<f64>,
    pub beta_v_grid: Vec<f64>,
}

impl Default for AnalysisToggles {
    fn default() -> Self {
        Self {
            pdist: true,
            hull: true,
            beta_t_grid: BETA_GRID.to_vec(),
            beta_v_grid: BETA_GRID.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub encoder: EncoderConfig,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub analysis: AnalysisToggles,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            encoder: EncoderConfig::default(),
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            analysis: AnalysisToggles::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {}, expected {CONFIG_VERSION}",
                self.version
            )));
        }
        self.encoder.validate()?;
        self.train.validate()?;
        if self.dataset.num_classes < 2 {
            return Err(Error::Config("dataset.num_classes must be >= 2".into()));
        }
        if self.train.shots >= self.dataset.per_class_count {
            return Err(Error::Config(format!(
                "train.shots ({}) must be below dataset.per_class_count ({})",
                self.train.shots, self.dataset.per_class_count
            )));
        }
        Ok(())
    }

    pub fn build_dataset(&self) -> Result<FewShotDataset> {
        FewShotDataset::from_config(&self.dataset, self.encoder.n_patches, self.encoder.d_model)
    }

    pub fn build_encoders(&self) -> Result<FrozenEncoderPair> {
        FrozenEncoderPair::build(self.encoder, self.dataset.num_classes)
    }
}
