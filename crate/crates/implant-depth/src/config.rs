//! Experiment configuration in TOML.
//!
//! A config file only needs the keys it changes; everything else takes the desk-scale
//! default. Unknown keys are rejected so typos do not silently fall back to defaults.
//! `ExperimentConfig::default().to_toml()` prints the full, documented-by-example schema.

use std::fs;
use std::path::Path;

use implant_depth_core::idpnet::IdpConfig;
use implant_depth_core::ird::DetectorConfig;
use implant_depth_core::metrics::DEFAULT_THRESHOLDS;
use implant_depth_core::phantom::PhantomConfig;
use implant_depth_core::pipeline::PipelineConfig;
use implant_depth_core::schedule::{Stage, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, IoContext, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub phantom: PhantomConfig,
    /// Number of phantoms `generate-data` writes.
    pub count: usize,
    /// Seed of the first phantom; phantom `i` uses `seed + i`.
    pub seed: u64,
    pub train_fraction: f64,
    /// Seed of the train/test shuffle.
    pub split_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IrdSection {
    pub train: TrainConfig,
    pub model: DetectorConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdpnetSection {
    pub train: TrainConfig,
    pub model: IdpConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Write a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureConfig {
    pub ks: Vec<usize>,
    /// Slices sampled per k.
    pub samples: usize,
    /// Phantoms averaged when no data directory is given.
    pub phantoms: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub ird: IrdSection,
    pub idpnet: IdpnetSection,
    pub pipeline: PipelineConfig,
    pub run: RunConfig,
    pub eval: EvalConfig,
    pub texture: TextureConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataConfig { phantom: PhantomConfig::desk(), count: 100, seed: 0, train_fraction: 0.8, split_seed: 0 },
            ird: IrdSection { train: TrainConfig::ird(), model: DetectorConfig::desk() },
            idpnet: IdpnetSection { train: TrainConfig::idpnet(), model: IdpConfig::desk() },
            pipeline: PipelineConfig::desk(),
            run: RunConfig { checkpoint_every: 10 },
            eval: EvalConfig { thresholds: DEFAULT_THRESHOLDS.to_vec() },
            texture: TextureConfig { ks: vec![1, 5, 10, 15, 20], samples: 5, phantoms: 5 },
        }
    }
}

/// Overlay `user` onto `base`, failing on keys `base` does not have.
fn merge(base: &mut toml::Table, user: toml::Table, prefix: &str) -> std::result::Result<(), String> {
    for (key, value) in user {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match (base.get_mut(&key), value) {
            (None, _) => return Err(format!("unknown key `{path}`")),
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge(b, u, &path)?,
            (Some(slot), v) => *slot = v,
        }
    }
    Ok(())
}

impl ExperimentConfig {
    /// Parse and validate; `origin` names the source in error messages.
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        let syntax = |m: String| HarnessError::format(origin, m);
        let user: toml::Table = toml::from_str(text).map_err(|e| syntax(e.to_string()))?;
        let mut base = toml::Table::try_from(Self::default()).expect("defaults serialize");
        merge(&mut base, user, "").map_err(syntax)?;
        let cfg: Self = base.try_into().map_err(|e: toml::de::Error| syntax(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("experiment config is always representable in TOML")
    }

    /// Write the resolved config beside a run's outputs.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).at(parent)?;
        }
        fs::write(path, self.to_toml()).at(path)
    }

    /// Use `seed` for data generation, the split and both training stages.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.seed = seed;
        self.data.split_seed = seed;
        self.ird.train.seed = seed;
        self.idpnet.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.data.phantom.validate()?;
        self.ird.train.validate()?;
        self.idpnet.train.validate()?;
        self.ird.model.validate()?;
        self.idpnet.model.validate()?;
        if self.ird.train.stage != Stage::Ird || self.idpnet.train.stage != Stage::Idpnet {
            return Err(HarnessError::Config("ird.train.stage must be \"ird\" and idpnet.train.stage \"idpnet\"".into()));
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(HarnessError::Config(format!("data.train_fraction {} must lie in (0, 1)", self.data.train_fraction)));
        }
        if self.texture.ks.is_empty() || self.texture.samples < 2 || self.texture.phantoms == 0 {
            return Err(HarnessError::Config("texture needs at least one k, two samples and one phantom".into()));
        }
        if self.eval.thresholds.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(HarnessError::Config(format!("eval thresholds {:?} must lie in [0, 1]", self.eval.thresholds)));
        }
        let p = &self.pipeline;
        let ph = &self.data.phantom;
        if p.crop_d > ph.depth || p.crop_hw > ph.height.min(ph.width) {
            return Err(HarnessError::Config(format!(
                "crop {}x{}x{} does not fit phantoms of {}x{}x{}",
                p.crop_d, p.crop_hw, p.crop_hw, ph.depth, ph.height, ph.width
            )));
        }
        Ok(())
    }
}
