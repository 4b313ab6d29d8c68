//! Training checkpoints: weights and optimizer state in named-array containers, everything
//! else in `state.toml`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use implant_depth_core::idpnet::{IdpConfig, IdpNet};
use implant_depth_core::ird::{DetectorConfig, RegionDetector};
use implant_depth_core::params::ParamSet;
use implant_depth_core::pipeline::PipelineConfig;
use implant_depth_core::schedule::{Stage, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::container::{read_arrays, write_arrays, NamedArrays};
use crate::error::{HarnessError, IoContext, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const STATE_FILE: &str = "state.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelConfig {
    Detector(DetectorConfig),
    Idpnet(IdpConfig),
}

impl ModelConfig {
    pub fn stage(&self) -> Stage {
        match self {
            ModelConfig::Detector(_) => Stage::Ird,
            ModelConfig::Idpnet(_) => Stage::Idpnet,
        }
    }
}

/// Per-epoch summary; the metric history of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub first_step_loss: f64,
    pub mean_loss: f64,
    /// Batch-averaged loss terms, averaged again over the epoch's steps.
    pub mean_terms: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct State {
    version: u32,
    stage: Stage,
    /// Completed epochs.
    epoch: usize,
    model: ModelConfig,
    train: TrainConfig,
    pipeline: PipelineConfig,
    dataset: Vec<String>,
    history: Vec<EpochStats>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub epoch: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pipeline: PipelineConfig,
    /// Ids of the training records, in the order they were given.
    pub dataset: Vec<String>,
    pub history: Vec<EpochStats>,
    pub params: NamedArrays,
    pub optimizer: NamedArrays,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).at(dir)?;
        write_arrays(dir, "weights", &self.params)?;
        write_arrays(dir, "optimizer", &self.optimizer)?;
        let state = State {
            version: CHECKPOINT_VERSION,
            stage: self.stage,
            epoch: self.epoch,
            model: self.model.clone(),
            train: self.train.clone(),
            pipeline: self.pipeline,
            dataset: self.dataset.clone(),
            history: self.history.clone(),
        };
        let text = toml::to_string(&state).map_err(|e| HarnessError::Config(format!("cannot serialize checkpoint state: {e}")))?;
        let path = dir.join(STATE_FILE);
        fs::write(&path, text).at(&path)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(STATE_FILE);
        let text = fs::read_to_string(&path).at(&path)?;
        let raw: toml::Table = toml::from_str(&text).map_err(|e| HarnessError::format(&path, e.to_string()))?;
        // Check the version before the rest of the schema so old files fail with a clear reason.
        let version = raw
            .get("version")
            .and_then(toml::Value::as_integer)
            .ok_or_else(|| HarnessError::field(&path, "version", "missing or not an integer"))?;
        if version != CHECKPOINT_VERSION as i64 {
            return Err(HarnessError::Version { path, found: version.clamp(0, u32::MAX as i64) as u32, expected: CHECKPOINT_VERSION });
        }
        let state: State = toml::from_str(&text).map_err(|e| HarnessError::format(&path, e.to_string()))?;
        if state.model.stage() != state.stage || state.train.stage != state.stage {
            return Err(HarnessError::format(&path, "stage, model kind and training config disagree"));
        }
        Ok(Self {
            stage: state.stage,
            epoch: state.epoch,
            model: state.model,
            train: state.train,
            pipeline: state.pipeline,
            dataset: state.dataset,
            history: state.history,
            params: read_arrays(dir, "weights")?,
            optimizer: read_arrays(dir, "optimizer")?,
        })
    }

    fn load_params(&self, params: &mut ParamSet) -> Result<()> {
        params.load_from(&self.params).map_err(|e| HarnessError::Mismatch(e.to_string()))
    }

    /// Rebuild the detector this checkpoint holds.
    pub fn detector(&self) -> Result<RegionDetector> {
        let ModelConfig::Detector(cfg) = &self.model else {
            return Err(HarnessError::Mismatch(format!("expected a detector checkpoint, found stage {:?}", self.stage)));
        };
        let mut det = RegionDetector::new(cfg.clone())?;
        self.load_params(det.params_mut())?;
        Ok(det)
    }

    /// Rebuild the depth network this checkpoint holds.
    pub fn idpnet(&self) -> Result<IdpNet> {
        let ModelConfig::Idpnet(cfg) = &self.model else {
            return Err(HarnessError::Mismatch(format!("expected a depth-network checkpoint, found stage {:?}", self.stage)));
        };
        let mut net = IdpNet::new(cfg.clone())?;
        self.load_params(net.params_mut())?;
        Ok(net)
    }
}
