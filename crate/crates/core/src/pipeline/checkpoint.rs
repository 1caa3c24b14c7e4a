//! Versioned JSON checkpoints.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use gridseq_nn::{AdamW, AdamWState, NamedTensor};

use crate::grid::FeederGraph;
use crate::model::{DhModel, ModelConfig};

use super::train::TrainConfig;
use super::PipelineError;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// Optimizer steps already drawn from the per-step stream.
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub feeder_hash: String,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub rng: RngState,
    /// Fallback initial return-to-go when no oracle value is available.
    pub rtg_init: f64,
    pub params: Vec<NamedTensor>,
    pub optimizer: Option<AdamWState>,
}

impl Checkpoint {
    pub fn new(
        graph: &FeederGraph,
        model: &DhModel,
        optimizer: Option<&AdamW>,
        train: Option<&TrainConfig>,
        rtg_init: f64,
    ) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            feeder_hash: graph.feeder_hash(),
            model: model.config.clone(),
            train: train.cloned(),
            rng: RngState {
                seed: model.config.seed,
                step: optimizer.map_or(0, |o| o.step_count()),
            },
            rtg_init,
            params: model.params.to_tensors(),
            optimizer: optimizer.map(|o| o.state(&model.params)),
        }
    }

    pub fn to_model(&self) -> Result<DhModel, PipelineError> {
        let mut m = DhModel::new(self.model.clone())?;
        m.params
            .load_tensors(&self.params)
            .map_err(|e| PipelineError::Checkpoint(e.to_string()))?;
        Ok(m)
    }

    pub fn to_optimizer(&self, model: &DhModel) -> Result<Option<AdamW>, PipelineError> {
        self.optimizer
            .as_ref()
            .map(|s| AdamW::from_state(s, &model.params).map_err(|e| PipelineError::Checkpoint(e.to_string())))
            .transpose()
    }

    /// Errors unless the checkpoint was trained on `graph` (or `zero_shot` is set).
    pub fn check_feeder(&self, graph: &FeederGraph, zero_shot: bool) -> Result<(), PipelineError> {
        let expected = graph.feeder_hash();
        if zero_shot || expected == self.feeder_hash {
            return Ok(());
        }
        Err(PipelineError::FeederMismatch {
            expected,
            found: self.feeder_hash.clone(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<(), PipelineError> {
    let path = path.as_ref();
    fs::write(path, ckpt.to_json()).map_err(|e| PipelineError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, PipelineError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    let ckpt: Checkpoint =
        serde_json::from_str(&text).map_err(|e| PipelineError::Checkpoint(format!("{}: {e}", path.display())))?;
    if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(PipelineError::Checkpoint(format!(
            "format version {}, expected {CHECKPOINT_FORMAT_VERSION}",
            ckpt.format_version
        )));
    }
    Ok(ckpt)
}
