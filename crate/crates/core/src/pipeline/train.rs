//! Minibatch training of both heads on relabeled random-walk data.

use log::{debug, info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use gridseq_nn::{AdamW, AdamWConfig, Tape};

use crate::data::ModifiedTrajectory;
use crate::model::{action_tokens, guidance_tokens, ActionItem, DhModel, GuidanceItem, ModelConfig};

use super::PipelineError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Optimizer steps (M).
    pub steps: usize,
    /// Minibatch size (b).
    pub batch_size: usize,
    pub q: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
    /// Emit a checkpoint every this many steps; 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub dropout: f64,
    pub guidance_weight: f64,
    pub null_slot_prob: f64,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 64,
            q: 2,
            k: 8,
            seed: 0,
            checkpoint_every: 0,
            embed_dim: 128,
            n_layers: 3,
            n_heads: 4,
            dropout: 0.1,
            guidance_weight: 1.0,
            null_slot_prob: 0.5,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(PipelineError::Config("steps and batch size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, n_cells: usize, n_switches: usize, rtg_scale: f64) -> ModelConfig {
        let mut c = ModelConfig::new(n_cells, n_switches, self.q, self.k);
        c.embed_dim = self.embed_dim;
        c.n_layers = self.n_layers;
        c.n_heads = self.n_heads;
        c.dropout = self.dropout;
        c.seed = self.seed;
        c.guidance_weight = self.guidance_weight;
        c.null_slot_prob = self.null_slot_prob;
        c.rtg_scale = rtg_scale;
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub guidance: f64,
    pub action: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

pub struct TrainOutcome {
    pub model: DhModel,
    pub optimizer: AdamW,
    pub trace: Vec<LossRecord>,
    pub rtg_init: f64,
}

/// Per-step generator; the checkpointed RNG state is just `(seed, step)`.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

/// Builds one minibatch: `b` guidance sequences and `b` action windows.
pub fn sample_batch(
    data: &[ModifiedTrajectory],
    usable: &[usize],
    config: &ModelConfig,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<GuidanceItem>, Vec<ActionItem>) {
    let mut guidance = Vec::with_capacity(batch);
    let mut actions = Vec::with_capacity(batch);
    for _ in 0..batch {
        let mt = &data[usable[rng.gen_range(0..usable.len())]];
        let start = rng.gen_range(0..mt.source.len());
        let null = rng.gen::<f64>() < config.null_slot_prob;
        guidance.push(GuidanceItem {
            tokens: guidance_tokens(&mt.guidance, null, config.rtg_scale),
            targets: mt.guidance.targets(),
        });
        let sample = mt.action_sample(start, config.k);
        let masks = sample
            .masks
            .iter()
            .map(|ids| {
                let mut m = vec![false; config.n_switches];
                ids.iter().for_each(|&i| m[i] = true);
                m
            })
            .collect();
        actions.push(ActionItem {
            tokens: action_tokens(&sample),
            targets: sample.actions.clone(),
            masks,
        });
    }
    (guidance, actions)
}

/// Largest absolute episode return, used as the RTG input scale.
pub fn rtg_scale_of(data: &[ModifiedTrajectory]) -> f64 {
    let m = data
        .iter()
        .map(|t| t.source.total_return().abs())
        .fold(0.0, f64::max);
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

pub fn train(
    data: &[ModifiedTrajectory],
    n_cells: usize,
    n_switches: usize,
    config: &TrainConfig,
    mut on_checkpoint: impl FnMut(usize, &DhModel, &AdamW) -> Result<(), PipelineError>,
) -> Result<TrainOutcome, PipelineError> {
    config.validate()?;
    let usable: Vec<usize> = (0..data.len()).filter(|&i| !data[i].source.is_empty()).collect();
    if usable.is_empty() {
        return Err(PipelineError::Config("training set has no non-empty trajectory".into()));
    }
    if let Some(mt) = data.iter().find(|mt| mt.subgoals.q != config.q || mt.goal.len() != 2 * n_cells) {
        return Err(PipelineError::Config(format!(
            "training set built with q = {} for {} cells; config wants q = {} for {n_cells}",
            mt.subgoals.q,
            mt.goal.len() / 2,
            config.q
        )));
    }
    let windows: usize = usable.iter().map(|&i| data[i].source.len()).sum();
    if config.batch_size > windows {
        warn!(
            "batch size {} exceeds the {windows} distinct windows; sampling with replacement",
            config.batch_size
        );
    }
    let rtg_scale = rtg_scale_of(data);
    let rtg_init = data
        .iter()
        .map(|t| t.source.total_return())
        .fold(f64::NEG_INFINITY, f64::max);
    let model_config = config.model_config(n_cells, n_switches, rtg_scale);
    let mut model = DhModel::new(model_config)?;
    let mut optimizer = AdamW::new(config.optimizer, &model.params);
    let mut trace = Vec::with_capacity(config.steps);
    info!(
        "training {} parameters on {} trajectories for {} steps",
        model.params.scalar_count(),
        data.len(),
        config.steps
    );
    for step in 0..config.steps {
        let mut rng = step_rng(config.seed, step);
        let (g, a) = sample_batch(data, &usable, &model.config, config.batch_size, &mut rng);
        let mut tape = Tape::new();
        let dropout_seed = (model.config.dropout > 0.0).then(|| rng.gen::<u64>());
        let loss = model.loss(&mut tape, &g, &a, dropout_seed)?;
        let grads = tape.backward(loss.total).param_grads(&tape, &model.params);
        let stats = optimizer
            .step(&mut model.params, &grads)
            .map_err(|source| PipelineError::Diverged { step: step + 1, source })?;
        let value = |v: Option<gridseq_nn::Var>| v.map_or(0.0, |v| tape.value(v)[[0, 0]]);
        let rec = LossRecord {
            step: step + 1,
            total: tape.value(loss.total)[[0, 0]],
            guidance: value(loss.guidance),
            action: value(loss.action),
            grad_norm: stats.grad_norm,
            lr: stats.lr,
        };
        if step % 100 == 0 || step + 1 == config.steps {
            debug!(
                "step {} loss {:.5} (guidance {:.5}, action {:.5})",
                rec.step, rec.total, rec.guidance, rec.action
            );
        }
        trace.push(rec);
        if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 && step + 1 < config.steps {
            on_checkpoint(step + 1, &model, &optimizer)?;
        }
    }
    Ok(TrainOutcome {
        model,
        optimizer,
        trace,
        rtg_init,
    })
}
