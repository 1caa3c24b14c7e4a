//! Subgoal-conditioned inference: one guidance pass, then windowed action
//! selection until the environment terminates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{compute_rtg, final_goal, subgoal_offsets, ActionSample, GuidanceSample, GuidanceSlot, Trajectory};
use crate::env::Env;
use crate::grid::{Contingencies, FeederGraph};
use crate::model::DhModel;

use super::validate::{replay_validate, ReplayReport};
use super::PipelineError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferenceMode {
    Argmax,
    Sample,
}

impl std::str::FromStr for InferenceMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "argmax" => Ok(Self::Argmax),
            "sample" => Ok(Self::Sample),
            other => Err(format!("unknown mode {other}; expected argmax or sample")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RolloutOptions {
    pub mode: InferenceMode,
    pub seed: u64,
    pub rtg0: f64,
    /// Replaces the guidance head's rounded subgoals.
    pub pinned_subgoals: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    #[serde(rename = "return")]
    pub ret: f64,
    pub restored_power: f64,
    pub violated: bool,
    pub actions: Vec<usize>,
    /// Ended on an empty mask before the horizon.
    pub terminated_early: bool,
    pub replay: ReplayReport,
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub trajectory: Trajectory,
    pub trial: TrialResult,
    pub raw_subgoals: Vec<Vec<f64>>,
    pub subgoals: Vec<Vec<f64>>,
}

fn round(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| if x >= 0.5 { 1.0 } else { 0.0 }).collect()
}

pub fn rollout(
    model: &DhModel,
    graph: &FeederGraph,
    contingencies: &Contingencies,
    opts: &RolloutOptions,
) -> Result<Rollout, PipelineError> {
    let cfg = &model.config;
    if cfg.n_cells != graph.n_cells() || cfg.n_switches != graph.n_switches() {
        return Err(PipelineError::Config(format!(
            "model expects {} cells / {} switches, feeder has {} / {}",
            cfg.n_cells,
            cfg.n_switches,
            graph.n_cells(),
            graph.n_switches()
        )));
    }
    let mut env = Env::new(graph, contingencies.clone())?;
    let goal = final_goal(graph.n_cells());
    let s0 = env.state().to_vector();
    let blank = GuidanceSlot {
        state: vec![0.0; s0.len()],
        action: None,
        rtg: 0.0,
    };
    let sample = GuidanceSample {
        goal: goal.clone(),
        initial: GuidanceSlot {
            state: s0.clone(),
            action: None,
            rtg: opts.rtg0,
        },
        subgoals: vec![blank; cfg.q],
    };
    let raw = model.guidance_forward(&sample, true)?;
    let subgoals = match &opts.pinned_subgoals {
        Some(p) => p.clone(),
        None => raw.iter().map(|g| round(g)).collect(),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut states = vec![env.state().clone()];
    let mut vecs = vec![s0];
    let mut actions = Vec::new();
    let mut masks = Vec::new();
    let mut rewards = Vec::new();
    let mut violated = false;
    while !env.is_done() {
        let t = actions.len();
        let w = (t + 1).saturating_sub(cfg.k);
        let anchor = vecs[w].clone();
        let window = ActionSample {
            goal: goal.clone(),
            offsets: subgoal_offsets(&subgoals, &anchor),
            anchor,
            actions: actions[w..t].to_vec(),
            states: vecs[w + 1..=t].to_vec(),
            masks: Vec::new(),
        };
        let mask = env.mask();
        let (probs, _) = model.action_forward(&window, &mask)?;
        let a = match opts.mode {
            InferenceMode::Argmax => probs.argmax(),
            InferenceMode::Sample => sample_index(&probs.probs, &mut rng),
        };
        let out = env.step(a)?;
        violated |= out.info.violated();
        vecs.push(out.next_state.to_vector());
        states.push(out.next_state);
        actions.push(a);
        masks.push(mask.allowed_ids());
        rewards.push(out.reward);
    }
    let rtgs = compute_rtg(&rewards);
    let trajectory = Trajectory {
        states,
        actions: actions.clone(),
        masks,
        rewards,
        rtgs,
        violated,
        restored_power: env.restored_power(),
    };
    let trial = TrialResult {
        ret: trajectory.total_return(),
        restored_power: env.restored_power(),
        violated,
        terminated_early: actions.len() < graph.horizon,
        replay: replay_validate(graph, contingencies, &actions),
        actions,
    };
    Ok(Rollout {
        trajectory,
        trial,
        raw_subgoals: raw,
        subgoals,
    })
}

fn sample_index(p: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &pi) in p.iter().enumerate() {
        if pi > 0.0 {
            acc += pi;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}
