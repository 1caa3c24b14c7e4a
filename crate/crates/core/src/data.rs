//! Offline trajectories, return-to-go relabeling, subgoal extraction and the
//! two sequence layouts consumed by the model.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Env, EnvError, SystemState};
use crate::grid::{Contingencies, FeederGraph};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("n_episodes must be at least 1")]
    NoEpisodes,
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset format version {found}, expected {expected}")]
    Version { expected: u32, found: u32 },
    #[error("dataset was built for feeder {found}, graph hash is {expected}")]
    FeederHash { expected: String, found: String },
    #[error("corrupt dataset: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// One recorded episode. `states` holds `s_0..s_L`; the other per-step lists hold `L` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    #[serde(with = "state_codec")]
    pub states: Vec<SystemState>,
    pub actions: Vec<usize>,
    /// Allowed switch ids at each step, before the action was taken.
    pub masks: Vec<Vec<usize>>,
    pub rewards: Vec<f64>,
    pub rtgs: Vec<f64>,
    pub violated: bool,
    pub restored_power: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn total_return(&self) -> f64 {
        self.rtgs.first().copied().unwrap_or(0.0)
    }

    pub fn action_one_hot(&self, t: usize, n_switches: usize) -> Vec<f64> {
        let mut v = vec![0.0; n_switches];
        v[self.actions[t]] = 1.0;
        v
    }
}

/// Drives `env` to termination with `choose` picking from the allowed ids.
pub fn record_episode(
    env: &mut Env<'_>,
    mut choose: impl FnMut(&SystemState, &[usize]) -> usize,
) -> Result<Trajectory, EnvError> {
    let mut states = vec![env.reset()];
    let mut actions = Vec::new();
    let mut masks = Vec::new();
    let mut rewards = Vec::new();
    let mut violated = false;
    while !env.is_done() {
        let allowed = env.mask().allowed_ids();
        let a = choose(env.state(), &allowed);
        let out = env.step(a)?;
        violated |= out.info.violated();
        states.push(out.next_state);
        actions.push(a);
        masks.push(allowed);
        rewards.push(out.reward);
    }
    let rtgs = compute_rtg(&rewards);
    Ok(Trajectory {
        states,
        actions,
        masks,
        rewards,
        rtgs,
        violated,
        restored_power: env.restored_power(),
    })
}

/// Uniform random walks over mask-allowed switches. Episode `i` uses seed `seed + i`.
pub fn collect_random_walks(
    graph: &FeederGraph,
    contingencies: &Contingencies,
    n_episodes: usize,
    seed: u64,
) -> Result<Vec<Trajectory>, DataError> {
    if n_episodes == 0 {
        return Err(DataError::NoEpisodes);
    }
    let base = Env::new(graph, contingencies.clone())?;
    (0..n_episodes)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let mut env = base.clone();
            record_episode(&mut env, |_, allowed| allowed[rng.gen_range(0..allowed.len())])
                .map_err(DataError::from)
        })
        .collect()
}

/// Suffix sums: `out[t] = rewards[t] + out[t + 1]`.
pub fn compute_rtg(rewards: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc += rewards[t];
        out[t] = acc;
    }
    out
}

/// `ceil(n * N / (q + 1))` for `n = 1..=q`.
pub fn subgoal_thresholds(n_cells: usize, q: usize) -> Vec<usize> {
    (1..=q).map(|n| (n * n_cells).div_ceil(q + 1)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgoalSet {
    pub q: usize,
    #[serde(with = "state_codec")]
    pub goals: Vec<SystemState>,
    /// Index into the trajectory's states for each goal.
    pub indices: Vec<usize>,
}

pub fn extract_subgoals(traj: &Trajectory, q: usize, n_cells: usize) -> SubgoalSet {
    let last = traj.states.len() - 1;
    let indices: Vec<usize> = subgoal_thresholds(n_cells, q)
        .into_iter()
        .map(|th| {
            traj.states
                .iter()
                .position(|s| s.energized_count() >= th)
                .unwrap_or(last)
        })
        .collect();
    SubgoalSet {
        q,
        goals: indices.iter().map(|&m| traj.states[m].clone()).collect(),
        indices,
    }
}

/// Final goal: every cell energized, frontier half masked to zero.
pub fn final_goal(n_cells: usize) -> Vec<f64> {
    let mut g = vec![1.0; n_cells];
    g.resize(2 * n_cells, 0.0);
    g
}

/// A `(s, a, R)` triple of the guidance layout. `action` is `None` past the last step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSlot {
    pub state: Vec<f64>,
    pub action: Option<usize>,
    pub rtg: f64,
}

/// `[G, s_0, a_0, R_0, (s_m1, a_m1, R_m1), ..., (s_mq, a_mq, R_mq)]`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSample {
    pub goal: Vec<f64>,
    pub initial: GuidanceSlot,
    pub subgoals: Vec<GuidanceSlot>,
}

impl GuidanceSample {
    pub fn token_count(&self) -> usize {
        1 + 3 + 3 * self.subgoals.len()
    }

    pub fn targets(&self) -> Vec<Vec<f64>> {
        self.subgoals.iter().map(|s| s.state.clone()).collect()
    }
}

fn slot_at(traj: &Trajectory, t: usize) -> GuidanceSlot {
    GuidanceSlot {
        state: traj.states[t].to_vector(),
        action: traj.actions.get(t).copied(),
        rtg: traj.rtgs.get(t).copied().unwrap_or(0.0),
    }
}

pub fn build_guidance_sample(traj: &Trajectory, subgoals: &SubgoalSet, goal: &[f64]) -> GuidanceSample {
    GuidanceSample {
        goal: goal.to_vec(),
        initial: slot_at(traj, 0),
        subgoals: subgoals.indices.iter().map(|&m| slot_at(traj, m)).collect(),
    }
}

/// `[G, s_w, g_1 - s_w, ..., g_q - s_w, a_w, s_w+1, a_w+1, ...]`. No RTG anywhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSample {
    pub goal: Vec<f64>,
    pub anchor: Vec<f64>,
    pub offsets: Vec<Vec<f64>>,
    /// `actions[0]` is the anchor action; `states[j]` precedes `actions[j + 1]`.
    pub actions: Vec<usize>,
    pub states: Vec<Vec<f64>>,
    /// Allowed ids for each entry of `actions`.
    pub masks: Vec<Vec<usize>>,
}

impl ActionSample {
    pub fn token_count(&self) -> usize {
        2 + self.offsets.len() + self.actions.len() + self.states.len()
    }
}

pub fn subgoal_offsets(goals: &[Vec<f64>], anchor: &[f64]) -> Vec<Vec<f64>> {
    goals
        .iter()
        .map(|g| g.iter().zip(anchor).map(|(a, b)| a - b).collect())
        .collect()
}

/// Window of up to `k` actions starting at `window_start`.
pub fn build_action_sample(
    traj: &Trajectory,
    subgoals: &SubgoalSet,
    goal: &[f64],
    window_start: usize,
    k: usize,
) -> ActionSample {
    assert!(window_start < traj.len() && k >= 1, "window outside trajectory");
    let end = (window_start + k).min(traj.len());
    let anchor = traj.states[window_start].to_vector();
    let goals: Vec<Vec<f64>> = subgoals.goals.iter().map(|g| g.to_vector()).collect();
    ActionSample {
        goal: goal.to_vec(),
        offsets: subgoal_offsets(&goals, &anchor),
        anchor,
        actions: traj.actions[window_start..end].to_vec(),
        states: (window_start + 1..end).map(|t| traj.states[t].to_vector()).collect(),
        masks: traj.masks[window_start..end].to_vec(),
    }
}

/// `U_t = (G, s_t, a_t, R_t, tau_g)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub state: Vec<f64>,
    pub action: usize,
    pub rtg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModifiedTrajectory {
    pub goal: Vec<f64>,
    pub guidance: GuidanceSample,
    pub subgoals: SubgoalSet,
    pub records: Vec<TrainingRecord>,
    pub source: Trajectory,
}

impl ModifiedTrajectory {
    pub fn action_sample(&self, window_start: usize, k: usize) -> ActionSample {
        build_action_sample(&self.source, &self.subgoals, &self.goal, window_start, k)
    }
}

pub fn build_training_set(
    dataset: &[Trajectory],
    n_cells: usize,
    q: usize,
) -> Result<Vec<ModifiedTrajectory>, DataError> {
    if dataset.is_empty() {
        return Err(DataError::Empty("dataset"));
    }
    let goal = final_goal(n_cells);
    Ok(dataset
        .iter()
        .map(|traj| {
            let subgoals = extract_subgoals(traj, q, n_cells);
            ModifiedTrajectory {
                guidance: build_guidance_sample(traj, &subgoals, &goal),
                records: (0..traj.len())
                    .map(|t| TrainingRecord {
                        state: traj.states[t].to_vector(),
                        action: traj.actions[t],
                        rtg: traj.rtgs[t],
                    })
                    .collect(),
                goal: goal.clone(),
                subgoals,
                source: traj.clone(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub feeder_hash: String,
    pub q: Option<usize>,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn new(graph: &FeederGraph, trajectories: Vec<Trajectory>) -> Self {
        Self {
            header: DatasetHeader {
                format_version: DATASET_FORMAT_VERSION,
                feeder_hash: graph.feeder_hash(),
                q: None,
                k: None,
                count: trajectories.len(),
            },
            trajectories,
        }
    }

    pub fn max_return(&self) -> f64 {
        self.trajectories
            .iter()
            .map(Trajectory::total_return)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// JSON lines: the header, then one trajectory per line.
pub fn save_dataset(path: impl AsRef<Path>, dataset: &Dataset) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    let mut header = dataset.header.clone();
    header.count = dataset.trajectories.len();
    let mut line = serde_json::to_string(&header).expect("header serializes");
    line.push('\n');
    w.write_all(line.as_bytes()).map_err(io_err(path))?;
    for traj in &dataset.trajectories {
        let mut line = serde_json::to_string(traj).expect("trajectory serializes");
        line.push('\n');
        w.write_all(line.as_bytes()).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Loads and checks version and, when `graph` is given, the feeder hash.
pub fn load_dataset(path: impl AsRef<Path>, graph: Option<&FeederGraph>) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut lines = reader.lines();
    let first = lines
        .next()
        .ok_or_else(|| DataError::Corrupt("missing header".into()))?
        .map_err(io_err(path))?;
    let header: DatasetHeader =
        serde_json::from_str(&first).map_err(|e| DataError::Corrupt(format!("header: {e}")))?;
    if header.format_version != DATASET_FORMAT_VERSION {
        return Err(DataError::Version {
            expected: DATASET_FORMAT_VERSION,
            found: header.format_version,
        });
    }
    if let Some(g) = graph {
        let expected = g.feeder_hash();
        if expected != header.feeder_hash {
            return Err(DataError::FeederHash {
                expected,
                found: header.feeder_hash,
            });
        }
    }
    let mut trajectories = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.is_empty() {
            continue;
        }
        let traj: Trajectory = serde_json::from_str(&line)
            .map_err(|e| DataError::Corrupt(format!("record {}: {e}", i + 1)))?;
        check_trajectory(&traj, graph).map_err(|m| DataError::Corrupt(format!("record {}: {m}", i + 1)))?;
        trajectories.push(traj);
    }
    if trajectories.len() != header.count {
        return Err(DataError::Corrupt(format!(
            "header promises {} trajectories, found {}",
            header.count,
            trajectories.len()
        )));
    }
    Ok(Dataset { header, trajectories })
}

fn check_trajectory(t: &Trajectory, graph: Option<&FeederGraph>) -> Result<(), String> {
    let l = t.actions.len();
    if t.states.len() != l + 1 || t.masks.len() != l || t.rewards.len() != l || t.rtgs.len() != l {
        return Err("inconsistent lengths".into());
    }
    let width = graph.map_or(t.states[0].n_cells(), FeederGraph::n_cells);
    if t.states.iter().any(|s| s.n_cells() != width) {
        return Err(format!("state width differs from {width} cells"));
    }
    if let Some(j) = (0..l).find(|&j| !t.masks[j].contains(&t.actions[j])) {
        return Err(format!("action at step {j} is not in its mask"));
    }
    if let Some(g) = graph {
        if t.masks.iter().flatten().any(|&a| a >= g.n_switches()) {
            return Err("switch id out of range".into());
        }
    }
    Ok(())
}

/// States on disk as `"s1|s2"` bit strings with the step count implied by position.
mod state_codec {
    use super::SystemState;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    fn bits(v: &[bool]) -> String {
        v.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    fn parse(s: &str) -> Option<Vec<bool>> {
        s.chars()
            .map(|c| match c {
                '0' => Some(false),
                '1' => Some(true),
                _ => None,
            })
            .collect()
    }

    pub fn serialize<S: Serializer>(states: &[SystemState], ser: S) -> Result<S::Ok, S::Error> {
        ser.collect_seq(states.iter().map(|s| format!("{}|{}", bits(&s.s1), bits(&s.s2))))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Vec<SystemState>, D::Error> {
        let raw = Vec::<String>::deserialize(de)?;
        raw.iter()
            .enumerate()
            .map(|(step, s)| {
                let (a, b) = s.split_once('|').ok_or_else(|| D::Error::custom("state missing '|'"))?;
                let s1 = parse(a).ok_or_else(|| D::Error::custom("bad state bits"))?;
                let s2 = parse(b).ok_or_else(|| D::Error::custom("bad state bits"))?;
                if s1.len() != s2.len() {
                    return Err(D::Error::custom("s1/s2 length mismatch"));
                }
                Ok(SystemState { s1, s2, step })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::parse_feeder;

    const CHAIN: &str = "
[meta]
horizon = 4
[cells]
0 load=10
1 load=20
2 load=30
3 load=40
4 load=50
[switches]
0 0 1
1 1 2
2 2 3
3 3 4
[sources]
0 host=0 capacity=1000 ramp=1000
";

    #[test]
    fn rtg_examples() {
        assert_eq!(compute_rtg(&[1.0, 2.0, 3.0]), vec![6.0, 5.0, 3.0]);
        assert_eq!(compute_rtg(&[5.0]), vec![5.0]);
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(subgoal_thresholds(10, 4), vec![2, 4, 6, 8]);
        assert_eq!(subgoal_thresholds(5, 2), vec![2, 4]);
    }

    #[test]
    fn walk_on_chain_is_forced() {
        let g = parse_feeder(CHAIN).unwrap();
        let d = collect_random_walks(&g, &Contingencies::new(), 3, 1).unwrap();
        for t in &d {
            assert_eq!(t.actions, vec![0, 1, 2, 3]);
            assert_eq!(t.rewards, vec![30.0, 60.0, 100.0, 150.0]);
            assert_eq!(t.restored_power, 150.0);
        }
    }

    #[test]
    fn zero_episodes_rejected() {
        let g = parse_feeder(CHAIN).unwrap();
        assert!(matches!(
            collect_random_walks(&g, &Contingencies::new(), 0, 1),
            Err(DataError::NoEpisodes)
        ));
    }

    #[test]
    fn unmet_thresholds_map_to_final_state() {
        let g = parse_feeder(&CHAIN.replace("horizon = 4", "horizon = 2")).unwrap();
        let t = &collect_random_walks(&g, &Contingencies::new(), 1, 0).unwrap()[0];
        // thresholds for N=5, q=4: 1, 2, 3, 4; only three cells ever energize
        let sg = extract_subgoals(t, 4, 5);
        assert_eq!(sg.indices, vec![0, 1, 2, 2]);
    }

    #[test]
    fn action_sample_window_layout() {
        let g = parse_feeder(CHAIN).unwrap();
        let t = &collect_random_walks(&g, &Contingencies::new(), 1, 0).unwrap()[0];
        let sg = extract_subgoals(t, 2, 5);
        let goal = final_goal(5);
        let a = build_action_sample(t, &sg, &goal, 1, 3);
        assert_eq!(a.actions, vec![1, 2, 3]);
        assert_eq!(a.states.len(), 2);
        assert_eq!(a.token_count(), 2 + 1 + 2 * 3);
        let tail = build_action_sample(t, &sg, &goal, 3, 3);
        assert_eq!(tail.actions, vec![3]);
        assert!(tail.states.is_empty());
    }
}
