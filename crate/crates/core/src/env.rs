//! Sequential restoration environment.
//!
//! Each step closes exactly one switch, energizing one new node cell from an
//! already energized neighbour. The reward is the served active power plus
//! weighted (negative) voltage and ramp penalties, all scaled by `dt`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{adjacency_at, AdjacencyMatrix, Contingencies, FeederGraph, GridError};
use crate::physics::{
    self, DispatchResult, Island, IslandMember, PenaltyBreakdown, PhysicsError,
};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("switch {0} is masked in the current state")]
    IllegalAction(usize),
    #[error("episode already finished")]
    EpisodeDone,
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
}

/// Energization flags `s1` and branch-frontier flags `s2` of every node cell.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SystemState {
    pub s1: Vec<bool>,
    pub s2: Vec<bool>,
    pub step: usize,
}

impl SystemState {
    pub fn empty(n_cells: usize) -> Self {
        Self {
            s1: vec![false; n_cells],
            s2: vec![false; n_cells],
            step: 0,
        }
    }

    pub fn n_cells(&self) -> usize {
        self.s1.len()
    }

    pub fn energized_count(&self) -> usize {
        self.s1.iter().filter(|&&b| b).count()
    }

    pub fn frontier_count(&self) -> usize {
        self.s2.iter().filter(|&&b| b).count()
    }

    /// `[s1 || s2]` as 0.0 / 1.0 values.
    pub fn to_vector(&self) -> Vec<f64> {
        self.s1
            .iter()
            .chain(&self.s2)
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Switches that may be closed in the current state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskVector {
    pub allowed: Vec<bool>,
}

impl MaskVector {
    pub fn any(&self) -> bool {
        self.allowed.iter().any(|&b| b)
    }

    pub fn allowed_ids(&self) -> Vec<usize> {
        self.allowed
            .iter()
            .enumerate()
            .filter(|(_, &a)| a)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn from_ids(n: usize, ids: &[usize]) -> Self {
        let mut allowed = vec![false; n];
        for &i in ids {
            allowed[i] = true;
        }
        Self { allowed }
    }
}

/// Confidence over switches; zero exactly on masked entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionVector {
    pub probs: Vec<f64>,
}

impl ActionVector {
    /// Index of the largest probability; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Loop- and revisit-free switch candidates: an in-service switch with exactly
/// one energized endpoint. Closing it attaches a new leaf to the energized
/// forest, so no cycle can form and no cell is energized twice.
pub fn feasible_mask(graph: &FeederGraph, state: &SystemState, adjacency: &AdjacencyMatrix) -> MaskVector {
    MaskVector {
        allowed: graph
            .switches
            .iter()
            .map(|s| {
                let (a, b) = s.endpoints;
                adjacency.get(a, b) && state.s1[a] != state.s1[b]
            })
            .collect(),
    }
}

/// Reward of one step. Penalties arrive already scaled by `dt`.
pub fn compute_reward(served_power: f64, vpen: f64, rpen: f64, w1: f64, w2: f64, dt: f64) -> f64 {
    served_power * dt + w1 * (-vpen) + w2 * (-rpen)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub switch: usize,
    pub new_cell: usize,
    pub served_power: f64,
    /// Served power times dt.
    pub restoration: f64,
    pub penalties: PenaltyBreakdown,
    pub dispatch: DispatchResult,
    /// Source that shut down on this step because the new cell was outside its allowlist.
    pub shutdown: Option<usize>,
}

impl StepInfo {
    pub fn violated(&self) -> bool {
        !self.penalties.is_clean() || self.shutdown.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub next_state: SystemState,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// One live episode on a feeder. Not shareable across threads while stepping;
/// clone it instead.
#[derive(Debug, Clone)]
pub struct Env<'g> {
    graph: &'g FeederGraph,
    contingencies: Contingencies,
    adjacency: AdjacencyMatrix,
    state: SystemState,
    islands: Vec<Island>,
    branch_of: Vec<Option<usize>>,
    frontier: Vec<usize>,
    prev: DispatchResult,
    closed: Vec<usize>,
    restored_power: f64,
    done: bool,
}

impl<'g> Env<'g> {
    pub fn new(graph: &'g FeederGraph, contingencies: Contingencies) -> Result<Self, EnvError> {
        graph.check_contingencies(&contingencies)?;
        let adjacency = adjacency_at(graph, &SystemState::empty(graph.n_cells()), &contingencies)?;
        let mut env = Self {
            graph,
            contingencies,
            adjacency,
            state: SystemState::empty(graph.n_cells()),
            islands: Vec::new(),
            branch_of: Vec::new(),
            frontier: Vec::new(),
            prev: DispatchResult::zero(graph),
            closed: Vec::new(),
            restored_power: 0.0,
            done: false,
        };
        env.reset();
        Ok(env)
    }

    /// Energizes every source host that is not cut off by contingencies.
    pub fn reset(&mut self) -> SystemState {
        let n = self.graph.n_cells();
        self.state = SystemState::empty(n);
        self.islands.clear();
        self.branch_of = vec![None; n];
        self.frontier.clear();
        for src in &self.graph.sources {
            if self.graph.is_isolated(src.host_cell, &self.contingencies) {
                continue;
            }
            self.branch_of[src.host_cell] = Some(self.islands.len());
            self.frontier.push(src.host_cell);
            self.islands.push(Island::rooted_at(src.id, src.host_cell));
            self.state.s1[src.host_cell] = true;
            self.state.s2[src.host_cell] = true;
        }
        self.prev = DispatchResult::zero(self.graph);
        self.closed.clear();
        self.restored_power = physics::dispatch(self.graph, &self.islands, 0)
            .map(|d| d.served_power(self.graph, 0))
            .unwrap_or(0.0);
        self.done = !self.mask().any();
        self.state.clone()
    }

    pub fn graph(&self) -> &'g FeederGraph {
        self.graph
    }

    pub fn contingencies(&self) -> &Contingencies {
        &self.contingencies
    }

    pub fn adjacency(&self) -> &AdjacencyMatrix {
        &self.adjacency
    }

    pub fn state(&self) -> &SystemState {
        &self.state
    }

    pub fn islands(&self) -> &[Island] {
        &self.islands
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Closed switches in closure order.
    pub fn closed_switches(&self) -> &[usize] {
        &self.closed
    }

    /// Served active power after the most recent step (kW).
    pub fn restored_power(&self) -> f64 {
        self.restored_power
    }

    pub fn mask(&self) -> MaskVector {
        feasible_mask(self.graph, &self.state, &self.adjacency)
    }

    pub fn step(&mut self, switch: usize) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeDone);
        }
        let mask = self.mask();
        if !mask.allowed.get(switch).copied().unwrap_or(false) {
            return Err(EnvError::IllegalAction(switch));
        }
        let graph = self.graph;
        let t = self.state.step;
        let sw = &graph.switches[switch];
        let (a, b) = sw.endpoints;
        let (from, new_cell) = if self.state.s1[a] { (a, b) } else { (b, a) };
        let branch = self.branch_of[from].expect("energized cell belongs to a branch");

        self.branch_of[new_cell] = Some(branch);
        self.state.s1[new_cell] = true;
        let island = &mut self.islands[branch];
        island.members.push(IslandMember {
            cell: new_cell,
            parent: Some((from, switch)),
        });
        let mut shutdown = None;
        if island.live {
            self.state.s2[self.frontier[branch]] = false;
            if graph.sources[island.source].may_energize(new_cell) {
                self.state.s2[new_cell] = true;
                self.frontier[branch] = new_cell;
            } else {
                island.live = false;
                shutdown = Some(island.source);
            }
        }
        self.state.step = t + 1;
        self.closed.push(switch);

        let mut dispatch = physics::dispatch(graph, &self.islands, t)?;
        let h = physics::voltage_model(graph, &self.islands, &dispatch, t);
        let voltage_penalty = physics::voltage_penalty(&h, graph, &dispatch.served)?;
        dispatch.per_cell_voltage_sq = h;
        let ramp_penalty = physics::ramp_penalty(&dispatch, &self.prev, graph)?;
        let served_power = dispatch.served_power(graph, t);
        let reward = compute_reward(
            served_power,
            voltage_penalty,
            ramp_penalty,
            graph.weights.voltage,
            graph.weights.ramp,
            graph.dt,
        );
        self.prev = dispatch.clone();
        self.restored_power = served_power;
        self.done = self.state.step >= graph.horizon || !self.mask().any();

        Ok(StepOutcome {
            next_state: self.state.clone(),
            reward,
            done: self.done,
            info: StepInfo {
                switch,
                new_cell,
                served_power,
                restoration: served_power * graph.dt,
                penalties: PenaltyBreakdown {
                    voltage_penalty,
                    ramp_penalty,
                },
                dispatch,
                shutdown,
            },
        })
    }
}
