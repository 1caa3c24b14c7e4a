//! Exhaustive restoration oracle: depth-first search over mask-allowed
//! closures, memoized on the set of closed switches.
//!
//! The closed set fixes the energized forest, island membership, shutdowns
//! and the step count, and therefore the previous dispatch, so it is a
//! sufficient memo key for both the return-to-go and the final power.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Env, EnvError};
use crate::grid::{Contingencies, FeederGraph};

pub const MAX_RESTORABLE_CELLS: usize = 26;
pub const DEFAULT_STATE_BUDGET: usize = 20_000_000;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("{restorable} restorable cells exceed the exhaustive-search guard of {limit}")]
    TooLarge { restorable: usize, limit: usize },
    #[error("search visited more than {0} states")]
    StateBudget(usize),
    #[error("horizon {horizon} exceeds the load profile length {profile}")]
    Horizon { horizon: usize, profile: usize },
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub optimal_return: f64,
    pub optimal_power: f64,
    /// A return-maximizing action sequence.
    pub actions: Vec<usize>,
    /// A sequence reaching `optimal_power`; may differ from `actions`.
    pub power_actions: Vec<usize>,
    pub states_explored: usize,
}

#[derive(Clone, Copy)]
struct Value {
    ret: f64,
    ret_action: Option<usize>,
    power: f64,
    power_action: Option<usize>,
}

type Key = Vec<u64>;

struct Search {
    memo: HashMap<Key, Value>,
    budget: usize,
}

fn key_of(env: &Env<'_>) -> Key {
    let mut k = vec![0u64; env.graph().n_switches().div_ceil(64).max(1)];
    for &s in env.closed_switches() {
        k[s / 64] |= 1 << (s % 64);
    }
    k
}

impl Search {
    fn solve(&mut self, env: &Env<'_>) -> Result<Value, OracleError> {
        let key = key_of(env);
        if let Some(v) = self.memo.get(&key) {
            return Ok(*v);
        }
        if self.memo.len() >= self.budget {
            return Err(OracleError::StateBudget(self.budget));
        }
        let mut best = Value {
            ret: if env.is_done() { 0.0 } else { f64::NEG_INFINITY },
            ret_action: None,
            power: if env.is_done() { env.restored_power() } else { f64::NEG_INFINITY },
            power_action: None,
        };
        if !env.is_done() {
            for a in env.mask().allowed_ids() {
                let mut child = env.clone();
                let out = child.step(a)?;
                let v = self.solve(&child)?;
                let r = out.reward + v.ret;
                if r > best.ret {
                    best.ret = r;
                    best.ret_action = Some(a);
                }
                if v.power > best.power {
                    best.power = v.power;
                    best.power_action = Some(a);
                }
            }
        }
        self.memo.insert(key, best);
        Ok(best)
    }

    fn follow(&self, root: &Env<'_>, by_power: bool) -> Result<Vec<usize>, OracleError> {
        let mut env = root.clone();
        let mut seq = Vec::new();
        while let Some(v) = self.memo.get(&key_of(&env)) {
            let next = if by_power { v.power_action } else { v.ret_action };
            let Some(a) = next else { break };
            env.step(a)?;
            seq.push(a);
        }
        Ok(seq)
    }
}

/// Cells that can still be energized by a step: everything except live source hosts.
pub fn restorable_cells(graph: &FeederGraph, contingencies: &Contingencies) -> usize {
    let live_hosts = graph
        .sources
        .iter()
        .filter(|s| !graph.is_isolated(s.host_cell, contingencies))
        .count();
    graph.n_cells() - live_hosts
}

pub fn oracle_search(
    graph: &FeederGraph,
    contingencies: &Contingencies,
    horizon: usize,
) -> Result<OracleResult, OracleError> {
    oracle_search_with_budget(graph, contingencies, horizon, DEFAULT_STATE_BUDGET)
}

pub fn oracle_search_with_budget(
    graph: &FeederGraph,
    contingencies: &Contingencies,
    horizon: usize,
    budget: usize,
) -> Result<OracleResult, OracleError> {
    let restorable = restorable_cells(graph, contingencies);
    if restorable > MAX_RESTORABLE_CELLS {
        return Err(OracleError::TooLarge {
            restorable,
            limit: MAX_RESTORABLE_CELLS,
        });
    }
    let profile = graph.cells.iter().map(|c| c.load_profile.len()).min().unwrap_or(0);
    if horizon > profile {
        return Err(OracleError::Horizon { horizon, profile });
    }
    let mut g = graph.clone();
    g.horizon = horizon;
    let root = Env::new(&g, contingencies.clone())?;
    let mut search = Search {
        memo: HashMap::new(),
        budget,
    };
    let v = search.solve(&root)?;
    Ok(OracleResult {
        optimal_return: v.ret,
        optimal_power: v.power,
        actions: search.follow(&root, false)?,
        power_actions: search.follow(&root, true)?,
        states_explored: search.memo.len(),
    })
}
