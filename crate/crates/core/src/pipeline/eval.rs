//! Multi-trial evaluation, metrics, histograms and contingency studies.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::grid::{Contingencies, FeederGraph};
use crate::model::DhModel;

use super::oracle::{oracle_search, OracleResult};
use super::rollout::{rollout, InferenceMode, RolloutOptions, TrialResult};
use super::PipelineError;

pub const OPTIMALITY_RTOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_trials: usize,
    pub mode: InferenceMode,
    pub seed: u64,
    /// Initial return-to-go; when `None` the oracle optimum, else the checkpoint fallback, is used.
    pub rtg0: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_trials: 50,
            mode: InferenceMode::Argmax,
            seed: 0,
            rtg0: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_trials: usize,
    pub mode: InferenceMode,
    pub rtg0: f64,
    pub average_return: f64,
    pub std_return: f64,
    /// Average restored power (kW).
    pub apr: f64,
    /// Standard deviation of restored power (kW).
    pub sdpr: f64,
    pub n_optimal: usize,
    pub n_violated: usize,
    pub oracle_return: Option<f64>,
    pub oracle_power: Option<f64>,
    pub trials: Vec<TrialResult>,
}

pub fn is_power_optimal(power: f64, optimum: f64) -> bool {
    (power - optimum).abs() <= OPTIMALITY_RTOL * optimum.abs().max(1.0)
}

/// Mean and population standard deviation, computed on data shifted by the
/// first sample so identical inputs give exactly that value and zero.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let Some(&x0) = xs.first() else {
        return (0.0, 0.0);
    };
    let n = xs.len() as f64;
    let shift = xs.iter().map(|x| x - x0).fold(0.0, |a, b| a + b) / n;
    let var = xs
        .iter()
        .map(|x| (x - x0 - shift) * (x - x0 - shift))
        .fold(0.0, |a, b| a + b)
        / n;
    (x0 + shift, var.sqrt())
}

pub fn evaluate(
    model: &DhModel,
    graph: &FeederGraph,
    contingencies: &Contingencies,
    config: &EvalConfig,
    oracle: Option<&OracleResult>,
    rtg_fallback: f64,
) -> Result<EvalReport, PipelineError> {
    if config.n_trials == 0 {
        return Err(PipelineError::Config("n_trials must be at least 1".into()));
    }
    let rtg0 = config
        .rtg0
        .or(oracle.map(|o| o.optimal_return))
        .unwrap_or(rtg_fallback);
    let trials: Vec<TrialResult> = (0..config.n_trials)
        .into_par_iter()
        .map(|i| {
            let opts = RolloutOptions {
                mode: config.mode,
                seed: config.seed.wrapping_add(i as u64),
                rtg0,
                pinned_subgoals: None,
            };
            rollout(model, graph, contingencies, &opts).map(|r| r.trial)
        })
        .collect::<Result<_, _>>()?;
    let returns: Vec<f64> = trials.iter().map(|t| t.ret).collect();
    let powers: Vec<f64> = trials.iter().map(|t| t.restored_power).collect();
    let (average_return, std_return) = mean_std(&returns);
    let (apr, sdpr) = mean_std(&powers);
    let n_optimal = oracle.map_or(0, |o| {
        trials
            .iter()
            .filter(|t| !t.violated && t.replay.is_clean() && is_power_optimal(t.restored_power, o.optimal_power))
            .count()
    });
    Ok(EvalReport {
        n_trials: config.n_trials,
        mode: config.mode,
        rtg0,
        average_return,
        std_return,
        apr,
        sdpr,
        n_optimal,
        n_violated: trials.iter().filter(|t| t.violated).count(),
        oracle_return: oracle.map(|o| o.optimal_return),
        oracle_power: oracle.map(|o| o.optimal_power),
        trials,
    })
}

impl EvalReport {
    pub fn csv(&self) -> String {
        format!(
            "Average Return,Std. Return,APR,SDPR,# Opt. Sols.\n{:.3},{:.3},{:.3},{:.3},{}\n",
            self.average_return, self.std_return, self.apr, self.sdpr, self.n_optimal
        )
    }

    pub fn actions_csv(&self) -> String {
        let mut s = String::from("trial,return,restored_power,violated,actions\n");
        for (i, t) in self.trials.iter().enumerate() {
            let acts: Vec<String> = t.actions.iter().map(|a| a.to_string()).collect();
            let _ = writeln!(s, "{i},{:.6},{:.6},{},{}", t.ret, t.restored_power, t.violated, acts.join(" "));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Restored-power histogram over `edges` (ascending, at least two). Values
/// outside the range fall into the first or last bin so counts always sum to
/// the number of trials.
pub fn power_histogram(powers: &[f64], edges: &[f64]) -> Vec<HistogramBin> {
    assert!(edges.len() >= 2, "need at least two bin edges");
    let mut bins: Vec<HistogramBin> = edges
        .windows(2)
        .map(|w| HistogramBin {
            lo: w[0],
            hi: w[1],
            count: 0,
        })
        .collect();
    let last = bins.len() - 1;
    for &p in powers {
        let i = bins.iter().position(|b| p < b.hi).unwrap_or(last);
        bins[i].count += 1;
    }
    bins
}

/// `n` equal-width bins from 0 to `max(top, 1)`, with the top edge nudged up so `top` lands inside.
pub fn default_edges(top: f64, n: usize) -> Vec<f64> {
    let hi = top.max(1.0) * (1.0 + 1e-9);
    (0..=n).map(|i| hi * i as f64 / n as f64).collect()
}

pub fn histogram_csv(bins: &[HistogramBin]) -> String {
    let mut s = String::from("lo,hi,count\n");
    for b in bins {
        let _ = writeln!(s, "{:.6},{:.6},{}", b.lo, b.hi, b.count);
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub contingencies: Contingencies,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: Scenario,
    pub oracle: Option<OracleResult>,
    pub oracle_error: Option<String>,
    pub report: EvalReport,
    /// `(switch id, closure step starting at 1)` of the first trial.
    pub solution: Vec<(usize, usize)>,
}

/// Zero-shot evaluation of one model under each contingency set.
pub fn contingency_suite(
    model: &DhModel,
    graph: &FeederGraph,
    scenarios: &[Scenario],
    config: &EvalConfig,
    rtg_fallback: f64,
) -> Result<Vec<ScenarioReport>, PipelineError> {
    scenarios
        .iter()
        .map(|sc| {
            graph.check_contingencies(&sc.contingencies)?;
            let (oracle, oracle_error) = match oracle_search(graph, &sc.contingencies, graph.horizon) {
                Ok(o) => (Some(o), None),
                Err(e) => (None, Some(e.to_string())),
            };
            let report = evaluate(model, graph, &sc.contingencies, config, oracle.as_ref(), rtg_fallback)?;
            let solution = report.trials[0]
                .actions
                .iter()
                .enumerate()
                .map(|(i, &a)| (a, i + 1))
                .collect();
            Ok(ScenarioReport {
                scenario: sc.clone(),
                oracle,
                oracle_error,
                report,
                solution,
            })
        })
        .collect()
}

/// Graphviz description of a plan: closed switches labeled with their step,
/// contingent switches dashed, source hosts boxed.
pub fn solution_dot(graph: &FeederGraph, contingencies: &Contingencies, solution: &[(usize, usize)]) -> String {
    let mut s = format!("graph \"{}\" {{\n", graph.name.replace('"', "'"));
    for c in &graph.cells {
        let shape = if graph.source_at(c.id).is_some() { "box" } else { "circle" };
        let _ = writeln!(s, "  c{} [label=\"{}\", shape={shape}];", c.id, c.id);
    }
    for sw in &graph.switches {
        let (a, b) = sw.endpoints;
        let attrs = if let Some(&(_, step)) = solution.iter().find(|(id, _)| *id == sw.id) {
            format!("label=\"{step}\", penwidth=2")
        } else if contingencies.contains(&sw.id) {
            "style=dashed, color=red".to_string()
        } else {
            "style=dotted".to_string()
        };
        let _ = writeln!(s, "  c{a} -- c{b} [{attrs}];");
    }
    s.push_str("}\n");
    s
}
