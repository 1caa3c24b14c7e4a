//! Post-hoc replay check for action sequences, written without the
//! environment's mask: it only tracks connectivity with a union-find.

use serde::{Deserialize, Serialize};

use crate::grid::{Contingencies, FeederGraph};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub steps: usize,
    /// Closures whose endpoints were already connected.
    pub loops: usize,
    /// Closures that re-energized an already energized cell.
    pub revisits: usize,
    /// Closures with no energized endpoint, or of contingent / unknown switches.
    pub invalid: usize,
}

impl ReplayReport {
    pub fn is_clean(&self) -> bool {
        self.loops == 0 && self.revisits == 0 && self.invalid == 0
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

pub fn replay_validate(graph: &FeederGraph, contingencies: &Contingencies, actions: &[usize]) -> ReplayReport {
    let n = graph.n_cells();
    let mut parent: Vec<usize> = (0..n).collect();
    let mut energized = vec![false; n];
    for src in &graph.sources {
        let cell = src.host_cell;
        let sw: Vec<usize> = graph
            .switches
            .iter()
            .filter(|s| s.endpoints.0 == cell || s.endpoints.1 == cell)
            .map(|s| s.id)
            .collect();
        let cut_off = !sw.is_empty() && sw.iter().all(|s| contingencies.contains(s));
        if !cut_off {
            energized[cell] = true;
        }
    }
    let mut report = ReplayReport::default();
    for &a in actions {
        report.steps += 1;
        let Some(sw) = graph.switches.get(a) else {
            report.invalid += 1;
            continue;
        };
        if contingencies.contains(&a) {
            report.invalid += 1;
            continue;
        }
        let (x, y) = sw.endpoints;
        let (rx, ry) = (find(&mut parent, x), find(&mut parent, y));
        if rx == ry {
            report.loops += 1;
            continue;
        }
        match (energized[x], energized[y]) {
            (true, true) => report.revisits += 1,
            (false, false) => report.invalid += 1,
            (true, false) => energized[y] = true,
            (false, true) => energized[x] = true,
        }
        parent[rx.max(ry)] = rx.min(ry);
    }
    report
}
