//! Node-cell feeder topology.
//!
//! A feeder is described at node-cell granularity: every cell is a maximal set
//! of buses joined by non-switchable lines, and cells are linked by operable
//! switches. Feeders are plain text (see `docs/feeder-format.md`) so that every
//! topology used by the tooling is data rather than code.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::env::SystemState;

/// Impedance proxy applied to a switch that does not declare one (p.u.).
pub const DEFAULT_IMPEDANCE: f64 = 0.01;
/// Default squared voltage bounds, (0.95 p.u.)^2 and (1.05 p.u.)^2.
pub const DEFAULT_V_MIN_SQ: f64 = 0.9025;
pub const DEFAULT_V_MAX_SQ: f64 = 1.1025;
/// Default penalty weights for the voltage and ramp terms of the reward.
pub const DEFAULT_PENALTY_WEIGHT: f64 = 100.0;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid {field}: {msg}")]
    Validation { field: String, msg: String },
    #[error("dimension mismatch: graph has {expected} cells, state has {found}")]
    Dimension { expected: usize, found: usize },
    #[error("unknown switch id {0}")]
    UnknownSwitch(usize),
}

fn invalid(field: impl Into<String>, msg: impl Into<String>) -> GridError {
    GridError::Validation {
        field: field.into(),
        msg: msg.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeCell {
    pub id: usize,
    pub member_buses: Vec<String>,
    /// Active power demand per time step in kW, one entry per step of the horizon.
    pub load_profile: Vec<f64>,
    pub v_min_sq: f64,
    pub v_max_sq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchEdge {
    pub id: usize,
    pub endpoints: (usize, usize),
    pub impedance_proxy: f64,
}

impl SwitchEdge {
    /// The endpoint opposite to `cell`, if `cell` is an endpoint at all.
    pub fn other(&self, cell: usize) -> Option<usize> {
        match self.endpoints {
            (a, b) if a == cell => Some(b),
            (a, b) if b == cell => Some(a),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergySource {
    pub id: usize,
    pub host_cell: usize,
    /// Maximum active output in kW.
    pub capacity: f64,
    /// Maximum change of active output between consecutive steps in kW.
    pub ramp_limit: f64,
    /// Cells this source can energize. `None` means unrestricted.
    pub allowlist: Option<BTreeSet<usize>>,
}

impl EnergySource {
    pub fn may_energize(&self, cell: usize) -> bool {
        self.allowlist.as_ref().map_or(true, |a| a.contains(&cell))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub voltage: f64,
    pub ramp: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            voltage: DEFAULT_PENALTY_WEIGHT,
            ramp: DEFAULT_PENALTY_WEIGHT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeederGraph {
    pub name: String,
    pub cells: Vec<NodeCell>,
    pub switches: Vec<SwitchEdge>,
    pub sources: Vec<EnergySource>,
    /// Number of decision steps in an episode.
    pub horizon: usize,
    /// Hours per step.
    pub dt: f64,
    pub weights: RewardWeights,
}

/// Set of switch ids that are out of service.
pub type Contingencies = BTreeSet<usize>;

impl FeederGraph {
    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn n_switches(&self) -> usize {
        self.switches.len()
    }

    /// Dimension of a state vector `[s1 || s2]`.
    pub fn state_dim(&self) -> usize {
        2 * self.cells.len()
    }

    /// Demand of `cell` at step `t`; steps past the profile reuse its last value.
    pub fn load(&self, cell: usize, t: usize) -> f64 {
        let p = &self.cells[cell].load_profile;
        p[t.min(p.len() - 1)]
    }

    pub fn incident_switches(&self, cell: usize) -> impl Iterator<Item = &SwitchEdge> + '_ {
        self.switches
            .iter()
            .filter(move |s| s.endpoints.0 == cell || s.endpoints.1 == cell)
    }

    pub fn source_at(&self, cell: usize) -> Option<&EnergySource> {
        self.sources.iter().find(|s| s.host_cell == cell)
    }

    pub fn check_contingencies(&self, contingencies: &Contingencies) -> Result<(), GridError> {
        match contingencies.iter().find(|&&id| id >= self.switches.len()) {
            Some(&id) => Err(GridError::UnknownSwitch(id)),
            None => Ok(()),
        }
    }

    /// Whether every switch incident to `cell` is out of service. A cell without
    /// any switch is never considered isolated by contingencies.
    pub fn is_isolated(&self, cell: usize, contingencies: &Contingencies) -> bool {
        let mut any = false;
        for s in self.incident_switches(cell) {
            any = true;
            if !contingencies.contains(&s.id) {
                return false;
            }
        }
        any
    }

    /// Contingency set that cuts `cell` off from the rest of the feeder.
    pub fn isolating_contingencies(&self, cell: usize) -> Contingencies {
        self.incident_switches(cell).map(|s| s.id).collect()
    }

    pub fn validate(&self) -> Result<(), GridError> {
        if self.cells.is_empty() {
            return Err(invalid("cells", "feeder has no node cells"));
        }
        if self.horizon == 0 {
            return Err(invalid("meta.horizon", "horizon must be at least 1"));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(invalid("meta.dt", format!("dt must be positive, got {}", self.dt)));
        }
        for (field, w) in [("meta.w_voltage", self.weights.voltage), ("meta.w_ramp", self.weights.ramp)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(invalid(field, format!("weight must be finite and non-negative, got {w}")));
            }
        }
        for (i, c) in self.cells.iter().enumerate() {
            if c.id != i {
                return Err(invalid(
                    format!("cells[{i}].id"),
                    format!("cell ids must be dense and ordered, found {}", c.id),
                ));
            }
            if c.load_profile.len() < self.horizon {
                return Err(invalid(
                    format!("cells[{i}].load"),
                    format!(
                        "profile has {} values but horizon is {}",
                        c.load_profile.len(),
                        self.horizon
                    ),
                ));
            }
            if let Some(v) = c.load_profile.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                return Err(invalid(format!("cells[{i}].load"), format!("negative or non-finite load {v}")));
            }
            if !(c.v_min_sq.is_finite() && c.v_max_sq.is_finite() && c.v_min_sq < c.v_max_sq) {
                return Err(invalid(
                    format!("cells[{i}].vmin2"),
                    format!("need vmin2 < vmax2, got {} and {}", c.v_min_sq, c.v_max_sq),
                ));
            }
        }
        let n = self.cells.len();
        let mut seen = BTreeSet::new();
        for (i, s) in self.switches.iter().enumerate() {
            let field = format!("switches[{i}]");
            if s.id != i {
                return Err(invalid(field, format!("switch ids must be dense and ordered, found {}", s.id)));
            }
            let (a, b) = s.endpoints;
            if a >= n || b >= n {
                return Err(invalid(field, format!("endpoint out of range ({a}, {b})")));
            }
            if a == b {
                return Err(invalid(field, format!("endpoints must be distinct, both are {a}")));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(invalid(field, format!("duplicate switch between cells {a} and {b}")));
            }
            if !(s.impedance_proxy.is_finite() && s.impedance_proxy >= 0.0) {
                return Err(invalid(field, format!("impedance must be non-negative, got {}", s.impedance_proxy)));
            }
        }
        let mut hosts = BTreeSet::new();
        for (i, src) in self.sources.iter().enumerate() {
            let field = format!("sources[{i}]");
            if src.id != i {
                return Err(invalid(field, format!("source ids must be dense and ordered, found {}", src.id)));
            }
            if src.host_cell >= n {
                return Err(invalid(field, format!("host cell {} does not exist", src.host_cell)));
            }
            if !hosts.insert(src.host_cell) {
                return Err(invalid(field, format!("cell {} already hosts a source", src.host_cell)));
            }
            if !(src.capacity.is_finite() && src.capacity > 0.0) {
                return Err(invalid(field, format!("capacity must be positive, got {}", src.capacity)));
            }
            if !(src.ramp_limit.is_finite() && src.ramp_limit > 0.0) {
                return Err(invalid(field, format!("ramp must be positive, got {}", src.ramp_limit)));
            }
            if let Some(allow) = &src.allowlist {
                if let Some(c) = allow.iter().find(|&&c| c >= n) {
                    return Err(invalid(field, format!("allowlist names unknown cell {c}")));
                }
            }
        }
        if !self.is_connected() {
            return Err(invalid("switches", "feeder is not connected with all switches closed"));
        }
        Ok(())
    }

    fn is_connected(&self) -> bool {
        let n = self.cells.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        let mut components = n;
        for s in &self.switches {
            let (a, b) = (find(&mut parent, s.endpoints.0), find(&mut parent, s.endpoints.1));
            if a != b {
                parent[a] = b;
                components -= 1;
            }
        }
        components == 1
    }

    /// Canonical text form. Parsing it yields an identical graph.
    pub fn to_feeder_string(&self) -> String {
        let mut out = String::new();
        let join = |v: &mut dyn Iterator<Item = String>| v.collect::<Vec<_>>().join(",");
        let _ = writeln!(out, "[meta]");
        let _ = writeln!(out, "name = {}", self.name);
        let _ = writeln!(out, "horizon = {}", self.horizon);
        let _ = writeln!(out, "dt = {}", self.dt);
        let _ = writeln!(out, "w_voltage = {}", self.weights.voltage);
        let _ = writeln!(out, "w_ramp = {}", self.weights.ramp);
        let _ = writeln!(out, "\n[cells]");
        for c in &self.cells {
            let _ = write!(
                out,
                "{} load={} vmin2={} vmax2={}",
                c.id,
                join(&mut c.load_profile.iter().map(|v| v.to_string())),
                c.v_min_sq,
                c.v_max_sq
            );
            if !c.member_buses.is_empty() {
                let _ = write!(out, " buses={}", c.member_buses.join(","));
            }
            out.push('\n');
        }
        let _ = writeln!(out, "\n[switches]");
        for s in &self.switches {
            let _ = writeln!(
                out,
                "{} {} {} impedance={}",
                s.id, s.endpoints.0, s.endpoints.1, s.impedance_proxy
            );
        }
        let _ = writeln!(out, "\n[sources]");
        for s in &self.sources {
            let _ = write!(
                out,
                "{} host={} capacity={} ramp={}",
                s.id, s.host_cell, s.capacity, s.ramp_limit
            );
            if let Some(a) = &s.allowlist {
                let _ = write!(out, " allow={}", join(&mut a.iter().map(|v| v.to_string())));
            }
            out.push('\n');
        }
        out
    }

    /// Hex SHA-256 of the canonical text form.
    pub fn feeder_hash(&self) -> String {
        let digest = Sha256::digest(self.to_feeder_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Reads and validates a feeder file.
pub fn load_feeder(path: impl AsRef<Path>) -> Result<FeederGraph, GridError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| GridError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_feeder(&text)
}

// ---------------------------------------------------------------------------
// Line-oriented parsing shared by the feeder and bus-network formats.

struct Line<'a> {
    number: usize,
    section: &'a str,
    positional: Vec<&'a str>,
    keys: BTreeMap<&'a str, &'a str>,
}

impl<'a> Line<'a> {
    fn err(&self, msg: impl Into<String>) -> GridError {
        GridError::Parse {
            line: self.number,
            msg: msg.into(),
        }
    }

    fn pos<T: std::str::FromStr>(&self, idx: usize, what: &str) -> Result<T, GridError> {
        let raw = self
            .positional
            .get(idx)
            .ok_or_else(|| self.err(format!("missing {what}")))?;
        raw.parse()
            .map_err(|_| self.err(format!("cannot parse {what} from '{raw}'")))
    }

    fn key<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, GridError> {
        match self.keys.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| self.err(format!("cannot parse {key} from '{raw}'"))),
        }
    }

    fn required<T: std::str::FromStr>(&self, key: &str) -> Result<T, GridError> {
        self.key(key)?.ok_or_else(|| self.err(format!("missing {key}=")))
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, GridError> {
        match self.keys.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| self.err(format!("cannot parse {key} entry '{s}'")))
                })
                .collect::<Result<Vec<_>, _>>()
                .map(Some),
        }
    }

    fn check_keys(&self, allowed: &[&str]) -> Result<(), GridError> {
        match self.keys.keys().find(|k| !allowed.contains(k)) {
            Some(k) => Err(self.err(format!("unknown key '{k}' in [{}]", self.section))),
            None => Ok(()),
        }
    }
}

struct Meta {
    name: String,
    horizon: Option<usize>,
    dt: Option<f64>,
    weights: RewardWeights,
}

fn split_lines<'a>(text: &'a str, sections: &[&'static str]) -> Result<(Meta, Vec<Line<'a>>), GridError> {
    let mut section: Option<&'a str> = None;
    let mut meta = Meta {
        name: String::new(),
        horizon: None,
        dt: None,
        weights: RewardWeights::default(),
    };
    let mut lines = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let number = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if content.starts_with('[') {
            let name = content
                .strip_prefix('[')
                .and_then(|s| s.strip_suffix(']'))
                .ok_or_else(|| GridError::Parse {
                    line: number,
                    msg: format!("malformed section header '{content}'"),
                })?;
            if name != "meta" && !sections.contains(&name) {
                return Err(GridError::Parse {
                    line: number,
                    msg: format!("unknown section [{name}]"),
                });
            }
            section = Some(name);
            continue;
        }
        let Some(sec) = section else {
            return Err(GridError::Parse {
                line: number,
                msg: "content before first section header".into(),
            });
        };
        if sec == "meta" {
            let (k, v) = content.split_once('=').ok_or_else(|| GridError::Parse {
                line: number,
                msg: format!("expected key = value, got '{content}'"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            let num = |v: &str| {
                v.parse::<f64>().map_err(|_| GridError::Parse {
                    line: number,
                    msg: format!("cannot parse {k} from '{v}'"),
                })
            };
            match k {
                "name" => meta.name = v.to_string(),
                "horizon" => {
                    meta.horizon = Some(v.parse().map_err(|_| GridError::Parse {
                        line: number,
                        msg: format!("cannot parse horizon from '{v}'"),
                    })?)
                }
                "dt" => meta.dt = Some(num(v)?),
                "w_voltage" => meta.weights.voltage = num(v)?,
                "w_ramp" => meta.weights.ramp = num(v)?,
                _ => {
                    return Err(GridError::Parse {
                        line: number,
                        msg: format!("unknown meta key '{k}'"),
                    })
                }
            }
            continue;
        }
        let mut positional = Vec::new();
        let mut keys = BTreeMap::new();
        for tok in content.split_whitespace() {
            match tok.split_once('=') {
                Some((k, v)) => {
                    if keys.insert(k, v).is_some() {
                        return Err(GridError::Parse {
                            line: number,
                            msg: format!("key '{k}' given twice"),
                        });
                    }
                }
                None => positional.push(tok),
            }
        }
        lines.push(Line {
            number,
            section: sec,
            positional,
            keys,
        });
    }
    Ok((meta, lines))
}

fn expand_profile(values: Vec<f64>, horizon: usize) -> Vec<f64> {
    if values.len() == 1 {
        vec![values[0]; horizon]
    } else {
        values
    }
}

/// Parses feeder text and validates the result.
pub fn parse_feeder(text: &str) -> Result<FeederGraph, GridError> {
    let (meta, lines) = split_lines(text, &["cells", "switches", "sources"])?;
    let horizon = meta.horizon.ok_or_else(|| invalid("meta.horizon", "missing"))?;
    let dt = meta.dt.unwrap_or(1.0);
    let mut cells = Vec::new();
    let mut switches = Vec::new();
    let mut sources = Vec::new();
    for line in &lines {
        match line.section {
            "cells" => {
                line.check_keys(&["load", "vmin2", "vmax2", "buses"])?;
                let id: usize = line.pos(0, "cell id")?;
                let load: Vec<f64> = line.list("load")?.ok_or_else(|| line.err("missing load="))?;
                if load.is_empty() {
                    return Err(line.err("empty load list"));
                }
                cells.push(NodeCell {
                    id,
                    member_buses: line.list("buses")?.unwrap_or_default(),
                    load_profile: expand_profile(load, horizon),
                    v_min_sq: line.key("vmin2")?.unwrap_or(DEFAULT_V_MIN_SQ),
                    v_max_sq: line.key("vmax2")?.unwrap_or(DEFAULT_V_MAX_SQ),
                });
            }
            "switches" => {
                line.check_keys(&["impedance"])?;
                switches.push(SwitchEdge {
                    id: line.pos(0, "switch id")?,
                    endpoints: (line.pos(1, "cell_a")?, line.pos(2, "cell_b")?),
                    impedance_proxy: line.key("impedance")?.unwrap_or(DEFAULT_IMPEDANCE),
                });
            }
            "sources" => {
                line.check_keys(&["host", "capacity", "ramp", "allow"])?;
                sources.push(EnergySource {
                    id: line.pos(0, "source id")?,
                    host_cell: line.required("host")?,
                    capacity: line.required("capacity")?,
                    ramp_limit: line.required("ramp")?,
                    allowlist: line.list::<usize>("allow")?.map(|v| v.into_iter().collect()),
                });
            }
            _ => unreachable!(),
        }
    }
    let graph = FeederGraph {
        name: meta.name,
        cells,
        switches,
        sources,
        horizon,
        dt,
        weights: meta.weights,
    };
    graph.validate()?;
    Ok(graph)
}

// ---------------------------------------------------------------------------
// Bus-level networks and node-cell reduction.

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub label: String,
    pub load_profile: Vec<f64>,
    pub v_min_sq: f64,
    pub v_max_sq: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BusLine {
    pub from: String,
    pub to: String,
    pub switchable: bool,
    pub impedance_proxy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BusSource {
    pub bus: String,
    pub capacity: f64,
    pub ramp_limit: f64,
    pub allow_buses: Option<Vec<String>>,
}

/// A feeder described bus by bus, before node-cell reduction.
#[derive(Debug, Clone, PartialEq)]
pub struct BusNetwork {
    pub name: String,
    pub horizon: usize,
    pub dt: f64,
    pub weights: RewardWeights,
    pub buses: Vec<Bus>,
    pub lines: Vec<BusLine>,
    pub sources: Vec<BusSource>,
}

impl BusNetwork {
    /// A network made only of labelled edges, with unit horizon and no loads.
    pub fn from_edges(edges: &[(&str, &str, bool)]) -> Self {
        Self {
            name: String::new(),
            horizon: 1,
            dt: 1.0,
            weights: RewardWeights::default(),
            buses: Vec::new(),
            lines: edges
                .iter()
                .map(|&(a, b, switchable)| BusLine {
                    from: a.to_string(),
                    to: b.to_string(),
                    switchable,
                    impedance_proxy: DEFAULT_IMPEDANCE,
                })
                .collect(),
            sources: Vec::new(),
        }
    }

    /// Every cell becomes one bus and every switch a switchable line.
    pub fn from_feeder(graph: &FeederGraph) -> Self {
        let label = |c: usize| format!("c{c}");
        Self {
            name: graph.name.clone(),
            horizon: graph.horizon,
            dt: graph.dt,
            weights: graph.weights,
            buses: graph
                .cells
                .iter()
                .map(|c| Bus {
                    label: label(c.id),
                    load_profile: c.load_profile.clone(),
                    v_min_sq: c.v_min_sq,
                    v_max_sq: c.v_max_sq,
                })
                .collect(),
            lines: graph
                .switches
                .iter()
                .map(|s| BusLine {
                    from: label(s.endpoints.0),
                    to: label(s.endpoints.1),
                    switchable: true,
                    impedance_proxy: s.impedance_proxy,
                })
                .collect(),
            sources: graph
                .sources
                .iter()
                .map(|s| BusSource {
                    bus: label(s.host_cell),
                    capacity: s.capacity,
                    ramp_limit: s.ramp_limit,
                    allow_buses: s.allowlist.as_ref().map(|a| a.iter().map(|&c| label(c)).collect()),
                })
                .collect(),
        }
    }
}

/// A switchable line that did not become a switch.
#[derive(Debug, Clone, PartialEq)]
pub struct DroppedLine {
    pub from: String,
    pub to: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct Reduction {
    pub graph: FeederGraph,
    pub dropped: Vec<DroppedLine>,
}

/// Parses a bus-level network file (`[buses]`, `[lines]`, `[sources]`).
pub fn parse_bus_network(text: &str) -> Result<BusNetwork, GridError> {
    let (meta, lines) = split_lines(text, &["buses", "lines", "sources"])?;
    let horizon = meta.horizon.ok_or_else(|| invalid("meta.horizon", "missing"))?;
    let mut net = BusNetwork {
        name: meta.name,
        horizon,
        dt: meta.dt.unwrap_or(1.0),
        weights: meta.weights,
        buses: Vec::new(),
        lines: Vec::new(),
        sources: Vec::new(),
    };
    for line in &lines {
        match line.section {
            "buses" => {
                line.check_keys(&["load", "vmin2", "vmax2"])?;
                let load: Vec<f64> = line.list("load")?.unwrap_or_else(|| vec![0.0]);
                net.buses.push(Bus {
                    label: line.pos(0, "bus label")?,
                    load_profile: expand_profile(load, horizon),
                    v_min_sq: line.key("vmin2")?.unwrap_or(DEFAULT_V_MIN_SQ),
                    v_max_sq: line.key("vmax2")?.unwrap_or(DEFAULT_V_MAX_SQ),
                });
            }
            "lines" => {
                line.check_keys(&["impedance"])?;
                let kind: String = line.pos(2, "line kind")?;
                let switchable = match kind.as_str() {
                    "switch" => true,
                    "fixed" => false,
                    other => return Err(line.err(format!("line kind must be switch or fixed, got '{other}'"))),
                };
                net.lines.push(BusLine {
                    from: line.pos(0, "from bus")?,
                    to: line.pos(1, "to bus")?,
                    switchable,
                    impedance_proxy: line.key("impedance")?.unwrap_or(DEFAULT_IMPEDANCE),
                });
            }
            "sources" => {
                line.check_keys(&["bus", "capacity", "ramp", "allow"])?;
                net.sources.push(BusSource {
                    bus: line.required("bus")?,
                    capacity: line.required("capacity")?,
                    ramp_limit: line.required("ramp")?,
                    allow_buses: line.list("allow")?,
                });
            }
            _ => unreachable!(),
        }
    }
    Ok(net)
}

/// Collapses buses joined by non-switchable lines into node cells.
///
/// Cells are numbered in order of their first bus, where buses are ordered by
/// the `[buses]` listing and then by first appearance in the line list.
/// Switchable lines internal to a cell, and parallel switchable lines between
/// the same pair of cells, are dropped and reported.
pub fn node_cell_reduction(net: &BusNetwork) -> Result<Reduction, GridError> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut order: Vec<&str> = Vec::new();
    for label in net
        .buses
        .iter()
        .map(|b| b.label.as_str())
        .chain(net.lines.iter().flat_map(|l| [l.from.as_str(), l.to.as_str()]))
    {
        if !index.contains_key(label) {
            index.insert(label, order.len());
            order.push(label);
        }
    }
    let n = order.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for l in net.lines.iter().filter(|l| !l.switchable) {
        let (a, b) = (find(&mut parent, index[l.from.as_str()]), find(&mut parent, index[l.to.as_str()]));
        if a != b {
            // keep the earliest bus as representative so numbering follows bus order
            let (lo, hi) = (a.min(b), a.max(b));
            parent[hi] = lo;
        }
    }
    let mut cell_of_root: HashMap<usize, usize> = HashMap::new();
    let mut bus_cell = vec![0usize; n];
    let mut members: Vec<Vec<usize>> = Vec::new();
    for bus in 0..n {
        let root = find(&mut parent, bus);
        let cell = *cell_of_root.entry(root).or_insert_with(|| {
            members.push(Vec::new());
            members.len() - 1
        });
        bus_cell[bus] = cell;
        members[cell].push(bus);
    }

    let bus_data: HashMap<&str, &Bus> = net.buses.iter().map(|b| (b.label.as_str(), b)).collect();
    let mut cells = Vec::with_capacity(members.len());
    for (id, ms) in members.iter().enumerate() {
        let mut load = vec![0.0; net.horizon];
        let mut v_min_sq = f64::NEG_INFINITY;
        let mut v_max_sq = f64::INFINITY;
        for &m in ms {
            match bus_data.get(order[m]) {
                Some(b) => {
                    if b.load_profile.len() < net.horizon {
                        return Err(invalid(
                            format!("buses.{}.load", b.label),
                            format!("profile has {} values but horizon is {}", b.load_profile.len(), net.horizon),
                        ));
                    }
                    for (t, v) in load.iter_mut().enumerate() {
                        *v += b.load_profile[t];
                    }
                    v_min_sq = v_min_sq.max(b.v_min_sq);
                    v_max_sq = v_max_sq.min(b.v_max_sq);
                }
                None => {
                    v_min_sq = v_min_sq.max(DEFAULT_V_MIN_SQ);
                    v_max_sq = v_max_sq.min(DEFAULT_V_MAX_SQ);
                }
            }
        }
        cells.push(NodeCell {
            id,
            member_buses: ms.iter().map(|&m| order[m].to_string()).collect(),
            load_profile: load,
            v_min_sq,
            v_max_sq,
        });
    }

    let mut switches = Vec::new();
    let mut dropped = Vec::new();
    let mut seen = BTreeSet::new();
    for l in net.lines.iter().filter(|l| l.switchable) {
        let (a, b) = (bus_cell[index[l.from.as_str()]], bus_cell[index[l.to.as_str()]]);
        let reason = if a == b {
            Some(format!("internal to cell {a}"))
        } else if !seen.insert((a.min(b), a.max(b))) {
            Some(format!("parallel to an existing switch between cells {a} and {b}"))
        } else {
            None
        };
        match reason {
            Some(reason) => dropped.push(DroppedLine {
                from: l.from.clone(),
                to: l.to.clone(),
                reason,
            }),
            None => switches.push(SwitchEdge {
                id: switches.len(),
                endpoints: (a, b),
                impedance_proxy: l.impedance_proxy,
            }),
        }
    }

    let lookup = |label: &str, field: String| {
        index
            .get(label)
            .map(|&i| bus_cell[i])
            .ok_or_else(|| invalid(field, format!("unknown bus '{label}'")))
    };
    let mut sources = Vec::new();
    for (i, s) in net.sources.iter().enumerate() {
        let allowlist = match &s.allow_buses {
            None => None,
            Some(list) => Some(
                list.iter()
                    .map(|b| lookup(b, format!("sources[{i}].allow")))
                    .collect::<Result<BTreeSet<_>, _>>()?,
            ),
        };
        sources.push(EnergySource {
            id: i,
            host_cell: lookup(&s.bus, format!("sources[{i}].bus"))?,
            capacity: s.capacity,
            ramp_limit: s.ramp_limit,
            allowlist,
        });
    }

    Ok(Reduction {
        graph: FeederGraph {
            name: net.name.clone(),
            cells,
            switches,
            sources,
            horizon: net.horizon,
            dt: net.dt,
            weights: net.weights,
        },
        dropped,
    })
}

// ---------------------------------------------------------------------------
// Time-dependent adjacency.

/// Symmetric cell-by-cell connectivity through in-service switches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjacencyMatrix {
    n: usize,
    bits: Vec<bool>,
}

impl AdjacencyMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            bits: vec![false; n * n],
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    fn set(&mut self, i: usize, j: usize) {
        self.bits[i * self.n + j] = true;
        self.bits[j * self.n + i] = true;
    }

    pub fn degree(&self, i: usize) -> usize {
        (0..self.n).filter(|&j| self.get(i, j)).count()
    }

    pub fn edge_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count() / 2
    }

    pub fn rows(&self) -> Vec<Vec<u8>> {
        (0..self.n)
            .map(|i| (0..self.n).map(|j| self.get(i, j) as u8).collect())
            .collect()
    }
}

/// Adjacency among node cells for the given state, with contingent switches removed.
pub fn adjacency_at(
    graph: &FeederGraph,
    state: &SystemState,
    contingencies: &Contingencies,
) -> Result<AdjacencyMatrix, GridError> {
    if state.n_cells() != graph.n_cells() {
        return Err(GridError::Dimension {
            expected: graph.n_cells(),
            found: state.n_cells(),
        });
    }
    let mut adj = AdjacencyMatrix::zeros(graph.n_cells());
    for s in graph.switches.iter().filter(|s| !contingencies.contains(&s.id)) {
        adj.set(s.endpoints.0, s.endpoints.1);
    }
    Ok(adj)
}
