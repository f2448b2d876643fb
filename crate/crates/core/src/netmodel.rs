//! Radial feeder data model and the embedded IEEE 37-node test feeder.
//!
//! The network is modeled as a single-phase equivalent: every bus carries one
//! RMS voltage magnitude and lines are series impedances. A grid is accepted by
//! the solvers only if [`validate`] returns no violations, i.e. there is exactly
//! one slack bus and the lines form a spanning tree rooted at it.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Label of the substation transformer node in the IEEE 37-node feeder.
pub const IEEE37_SLACK: &str = "799";

/// Branch list of the IEEE 37-node test feeder (from, to), oriented away from the
/// substation. The regulator (799-701) and the in-line transformer XFM-1 (709-775)
/// are carried as ordinary line segments.
pub const IEEE37_EDGES: [(&str, &str); 36] = [
    ("799", "701"),
    ("701", "702"),
    ("702", "705"),
    ("702", "713"),
    ("702", "703"),
    ("703", "727"),
    ("703", "730"),
    ("704", "714"),
    ("704", "720"),
    ("705", "742"),
    ("705", "712"),
    ("706", "725"),
    ("707", "724"),
    ("707", "722"),
    ("708", "733"),
    ("708", "732"),
    ("709", "731"),
    ("709", "708"),
    ("709", "775"),
    ("710", "735"),
    ("710", "736"),
    ("711", "741"),
    ("711", "740"),
    ("713", "704"),
    ("714", "718"),
    ("720", "707"),
    ("720", "706"),
    ("727", "744"),
    ("730", "709"),
    ("733", "734"),
    ("734", "737"),
    ("734", "710"),
    ("737", "738"),
    ("738", "711"),
    ("744", "728"),
    ("744", "729"),
];

#[derive(Debug, Error)]
pub enum GridError {
    #[error("unknown bus `{0}`")]
    UnknownBus(String),
    #[error("grid is invalid: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("grid config {path}: {message}")]
    Config { path: String, message: String },
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

/// Per-length electrical constants of a cable type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineParams {
    pub r_ohm_per_km: f64,
    pub x_ohm_per_km: f64,
    /// Ampacity, informational only.
    pub max_i_a: f64,
}

impl LineParams {
    /// NAYY 4x150 SE low-voltage cable.
    pub const NAYY_4X150_SE: LineParams = LineParams {
        r_ohm_per_km: 0.208,
        x_ohm_per_km: 0.080,
        max_i_a: 270.0,
    };

    pub fn impedance(&self, length_m: f64) -> Complex64 {
        let km = length_m / 1000.0;
        Complex64::new(self.r_ohm_per_km * km, self.x_ohm_per_km * km)
    }
}

impl Default for LineParams {
    fn default() -> Self {
        Self::NAYY_4X150_SE
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Slack,
    Load,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: String,
    pub kind: BusKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub from_bus: String,
    pub to_bus: String,
    pub length_m: f64,
    pub params: LineParams,
}

impl Line {
    pub fn impedance(&self) -> Complex64 {
        self.params.impedance(self.length_m)
    }
}

/// A radial feeder. Immutable once built; validate before solving.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridModel {
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    pub slack_voltage_v: f64,
}

/// A failed [`GridModel`] invariant.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NoSlack,
    MultipleSlack(Vec<String>),
    DuplicateBus(String),
    NonPositiveSlackVoltage(f64),
    UnknownEndpoint { line: usize, bus: String },
    SelfLoop { line: usize, bus: String },
    NonPositiveLength { line: usize, length_m: f64 },
    InvalidLineParams { line: usize, params: LineParams },
    LineCount { lines: usize, buses: usize },
    Cycle { line: usize },
    Disconnected(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoSlack => write!(f, "slack-uniqueness: no slack bus"),
            Violation::MultipleSlack(ids) => {
                write!(f, "slack-uniqueness: multiple slack buses {}", ids.join(","))
            }
            Violation::DuplicateBus(id) => write!(f, "bus-uniqueness: bus {id} declared twice"),
            Violation::NonPositiveSlackVoltage(v) => {
                write!(f, "slack-voltage: {v} V is not positive")
            }
            Violation::UnknownEndpoint { line, bus } => {
                write!(f, "endpoint: line #{line} references unknown bus {bus}")
            }
            Violation::SelfLoop { line, bus } => {
                write!(f, "endpoint: line #{line} connects bus {bus} to itself")
            }
            Violation::NonPositiveLength { line, length_m } => {
                write!(f, "line-length: line #{line} has length {length_m} m")
            }
            Violation::InvalidLineParams { line, params } => write!(
                f,
                "line-params: line #{line} has r={} x={} ohm/km",
                params.r_ohm_per_km, params.x_ohm_per_km
            ),
            Violation::LineCount { lines, buses } => write!(
                f,
                "radiality: {lines} lines for {buses} buses (expected {})",
                buses.saturating_sub(1)
            ),
            Violation::Cycle { line } => write!(f, "radiality: line #{line} closes a cycle"),
            Violation::Disconnected(id) => {
                write!(f, "connectivity: bus {id} is not reachable from the slack")
            }
        }
    }
}

/// Builds the IEEE 37-node feeder with every segment `spacing_m` long.
pub fn build_ieee37(spacing_m: f64, params: LineParams, slack_voltage_v: f64) -> GridModel {
    assert!(spacing_m > 0.0, "spacing_m must be positive");
    let mut ids: Vec<&str> = vec![IEEE37_SLACK];
    for (a, b) in IEEE37_EDGES {
        for id in [a, b] {
            if !ids.contains(&id) {
                ids.push(id);
            }
        }
    }
    let buses = ids
        .into_iter()
        .map(|id| Bus {
            id: id.to_string(),
            kind: if id == IEEE37_SLACK {
                BusKind::Slack
            } else {
                BusKind::Load
            },
        })
        .collect();
    let lines = IEEE37_EDGES
        .iter()
        .map(|(a, b)| Line {
            from_bus: a.to_string(),
            to_bus: b.to_string(),
            length_m: spacing_m,
            params,
        })
        .collect();
    GridModel {
        buses,
        lines,
        slack_voltage_v,
    }
}

/// Checks every [`GridModel`] invariant; empty result means the grid is usable.
pub fn validate(grid: &GridModel) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for (i, b) in grid.buses.iter().enumerate() {
        if index.insert(b.id.as_str(), i).is_some() {
            out.push(Violation::DuplicateBus(b.id.clone()));
        }
    }
    let slacks: Vec<String> = grid
        .buses
        .iter()
        .filter(|b| b.kind == BusKind::Slack)
        .map(|b| b.id.clone())
        .collect();
    match slacks.len() {
        0 => out.push(Violation::NoSlack),
        1 => {}
        _ => out.push(Violation::MultipleSlack(slacks.clone())),
    }
    if !(grid.slack_voltage_v > 0.0) {
        out.push(Violation::NonPositiveSlackVoltage(grid.slack_voltage_v));
    }
    if grid.lines.len() + 1 != grid.buses.len() {
        out.push(Violation::LineCount {
            lines: grid.lines.len(),
            buses: grid.buses.len(),
        });
    }

    // Union-find over bus indices to detect cycles.
    let mut parent: Vec<usize> = (0..grid.buses.len()).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); grid.buses.len()];
    for (li, line) in grid.lines.iter().enumerate() {
        if !(line.length_m > 0.0) {
            out.push(Violation::NonPositiveLength {
                line: li,
                length_m: line.length_m,
            });
        }
        let p = line.params;
        if !(p.r_ohm_per_km > 0.0) || !(p.x_ohm_per_km >= 0.0) {
            out.push(Violation::InvalidLineParams { line: li, params: p });
        }
        let mut ends = [None, None];
        for (k, id) in [&line.from_bus, &line.to_bus].into_iter().enumerate() {
            match index.get(id.as_str()) {
                Some(&i) => ends[k] = Some(i),
                None => out.push(Violation::UnknownEndpoint {
                    line: li,
                    bus: id.clone(),
                }),
            }
        }
        if let [Some(a), Some(b)] = ends {
            if a == b {
                out.push(Violation::SelfLoop {
                    line: li,
                    bus: line.from_bus.clone(),
                });
                continue;
            }
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra == rb {
                out.push(Violation::Cycle { line: li });
            } else {
                parent[ra] = rb;
            }
            adj[a].push(b);
            adj[b].push(a);
        }
    }

    if let Some(root) = grid
        .buses
        .iter()
        .position(|b| b.kind == BusKind::Slack)
    {
        let mut seen = vec![false; grid.buses.len()];
        let mut queue = VecDeque::from([root]);
        seen[root] = true;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        for (i, b) in grid.buses.iter().enumerate() {
            if !seen[i] {
                out.push(Violation::Disconnected(b.id.clone()));
            }
        }
    }
    out
}

/// Tree view of a validated grid, rooted at the slack bus.
///
/// Bus indices follow `GridModel::buses`. `order` lists buses in breadth-first
/// order from the slack, so iterating it forward visits parents before children.
#[derive(Debug, Clone)]
pub struct RadialTopology {
    pub slack: usize,
    /// Parent bus and connecting line index; `None` for the slack.
    pub parent: Vec<Option<(usize, usize)>>,
    pub children: Vec<Vec<usize>>,
    pub order: Vec<usize>,
    index: HashMap<String, usize>,
}

impl RadialTopology {
    pub fn new(grid: &GridModel) -> Result<Self, GridError> {
        let violations = validate(grid);
        if !violations.is_empty() {
            return Err(GridError::Invalid(violations));
        }
        let index: HashMap<String, usize> = grid
            .buses
            .iter()
            .enumerate()
            .map(|(i, b)| (b.id.clone(), i))
            .collect();
        let n = grid.buses.len();
        let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        for (li, l) in grid.lines.iter().enumerate() {
            let (a, b) = (index[&l.from_bus], index[&l.to_bus]);
            adj[a].push((b, li));
            adj[b].push((a, li));
        }
        let slack = grid
            .buses
            .iter()
            .position(|b| b.kind == BusKind::Slack)
            .expect("validated grid has a slack bus");
        let mut parent = vec![None; n];
        let mut children = vec![Vec::new(); n];
        let mut order = Vec::with_capacity(n);
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([slack]);
        seen[slack] = true;
        while let Some(u) = queue.pop_front() {
            order.push(u);
            for &(v, li) in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    parent[v] = Some((u, li));
                    children[u].push(v);
                    queue.push_back(v);
                }
            }
        }
        Ok(Self {
            slack,
            parent,
            children,
            order,
            index,
        })
    }

    pub fn index_of(&self, bus: &str) -> Result<usize, GridError> {
        self.index
            .get(bus)
            .copied()
            .ok_or_else(|| GridError::UnknownBus(bus.to_string()))
    }

    /// Bus indices from the slack to `bus`, inclusive of both ends.
    pub fn path_from_slack(&self, bus: usize) -> Vec<usize> {
        let mut path = vec![bus];
        let mut cur = bus;
        while let Some((p, _)) = self.parent[cur] {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    /// All buses in the subtree rooted at `bus`, including `bus`.
    pub fn subtree(&self, bus: usize) -> Vec<usize> {
        let mut out = vec![bus];
        let mut i = 0;
        while i < out.len() {
            out.extend_from_slice(&self.children[out[i]]);
            i += 1;
        }
        out
    }
}

impl GridModel {
    pub fn slack_id(&self) -> Option<&str> {
        self.buses
            .iter()
            .find(|b| b.kind == BusKind::Slack)
            .map(|b| b.id.as_str())
    }

    pub fn contains(&self, bus: &str) -> bool {
        self.buses.iter().any(|b| b.id == bus)
    }

    pub fn load_bus_ids(&self) -> impl Iterator<Item = &str> {
        self.buses
            .iter()
            .filter(|b| b.kind == BusKind::Load)
            .map(|b| b.id.as_str())
    }

    pub fn topology(&self) -> Result<RadialTopology, GridError> {
        RadialTopology::new(self)
    }
}

/// Sum of line impedances on the unique slack-to-`bus` path.
pub fn path_impedance(grid: &GridModel, bus: &str) -> Result<Complex64, GridError> {
    let topo = grid.topology()?;
    let mut cur = topo.index_of(bus)?;
    let mut z = Complex64::new(0.0, 0.0);
    while let Some((p, li)) = topo.parent[cur] {
        z += grid.lines[li].impedance();
        cur = p;
    }
    Ok(z)
}

/// Overrides for the reference feeder, read from a TOML grid config file.
///
/// ```toml
/// spacing_m = 40.0
/// slack_voltage_v = 230.0
/// [line]
/// r_ohm_per_km = 0.208
/// x_ohm_per_km = 0.080
/// max_i_a = 270.0
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub spacing_m: f64,
    pub slack_voltage_v: f64,
    pub line: LineParams,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            spacing_m: 40.0,
            slack_voltage_v: 230.0,
            line: LineParams::NAYY_4X150_SE,
        }
    }
}

impl GridConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, GridError> {
        toml::from_str(s).map_err(|e| GridError::Config {
            path: "<inline>".into(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, GridError> {
        let text = std::fs::read_to_string(path).map_err(|e| GridError::Config {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        toml::from_str(&text).map_err(|e| GridError::Config {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    /// Builds the feeder; spacing must be positive, everything else is left
    /// to [`validate`].
    pub fn build(&self) -> Result<GridModel, GridError> {
        if !(self.spacing_m > 0.0) {
            return Err(GridError::Config {
                path: "<config>".into(),
                message: format!("spacing_m must be positive, got {}", self.spacing_m),
            });
        }
        Ok(build_ieee37(self.spacing_m, self.line, self.slack_voltage_v))
    }
}

/// The fixed configuration used for headline numbers: 40 m NAYY segments, 230 V.
pub fn reference_grid() -> GridModel {
    build_ieee37(40.0, LineParams::NAYY_4X150_SE, 230.0)
}

/// Helper for tests and small studies: a slack bus and one load bus.
pub fn two_bus(slack_voltage_v: f64, r_ohm: f64, x_ohm: f64) -> GridModel {
    GridModel {
        buses: vec![
            Bus {
                id: "0".into(),
                kind: BusKind::Slack,
            },
            Bus {
                id: "1".into(),
                kind: BusKind::Load,
            },
        ],
        lines: vec![Line {
            from_bus: "0".into(),
            to_bus: "1".into(),
            length_m: 1000.0,
            params: LineParams {
                r_ohm_per_km: r_ohm,
                x_ohm_per_km: x_ohm,
                max_i_a: f64::INFINITY,
            },
        }],
        slack_voltage_v,
    }
}
