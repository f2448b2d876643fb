//! Backward/forward sweep power flow for radial feeders.
//!
//! Loads are constant-power and purely resistive (unity power factor). Each sweep
//! aggregates branch currents from the leaves towards the slack, then propagates
//! voltages outward as `V_child = V_parent - I_branch * Z_line`.

use std::collections::BTreeMap;

use num_complex::Complex64;
use serde::Serialize;
use thiserror::Error;

use crate::netmodel::{GridError, GridModel, RadialTopology};

#[derive(Debug, Error)]
pub enum PowerFlowError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("load on slack bus `{0}` is not allowed")]
    LoadOnSlack(String),
    #[error("load at bus `{bus}` is not finite: {value}")]
    NonFiniteLoad { bus: String, value: f64 },
    #[error("solver parameter {0}")]
    BadParameter(&'static str),
    #[error(
        "infeasible load: voltage at bus `{bus}` fell to {voltage_v:.3} V, below the {floor_v:.3} V floor"
    )]
    Infeasible {
        bus: String,
        voltage_v: f64,
        floor_v: f64,
    },
}

/// Active power draw per bus in watts. Buses not listed draw nothing.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LoadSet(BTreeMap<String, f64>);

impl LoadSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// The same load on every non-slack bus of `grid`.
    pub fn uniform(grid: &GridModel, load_w: f64) -> Self {
        Self(
            grid.load_bus_ids()
                .map(|id| (id.to_string(), load_w))
                .collect(),
        )
    }

    pub fn single(bus: &str, load_w: f64) -> Self {
        Self(BTreeMap::from([(bus.to_string(), load_w)]))
    }

    pub fn set(&mut self, bus: impl Into<String>, load_w: f64) {
        self.0.insert(bus.into(), load_w);
    }

    pub fn get(&self, bus: &str) -> f64 {
        self.0.get(bus).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn total_w(&self) -> f64 {
        self.0.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Reads `bus,load_w` rows; a repeated bus keeps its last value.
    pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Self, csv::Error> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut loads = Self::new();
        for row in rdr.deserialize() {
            let (bus, load_w): (String, f64) = row?;
            loads.set(bus, load_w);
        }
        Ok(loads)
    }
}

impl FromIterator<(String, f64)> for LoadSet {
    fn from_iter<T: IntoIterator<Item = (String, f64)>>(iter: T) -> Self {
        Self(iter.into_iter().collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Convergence threshold on the largest voltage change of one sweep (V).
    pub eps_v: f64,
    pub max_iter: usize,
    /// Voltage floor in per-unit of the slack voltage; below it the load is infeasible.
    pub floor_pu: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            eps_v: 1e-6,
            max_iter: 100,
            floor_pu: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VoltageSolution {
    /// RMS voltage magnitude per bus, in `GridModel::buses` order.
    pub bus_ids: Vec<String>,
    pub voltages_v: Vec<f64>,
    #[serde(skip)]
    pub phasors: Vec<Complex64>,
    /// Branch current per line, in `GridModel::lines` order.
    #[serde(skip)]
    pub line_currents: Vec<Complex64>,
    pub iterations: usize,
    pub converged: bool,
    pub total_loss_w: f64,
}

impl VoltageSolution {
    pub fn voltage(&self, bus: &str) -> Option<f64> {
        self.bus_ids
            .iter()
            .position(|b| b == bus)
            .map(|i| self.voltages_v[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.bus_ids
            .iter()
            .map(String::as_str)
            .zip(self.voltages_v.iter().copied())
    }
}

/// A grid prepared for repeated solves.
#[derive(Debug, Clone)]
pub struct RadialSolver<'g> {
    grid: &'g GridModel,
    topo: RadialTopology,
    impedances: Vec<Complex64>,
}

impl<'g> RadialSolver<'g> {
    pub fn new(grid: &'g GridModel) -> Result<Self, GridError> {
        let topo = grid.topology()?;
        let impedances = grid.lines.iter().map(|l| l.impedance()).collect();
        Ok(Self {
            grid,
            topo,
            impedances,
        })
    }

    pub fn grid(&self) -> &GridModel {
        self.grid
    }

    pub fn topology(&self) -> &RadialTopology {
        &self.topo
    }

    fn load_vector(&self, loads: &LoadSet) -> Result<Vec<f64>, PowerFlowError> {
        let mut p = vec![0.0; self.grid.buses.len()];
        for (bus, w) in loads.iter() {
            let i = self.topo.index_of(bus)?;
            if i == self.topo.slack {
                return Err(PowerFlowError::LoadOnSlack(bus.to_string()));
            }
            if !w.is_finite() {
                return Err(PowerFlowError::NonFiniteLoad {
                    bus: bus.to_string(),
                    value: w,
                });
            }
            p[i] = w;
        }
        Ok(p)
    }

    /// Branch currents for the given voltages; `line_currents[l]` flows away
    /// from the slack through line `l`.
    fn backward_sweep(&self, p: &[f64], v: &[Complex64], line_currents: &mut [Complex64]) {
        let n = v.len();
        let mut injected = vec![Complex64::new(0.0, 0.0); n];
        for i in 0..n {
            if p[i] != 0.0 {
                // I = conj(S / V) with S = P + j0.
                injected[i] = (Complex64::new(p[i], 0.0) / v[i]).conj();
            }
        }
        for &bus in self.topo.order.iter().rev() {
            if let Some((parent, line)) = self.topo.parent[bus] {
                let i = injected[bus];
                line_currents[line] = i;
                injected[parent] += i;
            }
        }
    }

    pub fn solve(
        &self,
        loads: &LoadSet,
        opts: &SolverOptions,
    ) -> Result<VoltageSolution, PowerFlowError> {
        if !(opts.eps_v > 0.0) {
            return Err(PowerFlowError::BadParameter("eps_v must be positive"));
        }
        if !(opts.floor_pu >= 0.0 && opts.floor_pu < 1.0) {
            return Err(PowerFlowError::BadParameter("floor_pu must be in [0, 1)"));
        }
        let p = self.load_vector(loads)?;
        let n = self.grid.buses.len();
        let v0 = Complex64::new(self.grid.slack_voltage_v, 0.0);
        let floor_v = opts.floor_pu * self.grid.slack_voltage_v;
        let mut v = vec![v0; n];
        let mut currents = vec![Complex64::new(0.0, 0.0); self.grid.lines.len()];
        let mut iterations = 0;
        let mut converged = false;

        while iterations < opts.max_iter {
            iterations += 1;
            self.backward_sweep(&p, &v, &mut currents);
            let mut max_change: f64 = 0.0;
            for &bus in &self.topo.order {
                if let Some((parent, line)) = self.topo.parent[bus] {
                    let next = v[parent] - currents[line] * self.impedances[line];
                    let mag = next.norm();
                    if !(mag >= floor_v) {
                        return Err(PowerFlowError::Infeasible {
                            bus: self.grid.buses[bus].id.clone(),
                            voltage_v: mag,
                            floor_v,
                        });
                    }
                    max_change = max_change.max((next - v[bus]).norm());
                    v[bus] = next;
                }
            }
            if max_change < opts.eps_v {
                converged = true;
                break;
            }
        }

        // Currents consistent with the final voltages.
        self.backward_sweep(&p, &v, &mut currents);
        let total_loss_w = currents
            .iter()
            .zip(&self.impedances)
            .map(|(i, z)| i.norm_sqr() * z.re)
            .sum();
        let mut voltages_v: Vec<f64> = v.iter().map(|c| c.norm()).collect();
        voltages_v[self.topo.slack] = self.grid.slack_voltage_v;

        Ok(VoltageSolution {
            bus_ids: self.grid.buses.iter().map(|b| b.id.clone()).collect(),
            voltages_v,
            phasors: v,
            line_currents: currents,
            iterations,
            converged,
            total_loss_w,
        })
    }

    /// Active power delivered by the slack bus.
    pub fn slack_injection_w(&self, solution: &VoltageSolution) -> f64 {
        let v0 = solution.phasors[self.topo.slack];
        self.topo.children[self.topo.slack]
            .iter()
            .map(|&c| {
                let (_, line) = self.topo.parent[c].expect("child has a parent line");
                (v0 * solution.line_currents[line].conj()).re
            })
            .sum()
    }
}

/// Solves the feeder for `loads` with default voltage floor.
pub fn solve(
    grid: &GridModel,
    loads: &LoadSet,
    eps_v: f64,
    max_iter: usize,
) -> Result<VoltageSolution, PowerFlowError> {
    let opts = SolverOptions {
        eps_v,
        max_iter,
        ..SolverOptions::default()
    };
    RadialSolver::new(grid)?.solve(loads, &opts)
}

/// `|slack injection - sum(loads) - line losses|` in watts.
pub fn power_balance(
    grid: &GridModel,
    loads: &LoadSet,
    solution: &VoltageSolution,
) -> Result<f64, PowerFlowError> {
    let solver = RadialSolver::new(grid)?;
    let injected = solver.slack_injection_w(solution);
    Ok((injected - loads.total_w() - solution.total_loss_w).abs())
}
