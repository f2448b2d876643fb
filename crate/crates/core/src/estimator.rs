//! Load fitting from a single smart-plug voltage reading.
//!
//! Two load patterns explain the drop between the slack and the plug's bus:
//! the same load on every non-slack bus, or one load at the plug's bus. Both
//! fits bisect on the load value, since the plug voltage falls strictly as load
//! rises.

use serde::Serialize;
use thiserror::Error;

use crate::netmodel::{GridError, GridModel};
use crate::powerflow::{LoadSet, PowerFlowError, RadialSolver, SolverOptions, VoltageSolution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Bound {
    Lower,
    Upper,
}

#[derive(Debug, Error)]
pub enum EstimateError {
    #[error(transparent)]
    PowerFlow(#[from] PowerFlowError),
    #[error("bus `{0}` is the slack bus; fit a load bus instead")]
    SlackBus(String),
    #[error("invalid fit config: {0}")]
    Config(&'static str),
    #[error(
        "measured {measured_v:.3} V is unreachable: the {bound:?} load bound {load_w} W gives {bound_v:.3} V"
    )]
    BoundExhausted {
        bound: Bound,
        load_w: f64,
        bound_v: f64,
        measured_v: f64,
    },
    #[error(
        "measured {measured_v:.3} V is below the lowest feasible voltage {lowest_v:.3} V at this bus"
    )]
    BelowCollapse { measured_v: f64, lowest_v: f64 },
}

impl From<GridError> for EstimateError {
    fn from(e: GridError) -> Self {
        EstimateError::PowerFlow(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FitConfig {
    pub tol_v: f64,
    pub load_lo_w: f64,
    pub load_hi_w: f64,
    pub max_outer_iter: usize,
    #[serde(skip)]
    pub solver: SolverOptions,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            tol_v: 0.01,
            load_lo_w: 0.0,
            load_hi_w: 50_000.0,
            max_outer_iter: 100,
            solver: SolverOptions::default(),
        }
    }
}

impl FitConfig {
    fn check(&self) -> Result<(), EstimateError> {
        if !(self.tol_v > 0.0) {
            return Err(EstimateError::Config("tol_v must be positive"));
        }
        if !(self.load_lo_w <= self.load_hi_w) {
            return Err(EstimateError::Config("load_lo_w must not exceed load_hi_w"));
        }
        if self.load_lo_w < 0.0 {
            return Err(EstimateError::Config("negative loads are not fitted"));
        }
        if self.max_outer_iter == 0 {
            return Err(EstimateError::Config("max_outer_iter must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FitMode {
    Uniform,
    Single,
}

impl std::str::FromStr for FitMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(FitMode::Uniform),
            "single" => Ok(FitMode::Single),
            other => Err(format!("unknown fit mode `{other}` (uniform|single)")),
        }
    }
}

/// One bisection step: the load tried, and the bracket after the step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FitStep {
    pub load_w: f64,
    pub residual_v: f64,
    pub bracket_lo_w: f64,
    pub bracket_hi_w: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimationResult {
    pub mode: FitMode,
    pub bus: String,
    pub measured_v: f64,
    pub fitted_load_w: f64,
    pub solution: VoltageSolution,
    pub outer_iterations: usize,
    /// `|V(bus) - measured_v|` of the solve at `fitted_load_w`.
    pub residual_v: f64,
    pub converged: bool,
    /// The reading exceeded the slack voltage; the load was clamped to zero.
    pub above_slack: bool,
    #[serde(skip)]
    pub trace: Vec<FitStep>,
}

fn loads_for(mode: FitMode, grid: &GridModel, bus: &str, load_w: f64) -> LoadSet {
    match mode {
        FitMode::Uniform => LoadSet::uniform(grid, load_w),
        FitMode::Single => LoadSet::single(bus, load_w),
    }
}

/// Fits `mode` loads so that the solved voltage at `at` matches `measured_v`.
pub fn fit(
    mode: FitMode,
    grid: &GridModel,
    measured_v: f64,
    at: &str,
    cfg: &FitConfig,
) -> Result<EstimationResult, EstimateError> {
    cfg.check()?;
    let solver = RadialSolver::new(grid)?;
    let idx = solver.topology().index_of(at)?;
    if idx == solver.topology().slack {
        return Err(EstimateError::SlackBus(at.to_string()));
    }

    // Voltage at `at`, or None when the load is beyond the feasible region.
    let eval = |load_w: f64| -> Result<Option<VoltageSolution>, EstimateError> {
        match solver.solve(&loads_for(mode, grid, at, load_w), &cfg.solver) {
            Ok(sol) => Ok(Some(sol)),
            Err(PowerFlowError::Infeasible { .. }) => Ok(None),
            Err(e) => Err(e.into()),
        }
    };
    let finish = |load_w: f64,
                  sol: VoltageSolution,
                  outer: usize,
                  above_slack: bool,
                  trace: Vec<FitStep>| {
        let residual_v = (sol.voltages_v[idx] - measured_v).abs();
        EstimationResult {
            mode,
            bus: at.to_string(),
            measured_v,
            fitted_load_w: load_w,
            converged: residual_v <= cfg.tol_v || above_slack,
            solution: sol,
            outer_iterations: outer,
            residual_v,
            above_slack,
            trace,
        }
    };

    let lo_sol = eval(cfg.load_lo_w)?.ok_or(EstimateError::BoundExhausted {
        bound: Bound::Lower,
        load_w: cfg.load_lo_w,
        bound_v: f64::NAN,
        measured_v,
    })?;
    let v_lo = lo_sol.voltages_v[idx];
    if measured_v >= grid.slack_voltage_v && cfg.load_lo_w == 0.0 {
        let above = measured_v > grid.slack_voltage_v;
        return Ok(finish(0.0, lo_sol, 0, above, Vec::new()));
    }
    if (v_lo - measured_v).abs() <= cfg.tol_v {
        return Ok(finish(cfg.load_lo_w, lo_sol, 0, false, Vec::new()));
    }
    if v_lo < measured_v {
        return Err(EstimateError::BoundExhausted {
            bound: Bound::Lower,
            load_w: cfg.load_lo_w,
            bound_v: v_lo,
            measured_v,
        });
    }
    match eval(cfg.load_hi_w)? {
        Some(sol) if sol.voltages_v[idx] - measured_v > cfg.tol_v => {
            return Err(EstimateError::BoundExhausted {
                bound: Bound::Upper,
                load_w: cfg.load_hi_w,
                bound_v: sol.voltages_v[idx],
                measured_v,
            });
        }
        Some(sol) if (sol.voltages_v[idx] - measured_v).abs() <= cfg.tol_v => {
            return Ok(finish(cfg.load_hi_w, sol, 0, false, Vec::new()));
        }
        _ => {}
    }

    // Invariant: V(lo) > measured + tol, V(hi) < measured - tol (or hi infeasible).
    let (mut lo, mut hi) = (cfg.load_lo_w, cfg.load_hi_w);
    let mut trace = Vec::new();
    let mut best: Option<(f64, VoltageSolution)> = None;
    let mut undershoot = false;
    for outer in 1..=cfg.max_outer_iter {
        let mid = 0.5 * (lo + hi);
        let sol = eval(mid)?;
        let residual = match &sol {
            Some(s) => s.voltages_v[idx] - measured_v,
            None => f64::NEG_INFINITY,
        };
        if residual > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        trace.push(FitStep {
            load_w: mid,
            residual_v: residual.abs(),
            bracket_lo_w: lo,
            bracket_hi_w: hi,
        });
        if let Some(s) = sol {
            undershoot |= residual < 0.0;
            if residual.abs() <= cfg.tol_v {
                return Ok(finish(mid, s, outer, false, trace));
            }
            if best.as_ref().is_none_or(|(_, b)| {
                (b.voltages_v[idx] - measured_v).abs() > residual.abs()
            }) {
                best = Some((mid, s));
            }
        }
    }
    // Every feasible solve stayed above the reading: it lies past the nose point.
    if !undershoot {
        if let Some((_, b)) = &best {
            return Err(EstimateError::BelowCollapse {
                measured_v,
                lowest_v: b.voltages_v[idx],
            });
        }
    }
    // Out of iterations: report the closest solve, flagged unconverged.
    let (load, sol) = match best {
        Some(b) => b,
        None => (cfg.load_lo_w, lo_sol),
    };
    Ok(finish(load, sol, cfg.max_outer_iter, false, trace))
}

/// Same load on every non-slack bus.
pub fn fit_uniform_loads(
    grid: &GridModel,
    measured_v: f64,
    at: &str,
    cfg: &FitConfig,
) -> Result<EstimationResult, EstimateError> {
    fit(FitMode::Uniform, grid, measured_v, at, cfg)
}

/// One load at the measured bus.
pub fn fit_single_load(
    grid: &GridModel,
    measured_v: f64,
    at: &str,
    cfg: &FitConfig,
) -> Result<EstimationResult, EstimateError> {
    fit(FitMode::Single, grid, measured_v, at, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{reference_grid, two_bus};
    use crate::powerflow::solve;

    #[test]
    fn slack_voltage_means_zero_load() {
        let g = reference_grid();
        for mode in [FitMode::Uniform, FitMode::Single] {
            let r = fit(mode, &g, 230.0, "741", &FitConfig::default()).unwrap();
            assert_eq!(r.fitted_load_w, 0.0);
            assert_eq!(r.residual_v, 0.0);
            assert!(!r.above_slack);
            assert!(r.converged);
        }
    }

    #[test]
    fn above_slack_clamps_and_flags() {
        let g = reference_grid();
        let r = fit_single_load(&g, 231.0, "741", &FitConfig::default()).unwrap();
        assert_eq!(r.fitted_load_w, 0.0);
        assert!(r.above_slack);
    }

    #[test]
    fn uniform_round_trip_500w() {
        let g = reference_grid();
        let planted = solve(&g, &LoadSet::uniform(&g, 500.0), 1e-9, 200).unwrap();
        let v = planted.voltage("741").unwrap();
        let cfg = FitConfig::default();
        let r = fit_uniform_loads(&g, v, "741", &cfg).unwrap();
        assert!(r.converged);
        assert!(r.residual_v <= cfg.tol_v);
        // dV/dL at 741 is about 6 mV per watt, so 10 mV allows ~2 W.
        assert!((r.fitted_load_w - 500.0).abs() < 2.0, "{}", r.fitted_load_w);
    }

    #[test]
    fn two_bus_inverse() {
        let g = two_bus(230.0, 0.1, 0.0);
        let r = fit_single_load(&g, 229.5644, "1", &FitConfig::default()).unwrap();
        // dV/dP = R / V ~ 4.35e-4 V/W, tol 0.01 V -> within ~23 W.
        assert!((r.fitted_load_w - 1000.0).abs() < 25.0, "{}", r.fitted_load_w);
        assert!(r.residual_v <= 0.01);
    }

    #[test]
    fn single_round_trip_26kw_at_741() {
        let g = reference_grid();
        let planted = solve(&g, &LoadSet::single("741", 26_000.0), 1e-9, 200).unwrap();
        let v = planted.voltage("741").unwrap();
        let r = fit_single_load(&g, v, "741", &FitConfig::default()).unwrap();
        assert!(((r.fitted_load_w - 26_000.0) / 26_000.0).abs() < 0.01);
    }

    #[test]
    fn unreachable_measurement_names_upper_bound() {
        let g = reference_grid();
        let cfg = FitConfig {
            load_hi_w: 1000.0,
            ..FitConfig::default()
        };
        let err = fit_single_load(&g, 200.0, "741", &cfg).unwrap_err();
        assert!(matches!(
            err,
            EstimateError::BoundExhausted {
                bound: Bound::Upper,
                ..
            }
        ));
    }

    #[test]
    fn reading_past_the_nose_point_is_an_error() {
        let g = reference_grid();
        let err = fit_uniform_loads(&g, 100.0, "741", &FitConfig::default()).unwrap_err();
        match err {
            EstimateError::BelowCollapse { measured_v, lowest_v } => {
                assert_eq!(measured_v, 100.0);
                // The floor is 0.5 p.u.; the nose point sits above it.
                assert!(lowest_v > 115.0 && lowest_v < 230.0, "{lowest_v}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn lower_bound_binds_when_reading_is_too_high() {
        let g = reference_grid();
        let cfg = FitConfig {
            load_lo_w: 5000.0,
            ..FitConfig::default()
        };
        let err = fit_single_load(&g, 229.99, "741", &cfg).unwrap_err();
        assert!(matches!(
            err,
            EstimateError::BoundExhausted {
                bound: Bound::Lower,
                ..
            }
        ));
    }

    #[test]
    fn slack_and_unknown_buses_rejected() {
        let g = reference_grid();
        let cfg = FitConfig::default();
        assert!(matches!(
            fit_single_load(&g, 229.0, "799", &cfg),
            Err(EstimateError::SlackBus(_))
        ));
        assert!(fit_single_load(&g, 229.0, "bogus", &cfg).is_err());
        let bad = FitConfig {
            tol_v: 0.0,
            ..cfg
        };
        assert!(matches!(
            fit_single_load(&g, 229.0, "741", &bad),
            Err(EstimateError::Config(_))
        ));
    }

    #[test]
    fn bracket_shrinks_without_oscillation() {
        let g = reference_grid();
        let v = solve(&g, &LoadSet::uniform(&g, 733.0), 1e-9, 200)
            .unwrap()
            .voltage("741")
            .unwrap();
        let cfg = FitConfig::default();
        let r = fit_uniform_loads(&g, v, "741", &cfg).unwrap();
        let mut width = cfg.load_hi_w - cfg.load_lo_w;
        let (mut lo, mut hi) = (cfg.load_lo_w, cfg.load_hi_w);
        for step in &r.trace {
            let w = step.bracket_hi_w - step.bracket_lo_w;
            assert!((w - width / 2.0).abs() < 1e-9);
            assert!(step.bracket_lo_w >= lo && step.bracket_hi_w <= hi);
            lo = step.bracket_lo_w;
            hi = step.bracket_hi_w;
            width = w;
        }
        // Iteration bound from the bracket size and the local sensitivity.
        let v_a = solve(&g, &LoadSet::uniform(&g, 700.0), 1e-9, 200).unwrap();
        let v_b = solve(&g, &LoadSet::uniform(&g, 701.0), 1e-9, 200).unwrap();
        let sens = v_a.voltage("741").unwrap() - v_b.voltage("741").unwrap();
        let bound = (((cfg.load_hi_w - cfg.load_lo_w) * sens / cfg.tol_v).log2()).ceil() as usize;
        assert!(r.outer_iterations <= bound + 2, "{} > {bound}+2", r.outer_iterations);
    }
}
