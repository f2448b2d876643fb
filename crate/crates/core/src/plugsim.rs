//! Smart-plug and reference-meter emulation.
//!
//! A plug's metering chip reports voltage as a pulse width which the firmware
//! times in whole microseconds, so readings land on a coarse grid of roughly
//! 0.3 V that is then printed with one decimal. The simulator reproduces this by
//! adding a constant bias and Gaussian noise to the true voltage, snapping to the
//! pulse-step grid and rounding to 0.1 V. The reference meter reports the exact
//! power-flow voltage (plus optional noise) once a minute, either instantaneous
//! or averaged over a trailing window.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netmodel::{GridConfig, GridError, GridModel};
use crate::powerflow::{LoadSet, PowerFlowError, RadialSolver, SolverOptions, VoltageSolution};

pub const NANOS_PER_SEC: i64 = 1_000_000_000;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("placement of `{device}` references unknown bus `{bus}`")]
    UnknownBus { device: String, bus: String },
    #[error("device id `{0}` is used twice")]
    DuplicateDevice(String),
    #[error("invalid profile for `{device}`: {message}")]
    Profile { device: String, message: String },
    #[error("load timeline at t={timestamp_ns} ns cannot be solved: {source}")]
    Solve {
        timestamp_ns: i64,
        #[source]
        source: PowerFlowError,
    },
    #[error("load timeline: {0}")]
    Timeline(String),
    #[error("scenario config {path}: {message}")]
    Config { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// One timestamped voltage reading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub device_id: String,
    /// Nanoseconds since the Unix epoch.
    pub timestamp_ns: i64,
    pub voltage_v: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_w: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub current_a: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlugProfile {
    pub device_id: String,
    /// Constant bias added to every reading.
    pub offset_v: f64,
    /// Volts per microsecond of measured pulse width.
    pub pulse_step_v: f64,
    /// Gaussian noise applied before quantization.
    pub noise_sigma_v: f64,
    pub cadence_s: f64,
    /// First tick relative to the scenario start; must be below `cadence_s`.
    pub phase_s: f64,
    pub rng_seed: u64,
}

impl Default for PlugProfile {
    fn default() -> Self {
        Self {
            device_id: "plug".into(),
            offset_v: 0.0,
            pulse_step_v: 0.28,
            noise_sigma_v: 0.15,
            cadence_s: 10.0,
            phase_s: 0.0,
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReferenceMeterProfile {
    pub device_id: String,
    pub cadence_s: f64,
    pub noise_sigma_v: f64,
    pub phase_s: f64,
    /// Each reading is the time-average over `(t - averaging_s, t]`; 0 reads
    /// the instantaneous voltage.
    pub averaging_s: f64,
    pub rng_seed: u64,
}

impl Default for ReferenceMeterProfile {
    fn default() -> Self {
        Self {
            device_id: "ref".into(),
            cadence_s: 60.0,
            noise_sigma_v: 0.0,
            phase_s: 0.0,
            averaging_s: 0.0,
            rng_seed: 0,
        }
    }
}

fn round_half_away(x: f64) -> f64 {
    // f64::round rounds half away from zero.
    x.round()
}

/// Rounds to one decimal place, half away from zero.
pub fn round_tenth(v: f64) -> f64 {
    round_half_away(v * 10.0) / 10.0
}

/// Snaps `v_true` onto the integer-microsecond pulse grid, then to one decimal.
pub fn quantize(v_true: f64, pulse_step_v: f64) -> f64 {
    let ticks = round_half_away(v_true / pulse_step_v);
    round_tenth(ticks * pulse_step_v)
}

fn sample_rng(seed: u64, timestamp_ns: i64) -> ChaCha8Rng {
    // Splitmix-style mix so neighbouring timestamps get unrelated streams.
    let mut z = seed ^ (timestamp_ns as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

fn gaussian(seed: u64, timestamp_ns: i64, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    let mut rng = sample_rng(seed, timestamp_ns);
    Normal::new(0.0, sigma)
        .expect("sigma is finite and non-negative")
        .sample(&mut rng)
}

/// One plug reading. Deterministic in `(profile, v_true, timestamp_ns)`.
pub fn sample_plug(profile: &PlugProfile, v_true: f64, timestamp_ns: i64) -> Measurement {
    let noise = gaussian(profile.rng_seed, timestamp_ns, profile.noise_sigma_v);
    Measurement {
        device_id: profile.device_id.clone(),
        timestamp_ns,
        voltage_v: quantize(v_true + profile.offset_v + noise, profile.pulse_step_v),
        power_w: None,
        current_a: None,
    }
}

pub fn sample_reference(
    profile: &ReferenceMeterProfile,
    v_true: f64,
    timestamp_ns: i64,
) -> Measurement {
    let noise = gaussian(profile.rng_seed, timestamp_ns, profile.noise_sigma_v);
    Measurement {
        device_id: profile.device_id.clone(),
        timestamp_ns,
        voltage_v: v_true + noise,
        power_w: None,
        current_a: None,
    }
}

/// Piecewise-constant bus loads over scenario time (seconds from start).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadTimeline {
    steps: Vec<(f64, LoadSet)>,
}

impl LoadTimeline {
    pub fn constant(loads: LoadSet) -> Self {
        Self {
            steps: vec![(0.0, loads)],
        }
    }

    /// Steps must have strictly increasing start times.
    pub fn from_steps(steps: Vec<(f64, LoadSet)>) -> Result<Self, ScenarioError> {
        if steps.windows(2).any(|w| !(w[0].0 < w[1].0)) {
            return Err(ScenarioError::Timeline(
                "step times must be strictly increasing".into(),
            ));
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> &[(f64, LoadSet)] {
        &self.steps
    }

    /// Index of the step active at `t_s`; `None` before the first step.
    pub fn step_index(&self, t_s: f64) -> Option<usize> {
        self.steps.partition_point(|(t, _)| *t <= t_s).checked_sub(1)
    }

    pub fn at(&self, t_s: f64) -> Option<&LoadSet> {
        self.step_index(t_s).map(|i| &self.steps[i].1)
    }

    /// Reads `t_s,bus,load_w` rows. Each row changes one bus from `t_s` on;
    /// other buses keep their previous load.
    pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Self, ScenarioError> {
        #[derive(Deserialize)]
        struct Row {
            t_s: f64,
            bus: String,
            load_w: f64,
        }
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut steps: Vec<(f64, LoadSet)> = Vec::new();
        for row in rdr.deserialize() {
            let row: Row = row?;
            match steps.last_mut() {
                Some((t, loads)) if *t == row.t_s => loads.set(row.bus, row.load_w),
                Some((t, _)) if *t > row.t_s => {
                    return Err(ScenarioError::Timeline(format!(
                        "row at t_s={} is earlier than t_s={}",
                        row.t_s, t
                    )))
                }
                last => {
                    let mut loads = last.map(|(_, l)| l.clone()).unwrap_or_default();
                    loads.set(row.bus, row.load_w);
                    steps.push((row.t_s, loads));
                }
            }
        }
        Self::from_steps(steps)
    }

    pub fn load_csv(path: &Path) -> Result<Self, ScenarioError> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// Seeded household-style load fluctuations on every load bus.
///
/// Each bus draws `base_w` scaled by a daily cosine profile, plus an independent
/// uniform jitter that is redrawn every `step_s` seconds. On top of that every
/// bus owns one switched appliance of `switch_w` that turns on and off with
/// the given per-step probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticLoad {
    pub base_w: f64,
    /// Relative amplitude of the daily profile, peak at 19:00.
    pub daily_amplitude: f64,
    /// Half-width of the per-bus uniform jitter.
    pub jitter_w: f64,
    pub step_s: f64,
    pub switch_w: f64,
    pub switch_on_prob: f64,
    pub switch_off_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticLoad {
    fn default() -> Self {
        Self {
            base_w: 400.0,
            daily_amplitude: 0.5,
            jitter_w: 150.0,
            step_s: 30.0,
            switch_w: 2_000.0,
            switch_on_prob: 0.001,
            switch_off_prob: 0.03,
            seed: 7,
        }
    }
}

impl SyntheticLoad {
    pub fn timeline(&self, grid: &GridModel, duration_s: f64) -> Result<LoadTimeline, ScenarioError> {
        if !(self.step_s > 0.0) {
            return Err(ScenarioError::Timeline("step_s must be positive".into()));
        }
        let buses: Vec<&str> = grid.load_bus_ids().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let jitter = Uniform::new_inclusive(-self.jitter_w.abs(), self.jitter_w.abs())
            .map_err(|e| ScenarioError::Timeline(e.to_string()))?;
        for p in [self.switch_on_prob, self.switch_off_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(ScenarioError::Timeline(format!(
                    "switch probabilities must be in [0, 1], got {p}"
                )));
            }
        }
        let mut on = vec![false; buses.len()];
        let mut steps = Vec::new();
        let mut t = 0.0;
        while t < duration_s {
            let day_phase = 2.0 * std::f64::consts::PI * ((t / 3600.0 - 19.0) / 24.0);
            let level = self.base_w * (1.0 + self.daily_amplitude * day_phase.cos());
            let loads = buses
                .iter()
                .zip(on.iter_mut())
                .map(|(b, on)| {
                    let flip = if *on { self.switch_off_prob } else { self.switch_on_prob };
                    if rng.random_bool(flip) {
                        *on = !*on;
                    }
                    let switched = if *on { self.switch_w } else { 0.0 };
                    (b.to_string(), (level + jitter.sample(&mut rng) + switched).max(0.0))
                })
                .collect();
            steps.push((t, loads));
            t += self.step_s;
        }
        LoadTimeline::from_steps(steps)
    }
}

fn check_cadence(device: &str, cadence_s: f64, phase_s: f64) -> Result<(), ScenarioError> {
    if !(cadence_s > 0.0) {
        return Err(ScenarioError::Profile {
            device: device.into(),
            message: format!("cadence_s must be positive, got {cadence_s}"),
        });
    }
    if !(0.0..cadence_s).contains(&phase_s) {
        return Err(ScenarioError::Profile {
            device: device.into(),
            message: format!("phase_s must be in [0, cadence_s), got {phase_s}"),
        });
    }
    Ok(())
}

fn ticks(cadence_s: f64, phase_s: f64, duration_s: f64) -> impl Iterator<Item = f64> {
    (0u64..)
        .map(move |k| phase_s + k as f64 * cadence_s)
        .take_while(move |&t| t < duration_s)
}

pub fn offset_to_ns(start_ns: i64, t_s: f64) -> i64 {
    start_ns + (t_s * NANOS_PER_SEC as f64).round() as i64
}

/// Device placements for a scenario run.
#[derive(Debug, Clone, Default)]
pub struct Placements {
    pub plugs: Vec<(String, PlugProfile)>,
    pub references: Vec<(String, ReferenceMeterProfile)>,
}

/// Simulates every device over `[0, duration_s)` and returns the readings in
/// timestamp order (ties broken by device id).
pub fn run_scenario(
    grid: &GridModel,
    timeline: &LoadTimeline,
    placements: &Placements,
    duration_s: f64,
    start_ns: i64,
) -> Result<Vec<Measurement>, ScenarioError> {
    let solver = RadialSolver::new(grid)?;
    let mut seen = std::collections::HashSet::new();
    let mut device_bus = Vec::new();
    for (bus, p) in &placements.plugs {
        check_cadence(&p.device_id, p.cadence_s, p.phase_s)?;
        if !(p.pulse_step_v > 0.0) {
            return Err(ScenarioError::Profile {
                device: p.device_id.clone(),
                message: "pulse_step_v must be positive".into(),
            });
        }
        device_bus.push((p.device_id.as_str(), bus.as_str()));
    }
    for (bus, r) in &placements.references {
        check_cadence(&r.device_id, r.cadence_s, r.phase_s)?;
        if !(r.averaging_s >= 0.0 && r.averaging_s.is_finite()) {
            return Err(ScenarioError::Profile {
                device: r.device_id.clone(),
                message: format!("averaging_s must be finite and non-negative, got {}", r.averaging_s),
            });
        }
        device_bus.push((r.device_id.as_str(), bus.as_str()));
    }
    for (device, bus) in device_bus {
        if !seen.insert(device) {
            return Err(ScenarioError::DuplicateDevice(device.into()));
        }
        if !grid.contains(bus) {
            return Err(ScenarioError::UnknownBus {
                device: device.into(),
                bus: bus.into(),
            });
        }
    }

    let empty = LoadSet::new();
    let opts = SolverOptions::default();
    let mut cache: HashMap<Option<usize>, VoltageSolution> = HashMap::new();
    let mut voltage_at = |t_s: f64, bus: &str| -> Result<f64, ScenarioError> {
        let step = timeline.step_index(t_s);
        if !cache.contains_key(&step) {
            let loads = step.map(|i| &timeline.steps[i].1).unwrap_or(&empty);
            let sol = solver
                .solve(loads, &opts)
                .map_err(|source| ScenarioError::Solve {
                    timestamp_ns: offset_to_ns(start_ns, t_s),
                    source,
                })?;
            cache.insert(step, sol);
        }
        Ok(cache[&step]
            .voltage(bus)
            .expect("placement buses were checked"))
    };

    let mut out = Vec::new();
    for (bus, p) in &placements.plugs {
        for t in ticks(p.cadence_s, p.phase_s, duration_s) {
            let v = voltage_at(t, bus)?;
            out.push(sample_plug(p, v, offset_to_ns(start_ns, t)));
        }
    }
    for (bus, r) in &placements.references {
        for t in ticks(r.cadence_s, r.phase_s, duration_s) {
            let lo = (t - r.averaging_s).max(0.0);
            let v = if lo < t {
                // Piecewise-constant voltage between load steps.
                let mut edges = vec![lo];
                let first = timeline.steps.partition_point(|s| s.0 <= lo);
                edges.extend(timeline.steps[first..].iter().map(|s| s.0).take_while(|&s| s < t));
                edges.push(t);
                let mut acc = 0.0;
                for w in edges.windows(2) {
                    acc += voltage_at(w[0], bus)? * (w[1] - w[0]);
                }
                acc / (t - lo)
            } else {
                voltage_at(t, bus)?
            };
            out.push(sample_reference(r, v, offset_to_ns(start_ns, t)));
        }
    }
    out.sort_by(|a, b| {
        a.timestamp_ns
            .cmp(&b.timestamp_ns)
            .then_with(|| a.device_id.cmp(&b.device_id))
    });
    Ok(out)
}

/// Writes `timestamp,device,voltage` rows.
pub fn write_measurements_csv<W: std::io::Write>(
    w: W,
    measurements: &[Measurement],
) -> Result<(), ScenarioError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["timestamp", "device", "voltage"])?;
    for m in measurements {
        wtr.write_record([
            m.timestamp_ns.to_string(),
            m.device_id.clone(),
            m.voltage_v.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_measurements_csv<R: std::io::Read>(r: R) -> Result<Vec<Measurement>, ScenarioError> {
    #[derive(Deserialize)]
    struct Row {
        timestamp: i64,
        device: String,
        voltage: f64,
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    rdr.deserialize()
        .map(|row| {
            let row: Row = row?;
            Ok(Measurement {
                device_id: row.device,
                timestamp_ns: row.timestamp,
                voltage_v: row.voltage,
                power_w: None,
                current_a: None,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlugPlacement {
    pub bus: String,
    #[serde(default)]
    pub phase: Option<String>,
    #[serde(default)]
    pub location: Option<String>,
    #[serde(default)]
    pub vendor: Option<String>,
    #[serde(flatten)]
    pub profile: PlugProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferencePlacement {
    pub bus: String,
    #[serde(default)]
    pub phase: Option<String>,
    #[serde(default)]
    pub location: Option<String>,
    #[serde(default)]
    pub vendor: Option<String>,
    #[serde(flatten)]
    pub profile: ReferenceMeterProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoadSource {
    /// Piecewise-constant `t_s,bus,load_w` file, relative to the config file.
    Csv(PathBuf),
    Synthetic(SyntheticLoad),
}

/// A scenario file (TOML).
///
/// ```toml
/// seed = 42
/// duration_s = 3600
/// start = "2023-01-01T00:00:00"
/// [grid]
/// spacing_m = 40.0
/// [loads.synthetic]
/// base_w = 400.0
/// [[plug]]
/// bus = "741"
/// device_id = "plug741"
/// offset_v = 3.65
/// [[reference]]
/// bus = "741"
/// device_id = "ref741"
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub duration_s: f64,
    /// Scenario start, ISO-8601 in UTC.
    pub start: String,
    #[serde(default)]
    pub grid: GridConfig,
    pub loads: LoadSource,
    #[serde(default, rename = "plug")]
    pub plugs: Vec<PlugPlacement>,
    #[serde(default, rename = "reference")]
    pub references: Vec<ReferencePlacement>,
}

impl ScenarioConfig {
    /// Built-in scenario: three weeks on the reference feeder, a biased plug and a
    /// reference meter at the far end (741) and a second plug near the
    /// transformer (703).
    pub fn default_scenario() -> Self {
        Self {
            seed: 42,
            duration_s: 21.0 * 86_400.0,
            start: "2023-01-01T00:00:00".into(),
            grid: GridConfig::default(),
            loads: LoadSource::Synthetic(SyntheticLoad::default()),
            plugs: vec![
                PlugPlacement {
                    bus: "741".into(),
                    phase: Some("L1".into()),
                    location: Some("house-741".into()),
                    vendor: Some("Nous A1T".into()),
                    profile: PlugProfile {
                        device_id: "plug741".into(),
                        offset_v: 3.65,
                        phase_s: 4.0,
                        ..PlugProfile::default()
                    },
                },
                PlugPlacement {
                    bus: "703".into(),
                    phase: Some("L1".into()),
                    location: Some("house-703".into()),
                    vendor: Some("Nous A1T".into()),
                    profile: PlugProfile {
                        device_id: "plug703".into(),
                        offset_v: -1.2,
                        phase_s: 7.0,
                        ..PlugProfile::default()
                    },
                },
            ],
            references: vec![ReferencePlacement {
                bus: "741".into(),
                phase: Some("L1".into()),
                location: Some("house-741".into()),
                vendor: Some("Janitza UMG 604EP-PRO".into()),
                profile: ReferenceMeterProfile {
                    device_id: "ref741".into(),
                    averaging_s: 60.0,
                    ..ReferenceMeterProfile::default()
                },
            }],
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self, ScenarioError> {
        toml::from_str(s).map_err(|e| ScenarioError::Config {
            path: "<inline>".into(),
            message: e.to_string(),
        })
    }

    /// Loads a scenario file; a relative load CSV path is resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| ScenarioError::Config {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        if let LoadSource::Csv(p) = &mut cfg.loads {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn start_ns(&self) -> Result<i64, ScenarioError> {
        crate::telemetry::parse_time(&self.start)
            .map_err(|e| ScenarioError::Config {
                path: "<scenario>".into(),
                message: e.to_string(),
            })
    }

    /// Device seeds default to a mix of the scenario seed and the device slot.
    pub fn placements(&self) -> Placements {
        let seed_for = |slot: u64, own: u64| {
            if own != 0 {
                own
            } else {
                self.seed.wrapping_mul(1_000_003).wrapping_add(slot + 1)
            }
        };
        Placements {
            plugs: self
                .plugs
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let mut profile = p.profile.clone();
                    profile.rng_seed = seed_for(i as u64, profile.rng_seed);
                    (p.bus.clone(), profile)
                })
                .collect(),
            references: self
                .references
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let mut profile = r.profile.clone();
                    profile.rng_seed = seed_for(1000 + i as u64, profile.rng_seed);
                    (r.bus.clone(), profile)
                })
                .collect(),
        }
    }

    pub fn timeline(&self, grid: &GridModel) -> Result<LoadTimeline, ScenarioError> {
        match &self.loads {
            LoadSource::Csv(p) => LoadTimeline::load_csv(p),
            LoadSource::Synthetic(s) => s.timeline(grid, self.duration_s),
        }
    }

    /// Builds the grid and runs the whole scenario.
    pub fn run(&self) -> Result<(GridModel, Vec<Measurement>), ScenarioError> {
        let grid = self.grid.build()?;
        let timeline = self.timeline(&grid)?;
        let out = run_scenario(
            &grid,
            &timeline,
            &self.placements(),
            self.duration_s,
            self.start_ns()?,
        )?;
        Ok((grid, out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::reference_grid;

    #[test]
    fn quantize_hand_examples() {
        assert_eq!(quantize(230.0, 0.28), 229.9);
        assert_eq!(quantize(233.65, 0.28), 233.5);
        // 0.25 * 920 = 230.0 exactly.
        assert_eq!(quantize(230.0, 0.25), 230.0);
        assert_eq!(quantize(230.5, 0.5), 230.5);
    }

    #[test]
    fn quantizer_gaps_are_two_or_three_tenths() {
        let mut outputs: Vec<i64> = (0..=10_000)
            .map(|i| 225.0 + i as f64 * 0.001)
            .map(|v| (quantize(v, 0.28) * 10.0).round() as i64)
            .collect();
        outputs.sort_unstable();
        outputs.dedup();
        assert!(outputs.len() > 30);
        for w in outputs.windows(2) {
            let gap = w[1] - w[0];
            assert!(gap == 2 || gap == 3, "gap {gap} between {:?}", w);
        }
    }

    #[test]
    fn sample_plug_examples() {
        let exact = PlugProfile {
            noise_sigma_v: 0.0,
            pulse_step_v: 0.25,
            ..PlugProfile::default()
        };
        assert_eq!(sample_plug(&exact, 230.0, 0).voltage_v, 230.0);

        let biased = PlugProfile {
            noise_sigma_v: 0.0,
            offset_v: 3.65,
            ..PlugProfile::default()
        };
        assert_eq!(sample_plug(&biased, 230.0, 0).voltage_v, 233.5);

        let noisy = PlugProfile::default();
        let a = sample_plug(&noisy, 230.0, 123 * NANOS_PER_SEC);
        let b = sample_plug(&noisy, 230.0, 123 * NANOS_PER_SEC);
        assert_eq!(a, b);
    }

    fn one_plug(bus: &str, profile: PlugProfile) -> Placements {
        Placements {
            plugs: vec![(bus.into(), profile)],
            references: vec![(
                bus.into(),
                ReferenceMeterProfile {
                    device_id: "ref".into(),
                    ..Default::default()
                },
            )],
        }
    }

    #[test]
    fn hour_gives_360_plug_and_60_reference_readings() {
        let g = reference_grid();
        let p = one_plug(
            "741",
            PlugProfile {
                phase_s: 3.0,
                ..PlugProfile::default()
            },
        );
        let out = run_scenario(
            &g,
            &LoadTimeline::constant(LoadSet::uniform(&g, 300.0)),
            &p,
            3600.0,
            0,
        )
        .unwrap();
        assert_eq!(out.iter().filter(|m| m.device_id == "plug").count(), 360);
        assert_eq!(out.iter().filter(|m| m.device_id == "ref").count(), 60);
        assert!(out.windows(2).all(|w| w[0].timestamp_ns <= w[1].timestamp_ns));
    }

    #[test]
    fn zero_load_noise_free_plug_reads_quantized_slack() {
        let g = reference_grid();
        let p = one_plug(
            "741",
            PlugProfile {
                noise_sigma_v: 0.0,
                ..PlugProfile::default()
            },
        );
        let out = run_scenario(&g, &LoadTimeline::default(), &p, 600.0, 0).unwrap();
        for m in &out {
            let expect = if m.device_id == "plug" {
                quantize(230.0, 0.28)
            } else {
                230.0
            };
            assert_eq!(m.voltage_v, expect);
        }
    }

    #[test]
    fn step_load_gives_one_downward_shift() {
        let g = reference_grid();
        let timeline = LoadTimeline::from_steps(vec![
            (0.0, LoadSet::new()),
            (1800.0, LoadSet::single("741", 10_000.0)),
        ])
        .unwrap();
        let p = one_plug(
            "741",
            PlugProfile {
                noise_sigma_v: 0.0,
                ..PlugProfile::default()
            },
        );
        let out = run_scenario(&g, &timeline, &p, 3600.0, 0).unwrap();
        let series: Vec<f64> = out
            .iter()
            .filter(|m| m.device_id == "plug")
            .map(|m| m.voltage_v)
            .collect();
        let changes: Vec<usize> = (1..series.len())
            .filter(|&i| series[i] != series[i - 1])
            .collect();
        assert_eq!(changes, vec![180]);
        assert!(series[180] < series[179]);
    }

    #[test]
    fn averaging_reference_weights_load_steps_by_duration() {
        let g = reference_grid();
        let timeline = LoadTimeline::from_steps(vec![
            (0.0, LoadSet::new()),
            (1815.0, LoadSet::single("741", 10_000.0)),
        ])
        .unwrap();
        let loaded = RadialSolver::new(&g)
            .unwrap()
            .solve(&LoadSet::single("741", 10_000.0), &SolverOptions::default())
            .unwrap()
            .voltage("741")
            .unwrap();
        let p = Placements {
            plugs: Vec::new(),
            references: vec![(
                "741".into(),
                ReferenceMeterProfile {
                    averaging_s: 60.0,
                    ..ReferenceMeterProfile::default()
                },
            )],
        };
        let out = run_scenario(&g, &timeline, &p, 1980.0, 0).unwrap();
        let at = |t: i64| out.iter().find(|m| m.timestamp_ns == t * NANOS_PER_SEC).unwrap().voltage_v;
        assert_eq!(at(1800), 230.0);
        // (1800, 1860]: 15 s unloaded, 45 s loaded.
        assert!((at(1860) - (0.25 * 230.0 + 0.75 * loaded)).abs() < 1e-9);
        assert!((at(1860 + 60) - loaded).abs() < 1e-9);
        // The first tick has an empty window and reads instantaneously.
        assert_eq!(at(0), 230.0);
        let bad = Placements {
            plugs: Vec::new(),
            references: vec![(
                "741".into(),
                ReferenceMeterProfile {
                    averaging_s: -1.0,
                    ..ReferenceMeterProfile::default()
                },
            )],
        };
        assert!(matches!(
            run_scenario(&g, &timeline, &bad, 60.0, 0),
            Err(ScenarioError::Profile { .. })
        ));
    }

    #[test]
    fn infeasible_instant_is_reported_with_timestamp() {
        let g = reference_grid();
        let timeline = LoadTimeline::from_steps(vec![
            (0.0, LoadSet::new()),
            (60.0, LoadSet::uniform(&g, 200_000.0)),
        ])
        .unwrap();
        let p = one_plug("741", PlugProfile::default());
        let err = run_scenario(&g, &timeline, &p, 120.0, 5 * NANOS_PER_SEC).unwrap_err();
        match err {
            ScenarioError::Solve { timestamp_ns, .. } => {
                assert_eq!(timestamp_ns, 65 * NANOS_PER_SEC)
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unknown_bus_and_bad_profiles_rejected() {
        let g = reference_grid();
        let err = run_scenario(
            &g,
            &LoadTimeline::default(),
            &one_plug("999", PlugProfile::default()),
            60.0,
            0,
        )
        .unwrap_err();
        assert!(matches!(err, ScenarioError::UnknownBus { .. }));
        let err = run_scenario(
            &g,
            &LoadTimeline::default(),
            &one_plug(
                "741",
                PlugProfile {
                    cadence_s: 0.0,
                    ..PlugProfile::default()
                },
            ),
            60.0,
            0,
        )
        .unwrap_err();
        assert!(matches!(err, ScenarioError::Profile { .. }));
    }

    #[test]
    fn timeline_csv_carries_previous_loads() {
        let csv = "t_s,bus,load_w\n0,741,100\n0,703,50\n60,741,200\n";
        let tl = LoadTimeline::read_csv(csv.as_bytes()).unwrap();
        assert_eq!(tl.steps().len(), 2);
        let at = tl.at(90.0).unwrap();
        assert_eq!(at.get("741"), 200.0);
        assert_eq!(at.get("703"), 50.0);
        assert!(LoadTimeline::read_csv("t_s,bus,load_w\n60,1,1\n0,1,1\n".as_bytes()).is_err());
    }

    #[test]
    fn scenario_config_parses() {
        let text = r#"
seed = 1
duration_s = 600
start = "2023-01-01T00:00:00"
[loads.synthetic]
base_w = 300.0
[[plug]]
bus = "741"
device_id = "p1"
offset_v = 3.65
[[reference]]
bus = "741"
device_id = "r1"
"#;
        let cfg = ScenarioConfig::from_toml_str(text).unwrap();
        let (_, out) = cfg.run().unwrap();
        assert_eq!(out.iter().filter(|m| m.device_id == "p1").count(), 60);
        assert_eq!(out.iter().filter(|m| m.device_id == "r1").count(), 10);
        let again = cfg.run().unwrap().1;
        assert_eq!(out, again);
    }
}
