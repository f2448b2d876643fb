//! `plugsense` command-line entry point.

mod report;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

use plugsense_core::analysis::{self, BandSpec};
use plugsense_core::calib::{CalibError, Method, Series};
use plugsense_core::estimator::{self, EstimateError, FitConfig, FitMode};
use plugsense_core::netmodel::{self, GridConfig, GridError, GridModel};
use plugsense_core::plugsim::{self, Measurement, ScenarioConfig, ScenarioError};
use plugsense_core::powerflow::{LoadSet, PowerFlowError, RadialSolver, SolverOptions};
use plugsense_core::telemetry::{
    self, service::ServiceError, DeviceRegistry, Durability, MessageError, Publisher,
    RegistryError, ServiceConfig, StoreError, TagFilter, TimeSeriesStore,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    PowerFlow(#[from] PowerFlowError),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Calib(#[from] CalibError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Message(#[from] MessageError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Grid(_) => "grid",
            CliError::PowerFlow(_) => "powerflow",
            CliError::Estimate(_) => "estimate",
            CliError::Scenario(_) => "scenario",
            CliError::Calib(_) => "calib",
            CliError::Store(_) => "store",
            CliError::Service(_) => "service",
            CliError::Registry(_) => "registry",
            CliError::Message(_) => "message",
            CliError::Csv(_) => "csv",
            CliError::File { .. } | CliError::Io(_) => "io",
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "plugsense", version, about = "Smart-plug voltage telemetry and feeder state estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Inspect or check the feeder model.
    Grid {
        #[command(subcommand)]
        action: GridAction,
    },
    /// Run a scenario and write the measurement stream.
    Simulate {
        /// Scenario TOML file, or `default`.
        #[arg(long, default_value = "default")]
        scenario: String,
        /// Override the scenario duration in seconds.
        #[arg(long)]
        duration: Option<f64>,
        /// Output CSV (`-` for stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also publish every measurement to a running ingestion service.
        #[arg(long)]
        publish: Option<String>,
        /// Write a device registry for the scenario's devices.
        #[arg(long)]
        registry_out: Option<PathBuf>,
    },
    /// Run the ingestion service until killed.
    Serve {
        #[arg(long, default_value = "127.0.0.1:1883")]
        bind: String,
        /// Device registry TOML.
        #[arg(long)]
        registry: Option<PathBuf>,
        #[arg(long, env = "PLUGSENSE_STORE")]
        store: PathBuf,
        #[arg(long, value_enum, default_value_t = DurabilityArg::Sync)]
        durability: DurabilityArg,
    },
    /// Read points back from a store.
    Query {
        #[arg(long, env = "PLUGSENSE_STORE")]
        store: PathBuf,
        #[arg(long)]
        device: Option<String>,
        #[arg(long)]
        phase: Option<String>,
        #[arg(long)]
        location: Option<String>,
        #[arg(long)]
        vendor: Option<String>,
        /// Inclusive start, ISO-8601 or Unix nanoseconds.
        #[arg(long)]
        from: Option<String>,
        /// Exclusive end, ISO-8601 or Unix nanoseconds.
        #[arg(long)]
        to: Option<String>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// Compare a plug against a reference meter.
    Calibrate {
        /// Plug CSV: `timestamp,volts` or `timestamp,device,voltage`.
        #[arg(long)]
        plug: PathBuf,
        /// Reference CSV, same formats.
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        plug_device: Option<String>,
        #[arg(long)]
        ref_device: Option<String>,
        #[arg(long, default_value = "interp10s")]
        method: String,
        #[arg(long, default_value_t = 0.1)]
        bin_width: f64,
        /// Directory for diff, histogram and accuracy CSVs.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Fit loads to a single voltage reading.
    Estimate {
        #[arg(long, default_value = "uniform")]
        mode: String,
        #[arg(long)]
        node: String,
        #[arg(long)]
        voltage: f64,
        /// Grid TOML; the reference feeder if omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0.01)]
        tol: f64,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Error propagation and voltage band checks.
    Analyze {
        #[command(subcommand)]
        action: AnalyzeAction,
    },
    /// Full pipeline: simulate, calibrate, propagate; writes a CSV directory.
    Report {
        #[arg(long, default_value = "default")]
        scenario: String,
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum GridAction {
    /// Print the line list.
    Show {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Check the feeder invariants.
    Validate {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
enum AnalyzeAction {
    /// Equivalent loads and per-bus voltage deltas for a reading error.
    Propagate {
        #[arg(long)]
        node: String,
        #[arg(long)]
        verr: f64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Solve a load set and list buses outside the voltage band.
    Band {
        /// `bus,load_w` CSV.
        #[arg(long)]
        loads: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        nominal: Option<f64>,
        #[arg(long, default_value_t = 0.9)]
        lo: f64,
        #[arg(long, default_value_t = 1.1)]
        hi: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum DurabilityArg {
    Flush,
    Sync,
}

fn open_out(path: &Path) -> Result<Box<dyn Write>> {
    if path == Path::new("-") {
        return Ok(Box::new(BufWriter::new(io::stdout().lock())));
    }
    let f = File::create(path).map_err(|source| CliError::File {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(Box::new(BufWriter::new(f)))
}

fn open_in(path: &Path) -> Result<File> {
    File::open(path).map_err(|source| CliError::File {
        path: path.to_path_buf(),
        source,
    })
}

fn load_grid(config: Option<&Path>) -> Result<GridModel> {
    let cfg = match config {
        Some(p) => GridConfig::load(p)?,
        None => GridConfig::default(),
    };
    Ok(cfg.build()?)
}

fn load_scenario(name: &str, duration: Option<f64>) -> Result<ScenarioConfig> {
    let mut cfg = if name == "default" {
        ScenarioConfig::default_scenario()
    } else {
        ScenarioConfig::load(Path::new(name))?
    };
    if let Some(d) = duration {
        if !(d > 0.0) {
            return Err(CliError::Usage(format!("--duration must be positive, got {d}")));
        }
        cfg.duration_s = d;
    }
    Ok(cfg)
}

fn parse_bound(s: &str) -> Result<i64> {
    match s.parse::<i64>() {
        Ok(ns) => Ok(ns),
        Err(_) => Ok(telemetry::parse_time(s)?),
    }
}

fn cmd_grid(action: GridAction) -> Result<()> {
    let mut out = io::stdout().lock();
    match action {
        GridAction::Show { config } => {
            let grid = load_grid(config.as_deref())?;
            writeln!(out, "from_bus,to_bus,length_m,r_ohm,x_ohm,max_i_a")?;
            for l in &grid.lines {
                let z = l.impedance();
                writeln!(
                    out,
                    "{},{},{},{:.6},{:.6},{}",
                    l.from_bus, l.to_bus, l.length_m, z.re, z.im, l.params.max_i_a
                )?;
            }
        }
        GridAction::Validate { config } => {
            let grid = load_grid(config.as_deref())?;
            let violations = netmodel::validate(&grid);
            if !violations.is_empty() {
                return Err(GridError::Invalid(violations).into());
            }
            writeln!(
                out,
                "ok: {} buses, {} lines, slack {} at {} V",
                grid.buses.len(),
                grid.lines.len(),
                grid.slack_id().unwrap_or("?"),
                grid.slack_voltage_v
            )?;
        }
    }
    Ok(())
}

fn cmd_simulate(
    scenario: &str,
    duration: Option<f64>,
    out: Option<&Path>,
    publish: Option<&str>,
    registry_out: Option<&Path>,
) -> Result<()> {
    let cfg = load_scenario(scenario, duration)?;
    let (_, measurements) = cfg.run()?;
    if let Some(path) = registry_out {
        let mut w = open_out(path)?;
        w.write_all(DeviceRegistry::from_scenario(&cfg).to_toml_string().as_bytes())?;
        w.flush()?;
    }
    if let Some(addr) = publish {
        let mut publisher = Publisher::connect(addr)?;
        for m in &measurements {
            publisher.publish(&telemetry::encode_sensor_message(m))?;
        }
        let stats = publisher.stats()?;
        log::info!(
            "published {} messages; service accepted {}, rejected {}",
            measurements.len(),
            stats.accepted,
            stats.rejected
        );
    }
    if let Some(path) = out {
        let mut w = open_out(path)?;
        plugsim::write_measurements_csv(&mut w, &measurements)?;
        w.flush()?;
    }
    let mut per_device = std::collections::BTreeMap::<&str, usize>::new();
    for m in &measurements {
        *per_device.entry(&m.device_id).or_default() += 1;
    }
    for (d, n) in per_device {
        log::info!("{d}: {n} readings");
    }
    Ok(())
}

fn cmd_serve(bind: &str, registry: Option<&Path>, store: &Path, durability: DurabilityArg) -> Result<()> {
    let registry = match registry {
        Some(p) => DeviceRegistry::load(p)?,
        None => DeviceRegistry::default(),
    };
    let durability = match durability {
        DurabilityArg::Flush => Durability::Flush,
        DurabilityArg::Sync => Durability::Sync,
    };
    let store = Arc::new(TimeSeriesStore::open(store, durability)?);
    let handle = telemetry::serve(bind, registry, store, ServiceConfig::default())?;
    let mut out = io::stdout().lock();
    writeln!(out, "listening on {}", handle.local_addr())?;
    out.flush()?;
    drop(out);
    handle.join();
    Ok(())
}

fn cmd_query(
    store: &Path,
    filter: TagFilter,
    from: Option<&str>,
    to: Option<&str>,
    format: Format,
) -> Result<()> {
    let store = TimeSeriesStore::open_read_only(store)?;
    let start = from.map(parse_bound).transpose()?.unwrap_or(i64::MIN);
    let end = to.map(parse_bound).transpose()?.unwrap_or(i64::MAX);
    let points = store.query(&filter, start, end)?;
    let mut out = BufWriter::new(io::stdout().lock());
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(&mut out);
            w.write_record(["timestamp", "device", "phase", "location", "vendor", "voltage"])?;
            for p in &points {
                w.write_record([
                    p.timestamp_ns.to_string(),
                    p.tags.device.clone(),
                    p.tags.phase.clone(),
                    p.tags.location.clone(),
                    p.tags.vendor.clone(),
                    p.value.to_string(),
                ])?;
            }
            w.flush()?;
        }
        Format::Json => {
            for p in &points {
                serde_json::to_writer(&mut out, p).map_err(io::Error::from)?;
                writeln!(out)?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads either a `timestamp,volts` series or a measurement CSV filtered to one device.
fn read_series(path: &Path, device: Option<&str>) -> Result<Series> {
    let mut rdr = csv::Reader::from_reader(open_in(path)?);
    let is_series = rdr.headers()?.iter().any(|h| h.trim() == "volts");
    if is_series {
        return Ok(Series::read_csv(open_in(path)?)?);
    }
    let ms: Vec<Measurement> = plugsim::read_measurements_csv(open_in(path)?)?;
    let device = match device {
        Some(d) => d.to_string(),
        None => {
            let ids: std::collections::BTreeSet<&str> =
                ms.iter().map(|m| m.device_id.as_str()).collect();
            match ids.len() {
                1 => ids.into_iter().next().unwrap().to_string(),
                n => {
                    return Err(CliError::Usage(format!(
                        "{} holds {n} devices; pick one with --plug-device/--ref-device",
                        path.display()
                    )))
                }
            }
        }
    };
    Ok(report::series_of(&ms, &device))
}

#[allow(clippy::too_many_arguments)]
fn cmd_calibrate(
    plug: &Path,
    reference: &Path,
    plug_device: Option<&str>,
    ref_device: Option<&str>,
    method: &str,
    bin_width: f64,
    report_dir: Option<&Path>,
) -> Result<()> {
    let method: Method = method.parse()?;
    let plug = read_series(plug, plug_device)?;
    let reference = read_series(reference, ref_device)?;
    let cal = report::Calibration::run(&plug, &reference, method, bin_width)?;
    let mut out = io::stdout().lock();
    cal.write_summary(&mut out)?;
    if let Some(dir) = report_dir {
        std::fs::create_dir_all(dir)?;
        cal.write_dir(dir, "")?;
    }
    Ok(())
}

fn cmd_estimate(
    mode: &str,
    node: &str,
    voltage: f64,
    config: Option<&Path>,
    tol: f64,
    format: Format,
) -> Result<()> {
    let mode: FitMode = mode.parse().map_err(CliError::Usage)?;
    let grid = load_grid(config)?;
    let cfg = FitConfig {
        tol_v: tol,
        ..FitConfig::default()
    };
    let r = estimator::fit(mode, &grid, voltage, node, &cfg)?;
    let mut out = io::stdout().lock();
    match format {
        Format::Json => {
            serde_json::to_writer_pretty(&mut out, &r).map_err(io::Error::from)?;
            writeln!(out)?;
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(&mut out);
            w.write_record([
                "mode",
                "node",
                "measured_v",
                "fitted_load_w",
                "residual_v",
                "iterations",
                "converged",
                "above_slack",
            ])?;
            w.write_record([
                format!("{:?}", r.mode).to_lowercase(),
                r.bus.clone(),
                r.measured_v.to_string(),
                format!("{:.3}", r.fitted_load_w),
                format!("{:.6}", r.residual_v),
                r.outer_iterations.to_string(),
                r.converged.to_string(),
                r.above_slack.to_string(),
            ])?;
            w.flush()?;
        }
    }
    Ok(())
}

fn cmd_analyze(action: AnalyzeAction) -> Result<()> {
    match action {
        AnalyzeAction::Propagate {
            node,
            verr,
            out,
            config,
        } => {
            if !(verr >= 0.0) {
                return Err(CliError::Usage(format!("--verr must be non-negative, got {verr}")));
            }
            let grid = load_grid(config.as_deref())?;
            let rep = analysis::propagate(&grid, &node, verr, &FitConfig::default())?;
            let mut w = open_out(out.as_deref().unwrap_or(Path::new("-")))?;
            rep.write_csv(&mut w)?;
            w.flush()?;
        }
        AnalyzeAction::Band {
            loads,
            config,
            nominal,
            lo,
            hi,
        } => {
            let grid = load_grid(config.as_deref())?;
            let band = BandSpec {
                nominal_v: nominal.unwrap_or(grid.slack_voltage_v),
                lo_pu: lo,
                hi_pu: hi,
            };
            if !band.is_valid() {
                return Err(CliError::Usage(
                    "band needs nominal > 0 and 0 < lo < hi".into(),
                ));
            }
            let loads = LoadSet::read_csv(open_in(&loads)?)?;
            let sol = RadialSolver::new(&grid)?.solve(&loads, &SolverOptions::default())?;
            let violations = analysis::check_voltage_band(&sol, &band);
            let mut w = csv::Writer::from_writer(io::stdout().lock());
            w.write_record(["bus", "voltage_v", "pu", "side"])?;
            for v in &violations {
                w.write_record([
                    v.bus.clone(),
                    format!("{:.3}", v.pu * band.nominal_v),
                    format!("{:.4}", v.pu),
                    v.side.to_string(),
                ])?;
            }
            w.flush()?;
            log::info!("{} band violations", violations.len());
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Grid { action } => cmd_grid(action),
        Command::Simulate {
            scenario,
            duration,
            out,
            publish,
            registry_out,
        } => cmd_simulate(
            &scenario,
            duration,
            out.as_deref(),
            publish.as_deref(),
            registry_out.as_deref(),
        ),
        Command::Serve {
            bind,
            registry,
            store,
            durability,
        } => cmd_serve(&bind, registry.as_deref(), &store, durability),
        Command::Query {
            store,
            device,
            phase,
            location,
            vendor,
            from,
            to,
            format,
        } => cmd_query(
            &store,
            TagFilter {
                device,
                phase,
                location,
                vendor,
            },
            from.as_deref(),
            to.as_deref(),
            format,
        ),
        Command::Calibrate {
            plug,
            reference,
            plug_device,
            ref_device,
            method,
            bin_width,
            report,
        } => cmd_calibrate(
            &plug,
            &reference,
            plug_device.as_deref(),
            ref_device.as_deref(),
            &method,
            bin_width,
            report.as_deref(),
        ),
        Command::Estimate {
            mode,
            node,
            voltage,
            config,
            tol,
            format,
        } => cmd_estimate(&mode, &node, voltage, config.as_deref(), tol, format),
        Command::Analyze { action } => cmd_analyze(action),
        Command::Report {
            scenario,
            duration,
            out,
        } => {
            let cfg = load_scenario(&scenario, duration)?;
            report::run(&cfg, &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let line = serde_json::json!({ "error": { "kind": "usage", "message": e.to_string().trim_end() } });
            eprintln!("{line}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn time_bounds_accept_ns_and_iso() {
        assert_eq!(parse_bound("42").unwrap(), 42);
        assert_eq!(
            parse_bound("2023-01-01T00:00:00Z").unwrap(),
            1_672_531_200_000_000_000
        );
        assert!(parse_bound("yesterday").is_err());
    }

    #[test]
    fn error_kinds() {
        assert_eq!(CliError::Usage("x".into()).kind(), "usage");
        assert_eq!(CliError::Calib(CalibError::Empty).kind(), "calib");
    }
}
