//! Calibration summaries and the full `report` pipeline.

use std::io::Write;
use std::path::Path;

use plugsense_core::analysis::{self, PUBLISHED_EQUIVALENTS, PUBLISHED_V_ERR};
use plugsense_core::calib::{
    self, AccuracyRow, DiffSample, Method, NormalityResult, Series,
};
use plugsense_core::estimator::FitConfig;
use plugsense_core::plugsim::{Measurement, ScenarioConfig};

use crate::{CliError, Result};

pub fn series_of(ms: &[Measurement], device: &str) -> Series {
    ms.iter()
        .filter(|m| m.device_id == device)
        .map(|m| (m.timestamp_ns, m.voltage_v))
        .collect()
}

/// Reference-side value a diff was taken against.
fn reference_value(reference: &Series, method: Method, t: i64) -> Option<f64> {
    match method {
        Method::Mean15Min => calib::mean_15min(reference, t).ok(),
        _ => {
            let pts = reference.points();
            pts.binary_search_by_key(&t, |p| p.0).ok().map(|i| pts[i].1)
        }
    }
}

pub struct Calibration {
    pub method: Method,
    pub bin_width: f64,
    pub rows: Vec<AccuracyRow>,
    pub diffs: Vec<DiffSample>,
    pub offset_v: f64,
    /// Diffs after subtracting `offset_v` from the plug.
    pub corrected: Vec<DiffSample>,
    pub normality: Option<NormalityResult>,
    pub correlation: Option<f64>,
}

impl Calibration {
    pub fn run(plug: &Series, reference: &Series, method: Method, bin_width: f64) -> Result<Self> {
        let rows = calib::accuracy_table(plug, reference)?;
        let diffs = calib::paired_differences(plug, reference, method)?;
        let offset_v = calib::estimate_offset(&diffs)?;
        let corrected =
            calib::paired_differences(&calib::apply_offset(plug, offset_v), reference, method)?;
        let values = calib::diff_values(&diffs);
        let normality = calib::anderson_darling_normality(&values).ok();
        let (xs, ys): (Vec<f64>, Vec<f64>) = diffs
            .iter()
            .filter_map(|d| {
                reference_value(reference, method, d.timestamp_ns).map(|r| (r + d.diff_v, r))
            })
            .unzip();
        let correlation = calib::pearson(&xs, &ys);
        Ok(Self {
            method,
            bin_width,
            rows,
            diffs,
            offset_v,
            corrected,
            normality,
            correlation,
        })
    }

    pub fn mean_after_offset(&self) -> f64 {
        calib::estimate_offset(&self.corrected).unwrap_or(f64::NAN)
    }

    pub fn write_summary<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "method,pairs,offset_v,p95_v")?;
        for r in &self.rows {
            writeln!(w, "{},{},{:.4},{:.4}", r.method, r.pairs, r.offset_v, r.p95_v)?;
        }
        writeln!(w)?;
        writeln!(w, "offset ({}): {:.4} V", self.method, self.offset_v)?;
        writeln!(w, "mean diff after offset: {:.4} V", self.mean_after_offset())?;
        if let Some(n) = &self.normality {
            writeln!(
                w,
                "anderson-darling A2*: {:.4} ({})",
                n.a2_star,
                if n.reject_at_5pct { "not normal at 5%" } else { "normality not rejected" }
            )?;
        }
        if let Some(c) = self.correlation {
            writeln!(w, "plug/reference correlation: {c:.6}")?;
        }
        Ok(())
    }

    /// Writes `<prefix>diffs.csv`, `<prefix>histogram.csv`,
    /// `<prefix>histogram_offset.csv` and `<prefix>accuracy.csv` into `dir`.
    pub fn write_dir(&self, dir: &Path, prefix: &str) -> Result<()> {
        let mut w = csv::Writer::from_path(dir.join(format!("{prefix}diffs.csv")))?;
        w.write_record(["timestamp", "diff_v"])?;
        for d in &self.diffs {
            w.write_record([d.timestamp_ns.to_string(), format!("{:.6}", d.diff_v)])?;
        }
        w.flush()?;
        self.write_histograms(dir, prefix)?;
        let mut w = csv::Writer::from_path(dir.join(format!("{prefix}accuracy.csv")))?;
        w.write_record(["method", "pairs", "offset_v", "p95_v"])?;
        for r in &self.rows {
            w.write_record([
                r.method.name().to_string(),
                r.pairs.to_string(),
                format!("{:.4}", r.offset_v),
                format!("{:.4}", r.p95_v),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    fn write_histograms(&self, dir: &Path, prefix: &str) -> Result<()> {
        for (name, diffs) in [("histogram", &self.diffs), ("histogram_offset", &self.corrected)] {
            let h = calib::histogram(&calib::diff_values(diffs), self.bin_width)?;
            let f = std::fs::File::create(dir.join(format!("{prefix}{name}.csv")))?;
            h.write_csv(f)?;
        }
        Ok(())
    }
}

/// Runs the scenario and writes the calibration and propagation CSVs into `out`.
pub fn run(cfg: &ScenarioConfig, out: &Path) -> Result<()> {
    let (grid, measurements) = cfg.run()?;
    std::fs::create_dir_all(out)?;

    let mut pairs = Vec::new();
    for p in &cfg.plugs {
        if let Some(r) = cfg.references.iter().find(|r| r.bus == p.bus) {
            pairs.push((p, r));
        }
    }
    if pairs.is_empty() {
        return Err(CliError::Usage(
            "scenario has no plug sharing a bus with a reference meter".into(),
        ));
    }

    let mut accuracy = csv::Writer::from_path(out.join("accuracy.csv"))?;
    let mut header = vec!["device".to_string(), "vendor".to_string()];
    header.extend(Method::ALL.iter().map(|m| m.label().to_string()));
    accuracy.write_record(&header)?;
    let mut offsets = csv::Writer::from_path(out.join("offset.csv"))?;
    offsets.write_record([
        "device",
        "reference",
        "method",
        "pairs",
        "offset_v",
        "mean_after_offset_v",
        "correlation",
    ])?;
    let mut normality = csv::Writer::from_path(out.join("normality.csv"))?;
    normality.write_record(["device", "method", "n", "a2", "a2_star", "critical", "reject"])?;

    let stdout = std::io::stdout();
    let mut so = stdout.lock();
    for (p, r) in &pairs {
        let plug = series_of(&measurements, &p.profile.device_id);
        let reference = series_of(&measurements, &r.profile.device_id);
        let cal = Calibration::run(&plug, &reference, Method::Interp10s, 0.1)?;
        let device = &p.profile.device_id;

        let mut row = vec![device.clone(), p.vendor.clone().unwrap_or_default()];
        row.extend(cal.rows.iter().map(|r| format!("{:.2}", r.p95_v)));
        accuracy.write_record(&row)?;

        offsets.write_record([
            device.clone(),
            r.profile.device_id.clone(),
            cal.method.name().to_string(),
            cal.diffs.len().to_string(),
            format!("{:.4}", cal.offset_v),
            format!("{:.4}", cal.mean_after_offset()),
            cal.correlation.map(|c| format!("{c:.6}")).unwrap_or_default(),
        ])?;

        for m in Method::ALL {
            let d = calib::paired_differences(&plug, &reference, m)?;
            if let Ok(n) = calib::anderson_darling_normality(&calib::diff_values(&d)) {
                normality.write_record([
                    device.clone(),
                    m.name().to_string(),
                    d.len().to_string(),
                    format!("{:.4}", n.a2),
                    format!("{:.4}", n.a2_star),
                    format!("{:.3}", calib::AD_CRITICAL_5PCT),
                    n.reject_at_5pct.to_string(),
                ])?;
            }
        }
        cal.write_histograms(out, &format!("{device}_"))?;

        writeln!(so, "{device} vs {}", r.profile.device_id)?;
        cal.write_summary(&mut so)?;
        writeln!(so)?;
    }
    accuracy.flush()?;
    offsets.flush()?;
    normality.flush()?;

    let fit = FitConfig::default();
    let mut summary = csv::Writer::from_path(out.join("propagation_summary.csv"))?;
    summary.write_record([
        "node",
        "v_err_v",
        "equivalent_uniform_w",
        "equivalent_single_w",
        "published_uniform_w",
        "published_single_w",
    ])?;
    writeln!(so, "node,v_err_v,uniform_w,single_w,published_uniform_w,published_single_w")?;
    for (node, pub_uniform, pub_single) in PUBLISHED_EQUIVALENTS {
        let rep = analysis::propagate(&grid, node, PUBLISHED_V_ERR, &fit)?;
        rep.write_csv(std::fs::File::create(out.join(format!("propagation_{node}.csv")))?)?;
        let rec = [
            node.to_string(),
            format!("{PUBLISHED_V_ERR:.2}"),
            format!("{:.1}", rep.equivalent_uniform_w),
            format!("{:.1}", rep.equivalent_single_w),
            format!("{pub_uniform:.1}"),
            format!("{pub_single:.1}"),
        ];
        summary.write_record(&rec)?;
        writeln!(so, "{}", rec.join(","))?;
    }
    summary.flush()?;
    Ok(())
}
