//! Plug-versus-reference alignment, offset calibration and accuracy statistics.
//!
//! A plug reports every 10 s, the reference meter once a minute. For each
//! reference reading the plug series is reduced to one comparable value with one
//! of four [`Method`]s, and the difference plug minus reference is recorded.
//! The mean difference is the plug's constant offset; the spread around it is
//! its accuracy.
//!
//! All windows are half-open, `(t - w, t]`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::plugsim::NANOS_PER_SEC;

pub const TRIM_WINDOW_NS: i64 = 60 * NANOS_PER_SEC;
pub const MEAN_WINDOW_NS: i64 = 900 * NANOS_PER_SEC;

/// 5 % critical value of the corrected Anderson-Darling statistic when mean and
/// variance are estimated from the sample.
pub const AD_CRITICAL_5PCT: f64 = 0.752;

#[derive(Debug, Error, PartialEq)]
pub enum CalibError {
    #[error("series timestamps must be strictly increasing (index {0})")]
    NotIncreasing(usize),
    #[error("timestamp {t} is outside the series range [{first}, {last}]")]
    Extrapolation { t: i64, first: i64, last: i64 },
    #[error("no sample at or before {0}")]
    NoData(i64),
    #[error("window ending at {t} holds {count} samples, need at least {needed}")]
    InsufficientWindow { t: i64, count: usize, needed: usize },
    #[error("plug and reference series do not overlap in time")]
    NoOverlap,
    #[error("empty input")]
    Empty,
    #[error("need at least {needed} values, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("values have zero variance")]
    ZeroVariance,
    #[error("bin width must be positive")]
    BadBinWidth,
    #[error("unknown method `{0}` (last|interp10s|trimmed1min|mean15min)")]
    UnknownMethod(String),
}

/// Voltage readings of one device, strictly increasing in time.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Series {
    points: Vec<(i64, f64)>,
}

impl Series {
    pub fn new(points: Vec<(i64, f64)>) -> Result<Self, CalibError> {
        if let Some(i) = points.windows(2).position(|w| w[0].0 >= w[1].0) {
            return Err(CalibError::NotIncreasing(i + 1));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[(i64, f64)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn first_ts(&self) -> Option<i64> {
        self.points.first().map(|p| p.0)
    }

    pub fn last_ts(&self) -> Option<i64> {
        self.points.last().map(|p| p.0)
    }

    /// Values with `lo < t <= hi`.
    pub fn window(&self, lo: i64, hi: i64) -> &[(i64, f64)] {
        let a = self.points.partition_point(|p| p.0 <= lo);
        let b = self.points.partition_point(|p| p.0 <= hi);
        &self.points[a..b.max(a)]
    }

    /// Reads `timestamp,volts` rows (timestamp in ns).
    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self, csv::Error> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let mut pts = Vec::new();
        for row in rdr.deserialize() {
            let (t, v): (i64, f64) = row?;
            pts.push((t, v));
        }
        pts.sort_by_key(|p| p.0);
        pts.dedup_by_key(|p| p.0);
        Ok(Self { points: pts })
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["timestamp", "volts"])?;
        for (t, v) in &self.points {
            wtr.write_record([t.to_string(), v.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

impl FromIterator<(i64, f64)> for Series {
    /// Sorts by timestamp and keeps the first value of repeated timestamps.
    fn from_iter<T: IntoIterator<Item = (i64, f64)>>(iter: T) -> Self {
        let mut points: Vec<(i64, f64)> = iter.into_iter().collect();
        points.sort_by_key(|p| p.0);
        points.dedup_by_key(|p| p.0);
        Self { points }
    }
}

/// Linear interpolation between the samples bracketing `t`.
pub fn interpolate_at(s: &Series, t: i64) -> Result<f64, CalibError> {
    let (first, last) = match (s.first_ts(), s.last_ts()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(CalibError::Empty),
    };
    if t < first || t > last {
        return Err(CalibError::Extrapolation { t, first, last });
    }
    let pts = s.points();
    let i = pts.partition_point(|p| p.0 < t);
    let (t1, v1) = pts[i];
    if t1 == t {
        return Ok(v1);
    }
    let (t0, v0) = pts[i - 1];
    let frac = (t - t0) as f64 / (t1 - t0) as f64;
    Ok(v0 + (v1 - v0) * frac)
}

/// Value of the latest sample at or before `t`.
pub fn last_before(s: &Series, t: i64) -> Result<f64, CalibError> {
    let i = s.points().partition_point(|p| p.0 <= t);
    if i == 0 {
        return Err(CalibError::NoData(t));
    }
    Ok(s.points()[i - 1].1)
}

/// Mean of the minute `(t - 60 s, t]` after dropping one lowest and one
/// highest reading.
pub fn trimmed_mean_1min(s: &Series, t: i64) -> Result<f64, CalibError> {
    let w = s.window(t - TRIM_WINDOW_NS, t);
    if w.len() < 3 {
        return Err(CalibError::InsufficientWindow {
            t,
            count: w.len(),
            needed: 3,
        });
    }
    let mut vals: Vec<f64> = w.iter().map(|p| p.1).collect();
    vals.sort_by(f64::total_cmp);
    let kept = &vals[1..vals.len() - 1];
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}

/// Plain mean of the quarter hour `(t - 900 s, t]`.
pub fn mean_15min(s: &Series, t: i64) -> Result<f64, CalibError> {
    let w = s.window(t - MEAN_WINDOW_NS, t);
    if w.is_empty() {
        return Err(CalibError::InsufficientWindow {
            t,
            count: 0,
            needed: 1,
        });
    }
    Ok(w.iter().map(|p| p.1).sum::<f64>() / w.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Latest plug reading, however old.
    Last,
    /// Interpolation between the two plug readings around the reference tick.
    Interp10s,
    /// Trimmed mean of the last minute of plug readings.
    Trimmed1Min,
    /// Quarter-hour means of both plug and reference.
    Mean15Min,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Last,
        Method::Interp10s,
        Method::Trimmed1Min,
        Method::Mean15Min,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Last => "last",
            Method::Interp10s => "interp10s",
            Method::Trimmed1Min => "trimmed1min",
            Method::Mean15Min => "mean15min",
        }
    }

    /// Column label used in accuracy tables.
    pub fn label(self) -> &'static str {
        match self {
            Method::Last => "Last",
            Method::Interp10s => "Int. 10 s",
            Method::Trimmed1Min => "Avg. 1 min",
            Method::Mean15Min => "Avg. 15 min",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = CalibError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| CalibError::UnknownMethod(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffSample {
    pub timestamp_ns: i64,
    /// Plug-derived value minus reference value.
    pub diff_v: f64,
    pub method: Method,
}

/// Plug estimate and reference value at reference tick `t`, or `None` when the
/// plug data around `t` does not support `method`.
fn pair_at(
    plug: &Series,
    reference: &Series,
    t: i64,
    v_ref: f64,
    method: Method,
) -> Option<(f64, f64)> {
    let first = plug.first_ts()?;
    match method {
        Method::Last => last_before(plug, t).ok().map(|v| (v, v_ref)),
        Method::Interp10s => interpolate_at(plug, t).ok().map(|v| (v, v_ref)),
        Method::Trimmed1Min => trimmed_mean_1min(plug, t).ok().map(|v| (v, v_ref)),
        Method::Mean15Min => {
            // Both windows must cover the full quarter hour.
            let ref_first = reference.first_ts()?;
            if first > t - MEAN_WINDOW_NS || ref_first > t - MEAN_WINDOW_NS {
                return None;
            }
            let p = mean_15min(plug, t).ok()?;
            let r = mean_15min(reference, t).ok()?;
            Some((p, r))
        }
    }
}

/// Differences at every reference tick where `method` is applicable; ticks
/// with an incomplete plug window are skipped.
pub fn paired_differences(
    plug: &Series,
    reference: &Series,
    method: Method,
) -> Result<Vec<DiffSample>, CalibError> {
    let (pf, pl, rf, rl) = match (
        plug.first_ts(),
        plug.last_ts(),
        reference.first_ts(),
        reference.last_ts(),
    ) {
        (Some(a), Some(b), Some(c), Some(d)) => (a, b, c, d),
        _ => return Err(CalibError::NoOverlap),
    };
    if pl < rf || rl < pf {
        return Err(CalibError::NoOverlap);
    }
    Ok(reference
        .points()
        .iter()
        .filter_map(|&(t, v_ref)| {
            pair_at(plug, reference, t, v_ref, method).map(|(p, r)| DiffSample {
                timestamp_ns: t,
                diff_v: p - r,
                method,
            })
        })
        .collect())
}

fn mean(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len() as f64;
    values.sum::<f64>() / n
}

/// Constant bias estimate: the mean difference.
pub fn estimate_offset(diffs: &[DiffSample]) -> Result<f64, CalibError> {
    if diffs.is_empty() {
        return Err(CalibError::Empty);
    }
    Ok(mean(diffs.iter().map(|d| d.diff_v)))
}

/// Subtracts a calibrated offset from every reading.
pub fn apply_offset(s: &Series, offset_v: f64) -> Series {
    Series {
        points: s.points.iter().map(|&(t, v)| (t, v - offset_v)).collect(),
    }
}

/// Nearest-rank percentile of an ascending slice, `q` in (0, 1].
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

/// 95th percentile (nearest rank) of `|diff - mean(diff)|`.
pub fn accuracy_p95(diffs: &[DiffSample]) -> Result<f64, CalibError> {
    let m = estimate_offset(diffs)?;
    let mut dev: Vec<f64> = diffs.iter().map(|d| (d.diff_v - m).abs()).collect();
    dev.sort_by(f64::total_cmp);
    Ok(nearest_rank(&dev, 0.95))
}

pub fn diff_values(diffs: &[DiffSample]) -> Vec<f64> {
    diffs.iter().map(|d| d.diff_v).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AccuracyRow {
    pub method: Method,
    pub pairs: usize,
    pub offset_v: f64,
    pub p95_v: f64,
}

/// Offset and accuracy of `plug` against `reference` for every method.
pub fn accuracy_table(plug: &Series, reference: &Series) -> Result<Vec<AccuracyRow>, CalibError> {
    Method::ALL
        .into_iter()
        .map(|method| {
            let d = paired_differences(plug, reference, method)?;
            Ok(AccuracyRow {
                method,
                pairs: d.len(),
                offset_v: estimate_offset(&d)?,
                p95_v: accuracy_p95(&d)?,
            })
        })
        .collect()
}

/// Counts per bin of width `bin_width`, with zero-count bins filled in between
/// the lowest and highest occupied bin.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub bin_width: f64,
    /// Bin index `k` is centred at `k * bin_width`.
    pub counts: BTreeMap<i64, usize>,
}

impl Histogram {
    pub fn center(&self, bin: i64) -> f64 {
        (bin as f64 * self.bin_width * 1e9).round() / 1e9
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    /// `(centre, count)` rows, ascending.
    pub fn rows(&self) -> Vec<(f64, usize)> {
        self.counts
            .iter()
            .map(|(&k, &c)| (self.center(k), c))
            .collect()
    }

    pub fn zero_bins(&self) -> usize {
        self.counts.values().filter(|&&c| c == 0).count()
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<(), csv::Error> {
        let decimals = (-self.bin_width.log10()).ceil().max(0.0) as usize;
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["bin_center", "count"])?;
        for (c, n) in self.rows() {
            wtr.write_record([format!("{c:.decimals$}"), n.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

pub fn histogram(values: &[f64], bin_width: f64) -> Result<Histogram, CalibError> {
    if !(bin_width > 0.0) {
        return Err(CalibError::BadBinWidth);
    }
    let mut counts = BTreeMap::new();
    for v in values {
        *counts.entry((v / bin_width).round() as i64).or_insert(0) += 1;
    }
    if let (Some(&lo), Some(&hi)) = (counts.keys().next(), counts.keys().next_back()) {
        for k in lo..=hi {
            counts.entry(k).or_insert(0);
        }
    }
    Ok(Histogram { bin_width, counts })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NormalityResult {
    pub a2: f64,
    /// Small-sample corrected statistic.
    pub a2_star: f64,
    pub reject_at_5pct: bool,
}

/// Anderson-Darling test against a normal distribution with estimated mean
/// and variance.
pub fn anderson_darling_normality(values: &[f64]) -> Result<NormalityResult, CalibError> {
    let n = values.len();
    if n < 8 {
        return Err(CalibError::TooFew { needed: 8, got: n });
    }
    let nf = n as f64;
    let mu = values.iter().sum::<f64>() / nf;
    let var = values.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (nf - 1.0);
    if !(var > 0.0) {
        return Err(CalibError::ZeroVariance);
    }
    let sd = var.sqrt();
    let mut z: Vec<f64> = values.iter().map(|v| (v - mu) / sd).collect();
    z.sort_by(f64::total_cmp);
    let std_normal = Normal::new(0.0, 1.0).expect("standard normal");
    // ln(1 - F(x)) = ln F(-x), which keeps precision in the upper tail.
    let s: f64 = (0..n)
        .map(|i| {
            let w = (2 * i + 1) as f64;
            w * (std_normal.cdf(z[i]).ln() + std_normal.cdf(-z[n - 1 - i]).ln())
        })
        .sum();
    let a2 = -nf - s / nf;
    let a2_star = a2 * (1.0 + 4.0 / nf - 25.0 / (nf * nf));
    Ok(NormalityResult {
        a2,
        a2_star,
        reject_at_5pct: a2_star > AD_CRITICAL_5PCT,
    })
}

/// Pearson correlation; `None` if either side is constant or lengths differ.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const S: i64 = NANOS_PER_SEC;

    fn series(pts: &[(i64, f64)]) -> Series {
        Series::new(pts.iter().map(|&(t, v)| (t * S, v)).collect()).unwrap()
    }

    #[test]
    fn series_rejects_unordered() {
        assert_eq!(
            Series::new(vec![(0, 1.0), (0, 2.0)]),
            Err(CalibError::NotIncreasing(1))
        );
    }

    #[test]
    fn interpolation() {
        let s = series(&[(0, 230.0), (10, 230.2)]);
        assert!((interpolate_at(&s, 5 * S).unwrap() - 230.1).abs() < 1e-12);
        assert_eq!(interpolate_at(&s, 10 * S).unwrap(), 230.2);
        assert_eq!(interpolate_at(&s, 0).unwrap(), 230.0);
        assert!(matches!(
            interpolate_at(&s, 12 * S),
            Err(CalibError::Extrapolation { .. })
        ));
    }

    #[test]
    fn last_before_cases() {
        let s = series(&[(0, 1.0), (10, 2.0), (20, 3.0)]);
        assert_eq!(last_before(&s, 15 * S).unwrap(), 2.0);
        assert_eq!(last_before(&s, 20 * S).unwrap(), 3.0);
        assert_eq!(last_before(&s, 100 * S).unwrap(), 3.0);
        assert_eq!(last_before(&s, -1), Err(CalibError::NoData(-1)));
    }

    #[test]
    fn trimmed_mean_cases() {
        let vals = [229.9, 230.0, 230.0, 230.1, 230.1, 230.5];
        let s = series(&vals.iter().enumerate().map(|(i, &v)| (i as i64 * 10 + 10, v)).collect::<Vec<_>>());
        assert!((trimmed_mean_1min(&s, 60 * S).unwrap() - 230.05).abs() < 1e-12);
        let flat = series(&(1..=6).map(|i| (i * 10, 231.3)).collect::<Vec<_>>());
        assert!((trimmed_mean_1min(&flat, 60 * S).unwrap() - 231.3).abs() < 1e-12);
        let two = series(&[(50, 1.0), (60, 2.0)]);
        assert!(matches!(
            trimmed_mean_1min(&two, 60 * S),
            Err(CalibError::InsufficientWindow { count: 2, .. })
        ));
        // The sample exactly 60 s before t falls outside (t - 60 s, t].
        let edge = series(&[(0, 100.0), (10, 1.0), (20, 2.0), (30, 3.0)]);
        assert_eq!(trimmed_mean_1min(&edge, 60 * S).unwrap(), 2.0);
    }

    #[test]
    fn mean_15min_cases() {
        let flat = series(&(0..90).map(|i| (i * 10, 229.7)).collect::<Vec<_>>());
        assert!((mean_15min(&flat, 890 * S).unwrap() - 229.7).abs() < 1e-12);
        let two = series(&[(0, 230.0), (10, 231.0)]);
        assert_eq!(mean_15min(&two, 10 * S).unwrap(), 230.5);
        assert!(mean_15min(&two, -1000 * S).is_err());
    }

    #[test]
    fn mean_15min_matches_independent_sum() {
        // 90 pseudo-random readings, summed with a compensated loop.
        let vals: Vec<f64> = (0..90u64)
            .map(|i| 229.0 + ((i * 7919 % 97) as f64) / 10.0)
            .collect();
        let s = series(&vals.iter().enumerate().map(|(i, &v)| (i as i64 * 10 + 5, v)).collect::<Vec<_>>());
        let (mut sum, mut c) = (0.0f64, 0.0f64);
        for v in &vals {
            let y = v - c;
            let t = sum + y;
            c = (t - sum) - y;
            sum = t;
        }
        let expect = sum / 90.0;
        assert!((mean_15min(&s, 900 * S).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn identical_series_give_zero_diffs() {
        let pts: Vec<(i64, f64)> = (0..120).map(|i| (i * 10, 230.0 + (i % 7) as f64 / 10.0)).collect();
        let s = series(&pts);
        let d = paired_differences(&s, &s, Method::Interp10s).unwrap();
        assert_eq!(d.len(), 120);
        assert!(d.iter().all(|x| x.diff_v == 0.0));
    }

    #[test]
    fn constant_bias_gives_constant_diffs() {
        let plug = series(&(0..360).map(|i| (i * 10, 233.65 + (i % 3) as f64)).collect::<Vec<_>>());
        let reference = series(&(0..60).map(|i| (i * 60, 230.0 + (i * 6 % 3) as f64)).collect::<Vec<_>>());
        for m in Method::ALL {
            let d = paired_differences(&plug, &reference, m).unwrap();
            assert!(!d.is_empty(), "{m}");
            if m != Method::Trimmed1Min && m != Method::Mean15Min {
                assert!(d.iter().all(|x| (x.diff_v - 3.65).abs() < 1e-9), "{m}");
            }
        }
    }

    #[test]
    fn eligible_tick_counts() {
        // Plug at 4 s + 10 s k over an hour, reference every minute from 0.
        let plug = series(&(0..360).map(|i| (4 + i * 10, 230.0)).collect::<Vec<_>>());
        let reference = series(&(0..60).map(|i| (i * 60, 230.0)).collect::<Vec<_>>());
        let count = |m| paired_differences(&plug, &reference, m).unwrap().len();
        // Last: ticks >= 4 s -> 59. Interp: 60..=3540 within [4, 3594] -> 59.
        assert_eq!(count(Method::Last), 59);
        assert_eq!(count(Method::Interp10s), 59);
        // Trimmed: t=60 window (0,60] has 4,14,..,54 -> 6 samples; all 59 from 60 s.
        assert_eq!(count(Method::Trimmed1Min), 59);
        // Mean15: plug starts at 4 s, so t - 900 >= 4 -> t >= 960 -> 16 * 60 .. 59 * 60.
        assert_eq!(count(Method::Mean15Min), 44);
        let later = series(&[(10_000, 1.0)]);
        assert_eq!(
            paired_differences(&plug, &later, Method::Last),
            Err(CalibError::NoOverlap)
        );
    }

    #[test]
    fn offset_estimates() {
        let d = |v: f64| DiffSample {
            timestamp_ns: 0,
            diff_v: v,
            method: Method::Interp10s,
        };
        assert!((estimate_offset(&[d(3.65); 10]).unwrap() - 3.65).abs() < 1e-12);
        assert_eq!(estimate_offset(&[d(-0.3), d(0.3)]).unwrap(), 0.0);
        assert_eq!(estimate_offset(&[]), Err(CalibError::Empty));
    }

    #[test]
    fn apply_offset_cases() {
        let s = series(&[(0, 233.65), (10, 233.75), (20, 233.55)]);
        assert_eq!(apply_offset(&s, 0.0), s);
        let once = apply_offset(&s, 3.65);
        let twice = apply_offset(&once, 3.65);
        for ((a, b), c) in s.points().iter().zip(once.points()).zip(twice.points()) {
            assert_eq!(a.0, c.0);
            assert!((a.1 - b.1 - 3.65).abs() < 1e-12);
            assert!((a.1 - c.1 - 7.3).abs() < 1e-12);
        }
        let reference = series(&[(0, 230.0), (10, 230.1), (20, 229.9)]);
        let diffs = paired_differences(&s, &reference, Method::Interp10s).unwrap();
        let off = estimate_offset(&diffs).unwrap();
        let centred = paired_differences(&apply_offset(&s, off), &reference, Method::Interp10s).unwrap();
        assert!(estimate_offset(&centred).unwrap().abs() < 1e-12);
    }

    fn diffs(values: &[f64]) -> Vec<DiffSample> {
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| DiffSample {
                timestamp_ns: i as i64,
                diff_v: v,
                method: Method::Interp10s,
            })
            .collect()
    }

    #[test]
    fn p95_cases() {
        assert!(accuracy_p95(&diffs(&[0.4; 20])).unwrap() < 1e-12);
        assert_eq!(accuracy_p95(&[]), Err(CalibError::Empty));

        // 95 values at m +- 0.1 (47 above, 48 below), 5 outliers (3 above, 2 below).
        let m = 3.0;
        let mut v = Vec::new();
        v.extend(std::iter::repeat_n(m + 0.1, 47));
        v.extend(std::iter::repeat_n(m - 0.1, 48));
        v.extend(std::iter::repeat_n(m + 1.0, 3));
        v.extend(std::iter::repeat_n(m - 1.0, 2));
        // Oracle: explicit mean, sort, take rank ceil(0.95 * 100) = 95.
        let mean: f64 = v.iter().sum::<f64>() / v.len() as f64;
        let mut dev: Vec<f64> = v.iter().map(|x| (x - mean).abs()).collect();
        dev.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let expect = dev[94];
        let got = accuracy_p95(&diffs(&v)).unwrap();
        assert_eq!(got, expect);
        assert!((0.1..1.0).contains(&got), "{got}");
    }

    #[test]
    fn histogram_cases() {
        let h = histogram(&[230.0, 230.1, 230.1], 0.1).unwrap();
        assert_eq!(h.rows(), vec![(230.0, 1), (230.1, 2)]);
        let gapped = histogram(&[229.9, 230.2, 230.2, 230.5], 0.1).unwrap();
        assert_eq!(gapped.total(), 4);
        assert_eq!(gapped.zero_bins(), 4);
        assert_eq!(gapped.counts.len(), 7);
        assert_eq!(histogram(&[1.0], 0.0), Err(CalibError::BadBinWidth));
        let mut out = Vec::new();
        h.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "bin_center,count\n230.0,1\n230.1,2\n");
    }

    #[test]
    fn anderson_darling_errors() {
        assert_eq!(
            anderson_darling_normality(&[1.0; 5]),
            Err(CalibError::TooFew { needed: 8, got: 5 })
        );
        assert_eq!(
            anderson_darling_normality(&[2.0; 20]),
            Err(CalibError::ZeroVariance)
        );
    }

    #[test]
    fn anderson_darling_matches_reference_value() {
        // Normal quantiles at (i - 0.5) / 10 give an almost perfect fit.
        let q = [
            -1.6449, -1.0364, -0.6745, -0.3853, -0.1257, 0.1257, 0.3853, 0.6745, 1.0364, 1.6449,
        ];
        let r = anderson_darling_normality(&q).unwrap();
        assert!(r.a2 < 0.2, "{}", r.a2);
        assert!(!r.reject_at_5pct);
        // Strongly bimodal data is rejected.
        let bi: Vec<f64> = (0..40).map(|i| if i % 2 == 0 { -1.0 } else { 1.0 } + i as f64 * 1e-3).collect();
        assert!(anderson_darling_normality(&bi).unwrap().reject_at_5pct);
    }

    #[test]
    fn pearson_cases() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 1.0], &[1.0, 2.0]), None);
    }

    proptest! {
        #[test]
        fn p95_is_translation_invariant(vals in proptest::collection::vec(-5.0f64..5.0, 1..200), c in -10.0f64..10.0) {
            let a = accuracy_p95(&diffs(&vals)).unwrap();
            let shifted: Vec<f64> = vals.iter().map(|v| v + c).collect();
            let b = accuracy_p95(&diffs(&shifted)).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn offset_equivariance(c in -5.0f64..5.0, seed in 0u64..1000) {
            let plug: Vec<(i64, f64)> = (0..400).map(|i| (i * 10 + 3, 230.0 + ((i as u64 * 31 + seed) % 11) as f64 / 10.0)).collect();
            let reference: Vec<(i64, f64)> = (0..66).map(|i| (i * 60, 230.0 + ((i as u64 * 17 + seed) % 5) as f64 / 10.0)).collect();
            let plug = series(&plug);
            let reference = series(&reference);
            for m in Method::ALL {
                let base = estimate_offset(&paired_differences(&plug, &reference, m).unwrap()).unwrap();
                let moved = estimate_offset(&paired_differences(&apply_offset(&plug, c), &reference, m).unwrap()).unwrap();
                prop_assert!((moved - (base - c)).abs() < 1e-9);
            }
        }

        #[test]
        fn histogram_conserves_counts(vals in proptest::collection::vec(200.0f64..260.0, 0..300)) {
            let h = histogram(&vals, 0.1).unwrap();
            prop_assert_eq!(h.total(), vals.len());
        }

        #[test]
        fn interpolation_exact_on_affine(a in -10.0f64..10.0, b in 200.0f64..260.0, t in 0i64..1000) {
            let s = Series::new((0..=100).map(|i| (i * 10 * S, a * i as f64 * 10.0 + b)).collect()).unwrap();
            let v = interpolate_at(&s, t * S).unwrap();
            prop_assert!((v - (a * t as f64 + b)).abs() < 1e-9);
        }
    }
}
