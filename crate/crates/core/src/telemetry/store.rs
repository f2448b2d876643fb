//! Append-only time-series store backed by a text log.
//!
//! One point per line:
//!
//! ```text
//! voltage,device=<id>,phase=<p>,location=<l>,vendor=<v> value=<decimal> <unix_ns>
//! ```
//!
//! Tag values escape `\`, `,`, `=` and space with a backslash. The in-memory
//! index is rebuilt from the log on open. A trailing line without a newline is
//! a torn write: writers truncate it, readers ignore it.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use thiserror::Error;

use super::{Tags, TimeSeriesPoint};

pub const LOG_FILE: &str = "points.lp";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(
        "out-of-order point for {series}/{device}: {timestamp_ns} is before last {last_ns}"
    )]
    OutOfOrder {
        series: String,
        device: String,
        timestamp_ns: i64,
        last_ns: i64,
    },
    #[error("query range start {start} is after end {end}")]
    InvalidRange { start: i64, end: i64 },
    #[error("store log {path} line {line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("store is read-only")]
    ReadOnly,
    #[error("store I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Durability {
    /// Hand the line to the OS before acknowledging.
    Flush,
    /// fsync the log before acknowledging.
    #[default]
    Sync,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppendOutcome {
    Appended,
    /// A point for the same (series, device, timestamp) is already stored.
    Duplicate,
}

/// Tag equality filter; `None` fields match anything.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TagFilter {
    pub device: Option<String>,
    pub phase: Option<String>,
    pub location: Option<String>,
    pub vendor: Option<String>,
}

impl TagFilter {
    pub fn device(id: impl Into<String>) -> Self {
        Self {
            device: Some(id.into()),
            ..Self::default()
        }
    }

    pub fn matches(&self, tags: &Tags) -> bool {
        fn ok(want: &Option<String>, have: &str) -> bool {
            want.as_deref().is_none_or(|w| w == have)
        }
        ok(&self.device, &tags.device)
            && ok(&self.phase, &tags.phase)
            && ok(&self.location, &tags.location)
            && ok(&self.vendor, &tags.vendor)
    }
}

fn escape(s: &str, out: &mut String) {
    for c in s.chars() {
        if matches!(c, '\\' | ',' | '=' | ' ') {
            out.push('\\');
        }
        out.push(c);
    }
}

/// Shortest round-trip decimal, always with a fractional part.
pub fn format_value(v: f64) -> String {
    let mut s = v.to_string();
    if v.is_finite() && !s.contains('.') {
        s.push_str(".0");
    }
    s
}

pub fn format_line(p: &TimeSeriesPoint) -> String {
    let mut line = String::with_capacity(96);
    escape(&p.series, &mut line);
    for (k, v) in [
        ("device", &p.tags.device),
        ("phase", &p.tags.phase),
        ("location", &p.tags.location),
        ("vendor", &p.tags.vendor),
    ] {
        line.push(',');
        line.push_str(k);
        line.push('=');
        escape(v, &mut line);
    }
    line.push_str(" value=");
    line.push_str(&format_value(p.value));
    line.push(' ');
    line.push_str(&p.timestamp_ns.to_string());
    line
}

/// Splits on an unescaped `sep`, unescaping each piece.
fn split_unescaped(s: &str, sep: char) -> Vec<String> {
    let mut parts = vec![String::new()];
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            if let Some(n) = chars.next() {
                parts.last_mut().unwrap().push('\\');
                parts.last_mut().unwrap().push(n);
            }
        } else if c == sep {
            parts.push(String::new());
        } else {
            parts.last_mut().unwrap().push(c);
        }
    }
    parts
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            if let Some(n) = chars.next() {
                out.push(n);
            }
        } else {
            out.push(c);
        }
    }
    out
}

pub fn parse_line(line: &str) -> Result<TimeSeriesPoint, String> {
    let fields = split_unescaped(line, ' ');
    let [key, field, ts] = fields.as_slice() else {
        return Err(format!("expected 3 space-separated fields, got {}", fields.len()));
    };
    let key_parts = split_unescaped(key, ',');
    let series = unescape(&key_parts[0]);
    let mut tags: HashMap<String, String> = HashMap::new();
    for kv in &key_parts[1..] {
        let pair = split_unescaped(kv, '=');
        let [k, v] = pair.as_slice() else {
            return Err(format!("bad tag `{kv}`"));
        };
        tags.insert(unescape(k), unescape(v));
    }
    let mut take = |k: &str| tags.remove(k).ok_or_else(|| format!("missing tag {k}"));
    let tags = Tags {
        device: take("device")?,
        phase: take("phase")?,
        location: take("location")?,
        vendor: take("vendor")?,
    };
    let value = field
        .strip_prefix("value=")
        .ok_or_else(|| format!("bad field `{field}`"))?
        .parse::<f64>()
        .map_err(|e| e.to_string())?;
    let timestamp_ns = ts.parse::<i64>().map_err(|e| e.to_string())?;
    Ok(TimeSeriesPoint {
        series,
        tags,
        value,
        timestamp_ns,
    })
}

#[derive(Debug, Default)]
struct Index {
    points: Vec<TimeSeriesPoint>,
    /// (timestamp, series, device) -> position in `points`.
    by_time: BTreeMap<(i64, String, String), usize>,
    last: HashMap<(String, String), i64>,
}

impl Index {
    fn key(p: &TimeSeriesPoint) -> (i64, String, String) {
        (p.timestamp_ns, p.series.clone(), p.tags.device.clone())
    }

    fn check(&self, p: &TimeSeriesPoint) -> Result<AppendOutcome, StoreError> {
        if self.by_time.contains_key(&Self::key(p)) {
            return Ok(AppendOutcome::Duplicate);
        }
        match self.last.get(&(p.series.clone(), p.tags.device.clone())) {
            Some(&last) if p.timestamp_ns < last => Err(StoreError::OutOfOrder {
                series: p.series.clone(),
                device: p.tags.device.clone(),
                timestamp_ns: p.timestamp_ns,
                last_ns: last,
            }),
            _ => Ok(AppendOutcome::Appended),
        }
    }

    fn insert(&mut self, p: TimeSeriesPoint) {
        self.by_time.insert(Self::key(&p), self.points.len());
        self.last
            .insert((p.series.clone(), p.tags.device.clone()), p.timestamp_ns);
        self.points.push(p);
    }
}

/// Single-writer, multi-reader point store.
#[derive(Debug)]
pub struct TimeSeriesStore {
    path: PathBuf,
    writer: Option<Mutex<File>>,
    durability: Durability,
    index: RwLock<Index>,
}

impl TimeSeriesStore {
    /// Opens (creating if needed) the store in `dir` for appending.
    pub fn open(dir: &Path, durability: Durability) -> Result<Self, StoreError> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(LOG_FILE);
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&path)?;
        let (index, valid_len) = Self::load(&path, &mut file)?;
        let len = file.metadata()?.len();
        if valid_len < len {
            log::warn!(
                "{}: dropping {} bytes of torn trailing line",
                path.display(),
                len - valid_len
            );
            file.set_len(valid_len)?;
        }
        Ok(Self {
            path,
            writer: Some(Mutex::new(file)),
            durability,
            index: RwLock::new(index),
        })
    }

    /// Opens an existing store for queries only.
    pub fn open_read_only(dir: &Path) -> Result<Self, StoreError> {
        let path = dir.join(LOG_FILE);
        let mut file = File::open(&path)?;
        let (index, _) = Self::load(&path, &mut file)?;
        Ok(Self {
            path,
            writer: None,
            durability: Durability::Flush,
            index: RwLock::new(index),
        })
    }

    fn load(path: &Path, file: &mut File) -> Result<(Index, u64), StoreError> {
        file.seek(SeekFrom::Start(0))?;
        let mut reader = BufReader::new(&*file);
        let mut index = Index::default();
        let mut valid = 0u64;
        let mut buf = String::new();
        let mut lineno = 0;
        loop {
            buf.clear();
            let n = reader.read_line(&mut buf)?;
            if n == 0 || !buf.ends_with('\n') {
                break;
            }
            lineno += 1;
            let p = parse_line(buf.trim_end_matches('\n')).map_err(|message| {
                StoreError::Corrupt {
                    path: path.to_path_buf(),
                    line: lineno,
                    message,
                }
            })?;
            if index.check(&p)? == AppendOutcome::Appended {
                index.insert(p);
            }
            valid += n as u64;
        }
        Ok((index, valid))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Persists `point` before returning. Re-appending a stored
    /// (series, device, timestamp) is a no-op.
    pub fn append(&self, point: TimeSeriesPoint) -> Result<AppendOutcome, StoreError> {
        let writer = self.writer.as_ref().ok_or(StoreError::ReadOnly)?;
        let mut file = writer.lock().unwrap_or_else(|e| e.into_inner());
        if self.index.read().unwrap_or_else(|e| e.into_inner()).check(&point)?
            == AppendOutcome::Duplicate
        {
            return Ok(AppendOutcome::Duplicate);
        }
        let mut line = format_line(&point);
        line.push('\n');
        file.write_all(line.as_bytes())?;
        file.flush()?;
        if self.durability == Durability::Sync {
            file.sync_data()?;
        }
        self.index
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(point);
        Ok(AppendOutcome::Appended)
    }

    /// Points matching `filter` with `start <= timestamp < end`, ascending by
    /// timestamp (ties by series, then device).
    pub fn query(
        &self,
        filter: &TagFilter,
        start: i64,
        end: i64,
    ) -> Result<Vec<TimeSeriesPoint>, StoreError> {
        if start > end {
            return Err(StoreError::InvalidRange { start, end });
        }
        let index = self.index.read().unwrap_or_else(|e| e.into_inner());
        let lo = (start, String::new(), String::new());
        let hi = (end, String::new(), String::new());
        Ok(index
            .by_time
            .range(lo..hi)
            .map(|(_, &i)| &index.points[i])
            .filter(|p| filter.matches(&p.tags))
            .cloned()
            .collect())
    }

    pub fn len(&self) -> usize {
        self.index.read().unwrap_or_else(|e| e.into_inner()).points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn last_timestamp(&self, series: &str, device: &str) -> Option<i64> {
        self.index
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .last
            .get(&(series.to_string(), device.to_string()))
            .copied()
    }
}
