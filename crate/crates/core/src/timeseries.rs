//! Measurement history per (sensor, attribute) with raw and bucketed reads.
//!
//! Each series is an ordered vector in memory backed by a shared append-only
//! JSON-lines log. Log writes are buffered and flushed at least once per
//! flush window, so a crash loses at most that window.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Weak};
use std::time::{Duration, Instant};

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::{Span, Timestamp};
use crate::value::Quality;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TimeSeriesError {
    #[error("unit `{got}` does not match series unit `{expected}`")]
    UnitMismatch { expected: String, got: String },
    #[error("value is not finite")]
    NonFiniteValue,
    #[error("invalid range: {from} is not before {to}")]
    InvalidRange { from: Timestamp, to: Timestamp },
    #[error("bucket width must be positive")]
    ZeroBucketWidth,
    #[error("aggregate query needs both a bucket width and a function")]
    MissingAggregate,
    #[error("unknown series {0}")]
    UnknownSeries(SeriesKey),
    #[error("bucket width {0} is not in the configured rollup set")]
    UnsupportedWidth(Span),
    #[error("storage failure: {0}")]
    Io(String),
}

impl TimeSeriesError {
    pub fn code(&self) -> &'static str {
        match self {
            TimeSeriesError::UnitMismatch { .. } => "unit-mismatch",
            TimeSeriesError::NonFiniteValue => "non-finite-value",
            TimeSeriesError::InvalidRange { .. } => "invalid-range",
            TimeSeriesError::ZeroBucketWidth => "zero-bucket-width",
            TimeSeriesError::MissingAggregate => "missing-aggregate",
            TimeSeriesError::UnknownSeries(_) => "unknown-series",
            TimeSeriesError::UnsupportedWidth(_) => "unsupported-width",
            TimeSeriesError::Io(_) => "storage-failure",
        }
    }
}

impl From<io::Error> for TimeSeriesError {
    fn from(e: io::Error) -> Self {
        TimeSeriesError::Io(e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SeriesKey {
    pub sensor_id: String,
    pub attribute: String,
}

impl SeriesKey {
    pub fn new(sensor_id: impl Into<String>, attribute: impl Into<String>) -> Self {
        SeriesKey { sensor_id: sensor_id.into(), attribute: attribute.into() }
    }
}

impl std::fmt::Display for SeriesKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.sensor_id, self.attribute)
    }
}

/// One timestamped sensor reading.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub sensor_id: String,
    pub attribute: String,
    pub value: f64,
    #[serde(default)]
    pub unit: String,
    pub observed_at: Timestamp,
    #[serde(default)]
    pub quality: Quality,
}

impl Measurement {
    pub fn new(sensor_id: &str, attribute: &str, value: f64, unit: &str, observed_at: Timestamp) -> Self {
        Measurement {
            sensor_id: sensor_id.to_owned(),
            attribute: attribute.to_owned(),
            value,
            unit: unit.to_owned(),
            observed_at,
            quality: Quality::Raw,
        }
    }

    pub fn key(&self) -> SeriesKey {
        SeriesKey::new(self.sensor_id.clone(), self.attribute.clone())
    }

    pub fn with_quality(mut self, quality: Quality) -> Self {
        self.quality = quality;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggFn {
    #[serde(alias = "Avg")]
    Avg,
    #[serde(alias = "Min")]
    Min,
    #[serde(alias = "Max")]
    Max,
    #[serde(alias = "Sum")]
    Sum,
    #[serde(alias = "Count")]
    Count,
}

impl AggFn {
    pub const ALL: [AggFn; 5] = [AggFn::Avg, AggFn::Min, AggFn::Max, AggFn::Sum, AggFn::Count];
}

impl std::str::FromStr for AggFn {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_owned())).map_err(|_| format!("unknown aggregate `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateBucket {
    pub sensor_id: String,
    pub attribute: String,
    pub bucket_start: Timestamp,
    pub bucket_end: Timestamp,
    #[serde(rename = "fn")]
    pub func: AggFn,
    pub value: Option<f64>,
    pub sample_count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesQuery {
    pub sensor_id: String,
    pub attribute: String,
    pub from: Timestamp,
    pub to: Timestamp,
    #[serde(default)]
    pub bucket: Option<Span>,
    #[serde(default, rename = "fn")]
    pub func: Option<AggFn>,
    #[serde(default)]
    pub quality: Option<Quality>,
}

impl SeriesQuery {
    pub fn raw(key: &SeriesKey, from: Timestamp, to: Timestamp) -> Self {
        SeriesQuery {
            sensor_id: key.sensor_id.clone(),
            attribute: key.attribute.clone(),
            from,
            to,
            bucket: None,
            func: None,
            quality: None,
        }
    }

    pub fn aggregate(key: &SeriesKey, from: Timestamp, to: Timestamp, bucket: Span, func: AggFn) -> Self {
        SeriesQuery { bucket: Some(bucket), func: Some(func), ..Self::raw(key, from, to) }
    }

    pub fn with_quality(mut self, quality: Quality) -> Self {
        self.quality = Some(quality);
        self
    }

    pub fn key(&self) -> SeriesKey {
        SeriesKey::new(self.sensor_id.clone(), self.attribute.clone())
    }
}

/// Running fold of one bucket. Both the on-the-fly path and the rollup path
/// fold samples in series order, so their sums are bit-identical.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Partial {
    count: u64,
    sum: f64,
    min: f64,
    max: f64,
}

impl Partial {
    const EMPTY: Partial = Partial { count: 0, sum: 0.0, min: f64::INFINITY, max: f64::NEG_INFINITY };

    fn push(&mut self, v: f64) {
        self.count += 1;
        self.sum += v;
        self.min = self.min.min(v);
        self.max = self.max.max(v);
    }

    fn value(&self, func: AggFn) -> Option<f64> {
        if self.count == 0 {
            return None;
        }
        Some(match func {
            AggFn::Avg => self.sum / self.count as f64,
            AggFn::Min => self.min,
            AggFn::Max => self.max,
            AggFn::Sum => self.sum,
            AggFn::Count => self.count as f64,
        })
    }
}

#[derive(Default, Debug)]
struct RollupTable {
    buckets: BTreeMap<i64, Partial>,
    dirty: BTreeSet<i64>,
}

#[derive(Debug)]
struct Series {
    unit: String,
    samples: Vec<Measurement>,
    /// Materialized rollups keyed by (bucket width, quality filter).
    rollups: Mutex<HashMap<(Span, Option<Quality>), RollupTable>>,
}

impl Series {
    fn new(unit: String) -> Self {
        Series { unit, samples: Vec::new(), rollups: Mutex::new(HashMap::new()) }
    }

    fn range(&self, from: Timestamp, to: Timestamp) -> &[Measurement] {
        let lo = self.samples.partition_point(|m| m.observed_at < from);
        let hi = self.samples.partition_point(|m| m.observed_at < to);
        &self.samples[lo..hi.max(lo)]
    }

    fn fold(&self, from: Timestamp, to: Timestamp, quality: Option<Quality>) -> Partial {
        let mut p = Partial::EMPTY;
        for m in self.range(from, to) {
            if quality.is_none_or(|q| q == m.quality) {
                p.push(m.value);
            }
        }
        p
    }

    /// Inserts keeping ascending order; equal timestamps keep insertion order.
    /// Returns false when the sample duplicates a stored one.
    fn insert(&mut self, m: Measurement) -> bool {
        let hi = self.samples.partition_point(|s| s.observed_at <= m.observed_at);
        let lo = self.samples.partition_point(|s| s.observed_at < m.observed_at);
        if self.samples[lo..hi].iter().any(|s| s.value.to_bits() == m.value.to_bits()) {
            return false;
        }
        let at = m.observed_at;
        let quality = m.quality;
        self.samples.insert(hi, m);
        let mut rollups = self.rollups.lock();
        for ((width, q), table) in rollups.iter_mut() {
            if q.is_none_or(|q| q == quality) {
                table.dirty.insert(at.floor_to(*width).as_millis());
            }
        }
        true
    }
}

struct LogWriter {
    out: BufWriter<File>,
    last_flush: Instant,
}

impl LogWriter {
    fn flush(&mut self) -> io::Result<()> {
        self.out.flush()?;
        self.last_flush = Instant::now();
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct StoreConfig {
    pub flush_window: Duration,
    pub rollup_widths: Vec<Span>,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig { flush_window: Duration::from_secs(1), rollup_widths: vec![Span::from_hours(1), Span::from_days(1)] }
    }
}

pub struct TimeSeriesStore {
    config: StoreConfig,
    series: RwLock<HashMap<SeriesKey, Arc<RwLock<Series>>>>,
    log: Option<Arc<Mutex<LogWriter>>>,
    path: Option<PathBuf>,
}

impl std::fmt::Debug for TimeSeriesStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TimeSeriesStore").field("path", &self.path).field("series", &self.series.read().len()).finish()
    }
}

const LOG_FILE: &str = "measurements.jsonl";

impl TimeSeriesStore {
    pub fn in_memory() -> Self {
        Self::in_memory_with(StoreConfig::default())
    }

    pub fn in_memory_with(config: StoreConfig) -> Self {
        TimeSeriesStore { config, series: RwLock::new(HashMap::new()), log: None, path: None }
    }

    /// Opens (or creates) a durable store under `dir`, replaying its log.
    pub fn open(dir: impl AsRef<Path>, config: StoreConfig) -> Result<Self, TimeSeriesError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let path = dir.join(LOG_FILE);
        let mut store = Self::in_memory_with(config);
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            let mut skipped = 0usize;
            for line in reader.lines() {
                let line = line?;
                match serde_json::from_str::<Measurement>(&line) {
                    Ok(m) => {
                        let _ = store.insert_in_memory(m);
                    }
                    // a torn tail from a crash
                    Err(_) => skipped += 1,
                }
            }
            if skipped > 0 {
                tracing::warn!(skipped, "skipped unreadable log lines");
            }
        }
        let mut file = OpenOptions::new().create(true).read(true).append(true).open(&path)?;
        if file.metadata()?.len() > 0 {
            let mut last = [0u8; 1];
            file.seek(SeekFrom::End(-1))?;
            file.read_exact(&mut last)?;
            if last[0] != b'\n' {
                file.write_all(b"\n")?;
            }
        }
        let log = Arc::new(Mutex::new(LogWriter { out: BufWriter::new(file), last_flush: Instant::now() }));
        spawn_flusher(Arc::downgrade(&log), store.config.flush_window);
        store.log = Some(log);
        store.path = Some(path);
        Ok(store)
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    fn series_handle(&self, key: &SeriesKey) -> Option<Arc<RwLock<Series>>> {
        self.series.read().get(key).cloned()
    }

    fn series_or_create(&self, key: &SeriesKey, unit: &str) -> Arc<RwLock<Series>> {
        if let Some(s) = self.series_handle(key) {
            return s;
        }
        self.series.write().entry(key.clone()).or_insert_with(|| Arc::new(RwLock::new(Series::new(unit.to_owned())))).clone()
    }

    /// Creates an empty series with a fixed unit if it does not exist yet.
    pub fn declare_series(&self, key: &SeriesKey, unit: &str) {
        self.series_or_create(key, unit);
    }

    fn insert_in_memory(&self, m: Measurement) -> Result<bool, TimeSeriesError> {
        if !m.value.is_finite() {
            return Err(TimeSeriesError::NonFiniteValue);
        }
        let handle = self.series_or_create(&m.key(), &m.unit);
        let mut series = handle.write();
        if series.unit != m.unit {
            return Err(TimeSeriesError::UnitMismatch { expected: series.unit.clone(), got: m.unit });
        }
        Ok(series.insert(m))
    }

    /// Stores a measurement. Returns `false` when it was an exact duplicate
    /// (same series, timestamp and value) and nothing changed.
    pub fn append(&self, m: Measurement) -> Result<bool, TimeSeriesError> {
        if !m.value.is_finite() {
            return Err(TimeSeriesError::NonFiniteValue);
        }
        let handle = self.series_or_create(&m.key(), &m.unit);
        let mut series = handle.write();
        if series.unit != m.unit {
            return Err(TimeSeriesError::UnitMismatch { expected: series.unit.clone(), got: m.unit });
        }
        let line = self.log.as_ref().map(|_| serde_json::to_string(&m).expect("measurement serializes"));
        if !series.insert(m) {
            return Ok(false);
        }
        if let (Some(log), Some(line)) = (&self.log, line) {
            let mut w = log.lock();
            w.out.write_all(line.as_bytes())?;
            w.out.write_all(b"\n")?;
            if w.last_flush.elapsed() >= self.config.flush_window / 2 {
                w.flush()?;
            }
        }
        Ok(true)
    }

    pub fn flush(&self) -> Result<(), TimeSeriesError> {
        if let Some(log) = &self.log {
            log.lock().flush()?;
        }
        Ok(())
    }

    pub fn series_keys(&self) -> Vec<SeriesKey> {
        let mut keys: Vec<_> = self.series.read().keys().cloned().collect();
        keys.sort();
        keys
    }

    pub fn series_unit(&self, key: &SeriesKey) -> Option<String> {
        self.series_handle(key).map(|s| s.read().unit.clone())
    }

    pub fn len(&self, key: &SeriesKey) -> usize {
        self.series_handle(key).map_or(0, |s| s.read().samples.len())
    }

    pub fn total_len(&self) -> usize {
        self.series.read().values().map(|s| s.read().samples.len()).sum()
    }

    fn check_range(q: &SeriesQuery) -> Result<(), TimeSeriesError> {
        if q.from >= q.to {
            return Err(TimeSeriesError::InvalidRange { from: q.from, to: q.to });
        }
        Ok(())
    }

    /// Samples in `[from, to)`, ascending by time, ties in insertion order.
    pub fn query_raw(&self, q: &SeriesQuery) -> Result<Vec<Measurement>, TimeSeriesError> {
        Self::check_range(q)?;
        let Some(handle) = self.series_handle(&q.key()) else {
            return Ok(Vec::new());
        };
        let series = handle.read();
        Ok(series.range(q.from, q.to).iter().filter(|m| q.quality.is_none_or(|f| f == m.quality)).cloned().collect())
    }

    /// Buckets tiling `[from, to)` aligned to `from`. When the range is not a
    /// multiple of the width, the last bucket is clipped at `to`.
    pub fn query_aggregate(&self, q: &SeriesQuery) -> Result<Vec<AggregateBucket>, TimeSeriesError> {
        Self::check_range(q)?;
        let (width, func) = match (q.bucket, q.func) {
            (Some(w), Some(f)) => (w, f),
            _ => return Err(TimeSeriesError::MissingAggregate),
        };
        if !width.is_positive() {
            return Err(TimeSeriesError::ZeroBucketWidth);
        }
        let handle = self.series_handle(&q.key());
        let series = handle.as_ref().map(|h| h.read());
        let rollup_key = (width, q.quality);
        let use_rollup = q.from.floor_to(width) == q.from
            && series.as_ref().is_some_and(|s| s.rollups.lock().contains_key(&rollup_key));

        let mut out = Vec::new();
        let mut start = q.from;
        while start < q.to {
            let end = (start + width).min(q.to);
            let partial = match &series {
                None => Partial::EMPTY,
                Some(s) if use_rollup && end == start + width => {
                    let mut rollups = s.rollups.lock();
                    let table = rollups.get_mut(&rollup_key).expect("checked above");
                    let k = start.as_millis();
                    if table.dirty.remove(&k) {
                        let p = s.fold(start, end, q.quality);
                        if p.count > 0 {
                            table.buckets.insert(k, p);
                        } else {
                            table.buckets.remove(&k);
                        }
                    }
                    table.buckets.get(&k).copied().unwrap_or(Partial::EMPTY)
                }
                Some(s) => s.fold(start, end, q.quality),
            };
            out.push(AggregateBucket {
                sensor_id: q.sensor_id.clone(),
                attribute: q.attribute.clone(),
                bucket_start: start,
                bucket_end: end,
                func,
                value: partial.value(func),
                sample_count: partial.count,
            });
            start = end;
        }
        Ok(out)
    }

    /// Materializes epoch-aligned rollups for `widths` over the whole series,
    /// for the unfiltered view and for cleaned samples.
    pub fn rollup_maintenance(&self, key: &SeriesKey, widths: &[Span]) -> Result<(), TimeSeriesError> {
        if let Some(w) = widths.iter().find(|w| !self.config.rollup_widths.contains(w)) {
            return Err(TimeSeriesError::UnsupportedWidth(*w));
        }
        let handle = self.series_handle(key).ok_or_else(|| TimeSeriesError::UnknownSeries(key.clone()))?;
        let series = handle.read();
        let mut fresh = HashMap::new();
        for &width in widths {
            for quality in [None, Some(Quality::Cleaned)] {
                let mut table = RollupTable::default();
                for m in series.samples.iter().filter(|m| quality.is_none_or(|q| q == m.quality)) {
                    table.buckets.entry(m.observed_at.floor_to(width).as_millis()).or_insert(Partial::EMPTY).push(m.value);
                }
                fresh.insert((width, quality), table);
            }
        }
        series.rollups.lock().extend(fresh);
        Ok(())
    }

    /// Number of rollup buckets awaiting recomputation (for diagnostics).
    pub fn dirty_rollup_buckets(&self, key: &SeriesKey) -> usize {
        self.series_handle(key).map_or(0, |s| s.read().rollups.lock().values().map(|t| t.dirty.len()).sum())
    }
}

fn spawn_flusher(log: Weak<Mutex<LogWriter>>, window: Duration) {
    let period = (window / 4).max(Duration::from_millis(10));
    std::thread::Builder::new()
        .name("ts-flush".into())
        .spawn(move || loop {
            std::thread::sleep(period);
            let Some(log) = log.upgrade() else { return };
            let mut w = log.lock();
            if let Err(e) = w.flush() {
                tracing::error!(error = %e, "log flush failed");
            }
        })
        .expect("spawn flusher thread");
}
