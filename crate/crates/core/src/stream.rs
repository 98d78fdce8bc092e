//! Complex event processing: per-series cleaning, sensor data streams that
//! tick at a fixed frequency, threshold conditions with level/edge triggers
//! and cooldown, and windowed multi-condition patterns.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::{ContextBroker, Notification, NotificationSink, Sink};
use crate::outlier::{DetectorRegistry, OutlierPolicy, PolicyError, RejectReason, SeriesCleaner, Verdict};
use crate::time::{Span, Timestamp};
use crate::timeseries::{Measurement, SeriesKey, TimeSeriesError, TimeSeriesStore};
use crate::value::{Comparator, Quality, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StreamError {
    #[error("unknown sensor `{0}`")]
    UnknownSensor(String),
    #[error("unknown stream `{0}`")]
    UnknownStream(String),
    #[error("unknown condition `{0}`")]
    UnknownCondition(String),
    #[error("stream frequency must be positive")]
    NonPositiveFrequency,
    #[error("negative cooldown")]
    NegativeCooldown,
    #[error("pattern needs at least one member and a positive span")]
    InvalidPattern,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Store(#[from] TimeSeriesError),
}

impl StreamError {
    pub fn code(&self) -> &'static str {
        match self {
            StreamError::UnknownSensor(_) => "unknown-sensor",
            StreamError::UnknownStream(_) => "unknown-stream",
            StreamError::UnknownCondition(_) => "unknown-condition",
            StreamError::NonPositiveFrequency => "invalid-frequency",
            StreamError::NegativeCooldown => "invalid-cooldown",
            StreamError::InvalidPattern => "invalid-pattern",
            StreamError::Policy(e) => e.code(),
            StreamError::Store(e) => e.code(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MeasurementType {
    LastValue,
    WindowAvg,
    WindowMin,
    WindowMax,
}

/// The stream triple (sensor selector, frequency, measurement type) plus its
/// cleaning policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorDataStream {
    #[serde(default)]
    pub id: String,
    /// Physical sensor id or composite entity id.
    pub sensor_id: String,
    pub attribute: String,
    pub frequency: Span,
    pub measurement_type: MeasurementType,
    #[serde(default)]
    pub cleaning: Option<OutlierPolicy>,
    #[serde(default)]
    pub active: bool,
    /// LastValue ticks ignore samples older than this; defaults to 2× frequency.
    #[serde(default)]
    pub staleness_horizon: Option<Span>,
    #[serde(default)]
    pub campaign_id: Option<String>,
}

impl SensorDataStream {
    pub fn new(sensor_id: &str, attribute: &str, frequency: Span, measurement_type: MeasurementType) -> Self {
        SensorDataStream {
            id: String::new(),
            sensor_id: sensor_id.to_owned(),
            attribute: attribute.to_owned(),
            frequency,
            measurement_type,
            cleaning: None,
            active: false,
            staleness_horizon: None,
            campaign_id: None,
        }
    }

    pub fn key(&self) -> SeriesKey {
        SeriesKey::new(self.sensor_id.clone(), self.attribute.clone())
    }

    pub fn staleness(&self) -> Span {
        self.staleness_horizon.unwrap_or(self.frequency * 2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TickSample {
    pub stream_id: String,
    pub at: Timestamp,
    pub value: f64,
    pub sample_count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StreamEventKind {
    CleanedMeasurement,
    OutlierDropped,
    TickSample,
    ContextChange,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum EventPayload {
    Measurement {
        measurement: Measurement,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reason: Option<RejectReason>,
    },
    Tick {
        value: f64,
        sample_count: usize,
    },
    Condition {
        condition_id: String,
        value: f64,
        comparator: Comparator,
        threshold: f64,
    },
    Pattern {
        pattern_id: String,
        members: Vec<(String, Timestamp)>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamEvent {
    pub seq: u64,
    pub stream_id: String,
    pub kind: StreamEventKind,
    pub payload: EventPayload,
    pub at: Timestamp,
}

impl StreamEvent {
    pub fn condition_id(&self) -> Option<&str> {
        match &self.payload {
            EventPayload::Condition { condition_id, .. } => Some(condition_id),
            _ => None,
        }
    }
}

/// Writes events as JSON lines.
pub fn export_jsonl<W: Write>(events: &[StreamEvent], mut out: W) -> std::io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Trigger {
    #[default]
    Level,
    Edge,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionSpec {
    #[serde(default)]
    pub id: String,
    pub stream_id: String,
    pub comparator: Comparator,
    pub threshold: f64,
    #[serde(default)]
    pub trigger: Trigger,
    /// Defaults to the stream frequency.
    #[serde(default)]
    pub cooldown: Option<Span>,
}

impl ConditionSpec {
    pub fn new(stream_id: &str, comparator: Comparator, threshold: f64) -> Self {
        ConditionSpec { id: String::new(), stream_id: stream_id.to_owned(), comparator, threshold, trigger: Trigger::Level, cooldown: None }
    }

    pub fn holds(&self, value: f64) -> bool {
        self.comparator.eval_f64(value, self.threshold)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConditionState {
    pub last_fired: Option<Timestamp>,
    pub prev_holds: bool,
}

/// Evaluates one condition at a tick. An absent tick never fires and leaves
/// the edge state untouched.
pub fn evaluate_condition(
    cond: &ConditionSpec,
    cooldown: Span,
    tick: Option<&TickSample>,
    at: Timestamp,
    state: &mut ConditionState,
) -> bool {
    let Some(tick) = tick else { return false };
    let holds = cond.holds(tick.value);
    let cooled = state.last_fired.is_none_or(|last| at - last >= cooldown);
    let fired = match cond.trigger {
        Trigger::Level => holds && cooled,
        Trigger::Edge => holds && !state.prev_holds && cooled,
    };
    state.prev_holds = holds;
    if fired {
        state.last_fired = Some(at);
    }
    fired
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternSpec {
    #[serde(default)]
    pub id: String,
    /// Condition ids.
    pub members: Vec<String>,
    pub within: Span,
    #[serde(default)]
    pub ordered: bool,
}

/// Windowed conjunction over condition firings.
#[derive(Clone, Debug)]
pub struct PatternMatcher {
    spec: PatternSpec,
    firings: Vec<VecDeque<Timestamp>>,
}

impl PatternMatcher {
    pub fn new(spec: PatternSpec) -> Self {
        let firings = vec![VecDeque::new(); spec.members.len()];
        PatternMatcher { spec, firings }
    }

    pub fn spec(&self) -> &PatternSpec {
        &self.spec
    }

    /// Feeds one condition firing; returns the matched member times when the
    /// pattern completes. Matched firings are consumed.
    pub fn on_fire(&mut self, condition_id: &str, at: Timestamp) -> Option<Vec<(String, Timestamp)>> {
        let mut touched = false;
        for (i, m) in self.spec.members.iter().enumerate() {
            if m == condition_id {
                self.firings[i].push_back(at);
                touched = true;
            }
        }
        if !touched {
            return None;
        }
        let horizon = at - self.spec.within;
        for f in &mut self.firings {
            f.retain(|t| *t >= horizon);
        }
        let mut chosen = Vec::with_capacity(self.firings.len());
        if self.search(0, &mut chosen) {
            for f in &mut self.firings {
                f.clear();
            }
            return Some(self.spec.members.iter().cloned().zip(chosen).collect());
        }
        None
    }

    fn search(&self, i: usize, chosen: &mut Vec<Timestamp>) -> bool {
        if i == self.firings.len() {
            let lo = chosen.iter().min().copied();
            let hi = chosen.iter().max().copied();
            return matches!((lo, hi), (Some(lo), Some(hi)) if hi - lo <= self.spec.within);
        }
        for &t in self.firings[i].iter().rev() {
            if self.spec.ordered && chosen.last().is_some_and(|prev| t < *prev) {
                continue;
            }
            chosen.push(t);
            if self.search(i + 1, chosen) {
                return true;
            }
            chosen.pop();
        }
        false
    }
}

struct RegisteredCondition {
    spec: ConditionSpec,
    cooldown: Span,
    state: ConditionState,
}

struct Pipeline {
    spec: SensorDataStream,
    /// Cleaned samples (time, value), ascending.
    history: VecDeque<(Timestamp, f64)>,
    last_tick: Option<Timestamp>,
    conditions: Vec<RegisteredCondition>,
    events: Vec<StreamEvent>,
}

impl Pipeline {
    fn record(&mut self, seq: &AtomicU64, kind: StreamEventKind, payload: EventPayload, at: Timestamp) -> StreamEvent {
        let e = StreamEvent { seq: seq.fetch_add(1, Ordering::SeqCst) + 1, stream_id: self.spec.id.clone(), kind, payload, at };
        self.events.push(e.clone());
        e
    }

    fn push_cleaned(&mut self, at: Timestamp, value: f64) {
        let pos = self.history.partition_point(|(t, _)| *t <= at);
        self.history.insert(pos, (at, value));
    }

    fn tick_value(&self, now: Timestamp) -> Option<TickSample> {
        let f = self.spec.frequency;
        let sample = |value: f64, n: usize| TickSample { stream_id: self.spec.id.clone(), at: now, value, sample_count: n };
        match self.spec.measurement_type {
            MeasurementType::LastValue => {
                let horizon = now - self.spec.staleness();
                self.history.iter().rev().find(|(t, _)| *t <= now && *t > horizon).map(|(_, v)| sample(*v, 1))
            }
            kind => {
                let vals: Vec<f64> = self.history.iter().filter(|(t, _)| *t > now - f && *t <= now).map(|(_, v)| *v).collect();
                if vals.is_empty() {
                    return None;
                }
                let v = match kind {
                    MeasurementType::WindowAvg => vals.iter().sum::<f64>() / vals.len() as f64,
                    MeasurementType::WindowMin => vals.iter().cloned().fold(f64::INFINITY, f64::min),
                    _ => vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                };
                Some(sample(v, vals.len()))
            }
        }
    }

    fn prune(&mut self, now: Timestamp) {
        let keep = self.spec.staleness().max(self.spec.frequency);
        let horizon = now - keep;
        while self.history.front().is_some_and(|(t, _)| *t <= horizon) {
            self.history.pop_front();
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IngestOutcome {
    pub verdict: Verdict,
    /// Exact duplicate of an already stored sample: nothing was done.
    pub duplicate: bool,
    pub events: Vec<StreamEvent>,
}

impl IngestOutcome {
    pub fn accepted(&self) -> bool {
        self.verdict.is_accept()
    }
}

pub struct StreamProcessor {
    broker: Arc<ContextBroker>,
    store: Arc<TimeSeriesStore>,
    detectors: DetectorRegistry,
    streams: RwLock<BTreeMap<String, Arc<Mutex<Pipeline>>>>,
    cleaners: Mutex<HashMap<SeriesKey, Arc<Mutex<SeriesCleaner>>>>,
    conditions: RwLock<BTreeMap<String, String>>,
    patterns: Mutex<BTreeMap<String, PatternMatcher>>,
    pattern_events: Mutex<Vec<StreamEvent>>,
    seq: AtomicU64,
    next_id: AtomicU64,
}

impl std::fmt::Debug for StreamProcessor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StreamProcessor").field("streams", &self.streams.read().len()).finish()
    }
}

impl StreamProcessor {
    pub fn new(broker: Arc<ContextBroker>, store: Arc<TimeSeriesStore>) -> Self {
        Self::with_detectors(broker, store, DetectorRegistry::with_builtins())
    }

    pub fn with_detectors(broker: Arc<ContextBroker>, store: Arc<TimeSeriesStore>, detectors: DetectorRegistry) -> Self {
        StreamProcessor {
            broker,
            store,
            detectors,
            streams: RwLock::new(BTreeMap::new()),
            cleaners: Mutex::new(HashMap::new()),
            conditions: RwLock::new(BTreeMap::new()),
            patterns: Mutex::new(BTreeMap::new()),
            pattern_events: Mutex::new(Vec::new()),
            seq: AtomicU64::new(0),
            next_id: AtomicU64::new(0),
        }
    }

    fn fresh_id(&self, prefix: &str) -> String {
        format!("{prefix}-{}", self.next_id.fetch_add(1, Ordering::SeqCst) + 1)
    }

    fn pipeline(&self, id: &str) -> Result<Arc<Mutex<Pipeline>>, StreamError> {
        self.streams.read().get(id).cloned().ok_or_else(|| StreamError::UnknownStream(id.to_owned()))
    }

    /// Registers a stream, or returns the id of an identical one.
    pub fn register_stream(&self, mut spec: SensorDataStream) -> Result<String, StreamError> {
        if !spec.frequency.is_positive() {
            return Err(StreamError::NonPositiveFrequency);
        }
        if !self.broker.contains(&spec.sensor_id) {
            return Err(StreamError::UnknownSensor(spec.sensor_id));
        }
        if let Some(p) = &spec.cleaning {
            p.validate()?;
        }
        {
            let streams = self.streams.read();
            for (id, p) in streams.iter() {
                let s = &p.lock().spec;
                if s.sensor_id == spec.sensor_id
                    && s.attribute == spec.attribute
                    && s.frequency == spec.frequency
                    && s.measurement_type == spec.measurement_type
                {
                    return Ok(id.clone());
                }
            }
        }
        if let Some(policy) = spec.cleaning.clone() {
            let cleaner = self.detectors.cleaner(policy)?;
            self.cleaners.lock().insert(spec.key(), Arc::new(Mutex::new(cleaner)));
        }
        let active = spec.active;
        spec.active = false;
        spec.id = self.fresh_id("stream");
        let id = spec.id.clone();
        let pipeline = Pipeline { spec, history: VecDeque::new(), last_tick: None, conditions: Vec::new(), events: Vec::new() };
        self.streams.write().insert(id.clone(), Arc::new(Mutex::new(pipeline)));
        if active {
            self.activate(&id, self.broker.clock().now())?;
        }
        Ok(id)
    }

    pub fn stream(&self, id: &str) -> Result<SensorDataStream, StreamError> {
        Ok(self.pipeline(id)?.lock().spec.clone())
    }

    pub fn streams(&self) -> Vec<SensorDataStream> {
        self.streams.read().values().map(|p| p.lock().spec.clone()).collect()
    }

    /// Starts ticking on the epoch-aligned grid after `now`.
    pub fn activate(&self, id: &str, now: Timestamp) -> Result<(), StreamError> {
        let p = self.pipeline(id)?;
        let mut p = p.lock();
        if !p.spec.active {
            p.spec.active = true;
            p.last_tick = Some(now.floor_to(p.spec.frequency));
        }
        Ok(())
    }

    pub fn deactivate(&self, id: &str) -> Result<(), StreamError> {
        self.pipeline(id)?.lock().spec.active = false;
        Ok(())
    }

    fn cleaner_for(&self, key: &SeriesKey) -> Result<Arc<Mutex<SeriesCleaner>>, StreamError> {
        let mut cleaners = self.cleaners.lock();
        if let Some(c) = cleaners.get(key) {
            return Ok(c.clone());
        }
        let c = Arc::new(Mutex::new(self.detectors.cleaner(OutlierPolicy::default_for(&key.attribute))?));
        cleaners.insert(key.clone(), c.clone());
        Ok(c)
    }

    fn streams_for(&self, key: &SeriesKey) -> Vec<Arc<Mutex<Pipeline>>> {
        self.streams
            .read()
            .values()
            .filter(|p| {
                let p = p.lock();
                p.spec.active && p.spec.sensor_id == key.sensor_id && p.spec.attribute == key.attribute
            })
            .cloned()
            .collect()
    }

    /// Cleans one raw measurement: accepted samples are stored as `Cleaned`
    /// and enter the trailing window, rejected ones are stored as `Raw` only.
    /// Every active stream on the series gets exactly one event.
    pub fn ingest(&self, m: Measurement) -> Result<IngestOutcome, StreamError> {
        let key = m.key();
        let cleaner = self.cleaner_for(&key)?;
        let mut cleaner = cleaner.lock();
        let verdict = cleaner.assess(m.value);
        let stored = m.with_quality(if verdict.is_accept() { Quality::Cleaned } else { Quality::Raw });
        if !self.store.append(stored.clone())? {
            return Ok(IngestOutcome { verdict, duplicate: true, events: Vec::new() });
        }
        if verdict.is_accept() {
            cleaner.commit(stored.value);
        } else {
            cleaner.reject(stored.value, &verdict);
        }
        drop(cleaner);
        let mut events = Vec::new();
        for p in self.streams_for(&key) {
            let mut p = p.lock();
            let (kind, reason) = match &verdict {
                Verdict::Accept => {
                    p.push_cleaned(stored.observed_at, stored.value);
                    (StreamEventKind::CleanedMeasurement, None)
                }
                Verdict::Reject(r) => (StreamEventKind::OutlierDropped, Some(r.clone())),
            };
            let at = stored.observed_at;
            events.push(p.record(&self.seq, kind, EventPayload::Measurement { measurement: stored.clone(), reason }, at));
        }
        Ok(IngestOutcome { verdict, duplicate: false, events })
    }

    /// Feeds an already-derived value (composite entity attribute) to its
    /// streams without cleaning.
    pub fn ingest_derived(&self, m: Measurement) -> Result<Vec<StreamEvent>, StreamError> {
        let stored = m.with_quality(Quality::Cleaned);
        if !self.store.append(stored.clone())? {
            return Ok(Vec::new());
        }
        let mut events = Vec::new();
        for p in self.streams_for(&stored.key()) {
            let mut p = p.lock();
            p.push_cleaned(stored.observed_at, stored.value);
            let at = stored.observed_at;
            events.push(p.record(
                &self.seq,
                StreamEventKind::CleanedMeasurement,
                EventPayload::Measurement { measurement: stored.clone(), reason: None },
                at,
            ));
        }
        Ok(events)
    }

    pub fn cleaner_window(&self, key: &SeriesKey) -> Vec<f64> {
        self.cleaners.lock().get(key).map(|c| c.lock().window()).unwrap_or_default()
    }

    /// Tick value of a stream at `now` without side effects.
    pub fn evaluate_tick(&self, id: &str, now: Timestamp) -> Result<Option<TickSample>, StreamError> {
        let p = self.pipeline(id)?;
        let p = p.lock();
        if !p.spec.active {
            return Ok(None);
        }
        Ok(p.tick_value(now))
    }

    pub fn register_condition(&self, mut spec: ConditionSpec) -> Result<String, StreamError> {
        let p = self.pipeline(&spec.stream_id)?;
        if spec.cooldown.is_some_and(|c| c < Span::ZERO) {
            return Err(StreamError::NegativeCooldown);
        }
        let mut p = p.lock();
        let cooldown = spec.cooldown.unwrap_or(p.spec.frequency);
        spec.id = self.fresh_id("cond");
        let id = spec.id.clone();
        self.conditions.write().insert(id.clone(), spec.stream_id.clone());
        p.conditions.push(RegisteredCondition { spec, cooldown, state: ConditionState::default() });
        Ok(id)
    }

    pub fn condition(&self, id: &str) -> Result<ConditionSpec, StreamError> {
        let stream = self.conditions.read().get(id).cloned().ok_or_else(|| StreamError::UnknownCondition(id.to_owned()))?;
        let p = self.pipeline(&stream)?;
        let p = p.lock();
        p.conditions.iter().find(|c| c.spec.id == id).map(|c| c.spec.clone()).ok_or_else(|| StreamError::UnknownCondition(id.to_owned()))
    }

    pub fn register_pattern(&self, mut spec: PatternSpec) -> Result<String, StreamError> {
        if spec.members.is_empty() || !spec.within.is_positive() {
            return Err(StreamError::InvalidPattern);
        }
        for m in &spec.members {
            let stream = self.conditions.read().get(m).cloned().ok_or_else(|| StreamError::UnknownCondition(m.clone()))?;
            self.pipeline(&stream)?;
        }
        spec.id = self.fresh_id("pattern");
        let id = spec.id.clone();
        self.patterns.lock().insert(id.clone(), PatternMatcher::new(spec));
        Ok(id)
    }

    /// Emits every tick due in `(last tick, now]` for all active streams, in
    /// time order, evaluating conditions and patterns as it goes.
    pub fn advance_to(&self, now: Timestamp) -> Vec<StreamEvent> {
        let pipelines: Vec<_> = self.streams.read().values().cloned().collect();
        let mut due: Vec<(Timestamp, String, Arc<Mutex<Pipeline>>)> = Vec::new();
        for p in &pipelines {
            let guard = p.lock();
            if !guard.spec.active {
                continue;
            }
            let f = guard.spec.frequency;
            let mut t = guard.last_tick.unwrap_or_else(|| now.floor_to(f)) + f;
            while t <= now {
                due.push((t, guard.spec.id.clone(), p.clone()));
                t = t + f;
            }
        }
        due.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));

        let mut out = Vec::new();
        for (at, _, p) in due {
            let mut firings = Vec::new();
            {
                let mut p = p.lock();
                p.last_tick = Some(at);
                let tick = p.tick_value(at);
                if let Some(t) = &tick {
                    let payload = EventPayload::Tick { value: t.value, sample_count: t.sample_count };
                    out.push(p.record(&self.seq, StreamEventKind::TickSample, payload, at));
                }
                let mut fired = Vec::new();
                for c in p.conditions.iter_mut() {
                    if evaluate_condition(&c.spec, c.cooldown, tick.as_ref(), at, &mut c.state) {
                        fired.push((c.spec.id.clone(), c.spec.comparator, c.spec.threshold));
                    }
                }
                let value = tick.as_ref().map_or(f64::NAN, |t| t.value);
                for (condition_id, comparator, threshold) in fired {
                    let payload = EventPayload::Condition { condition_id: condition_id.clone(), value, comparator, threshold };
                    out.push(p.record(&self.seq, StreamEventKind::ContextChange, payload, at));
                    firings.push(condition_id);
                }
                p.prune(at);
            }
            if !firings.is_empty() {
                out.extend(self.feed_patterns(&firings, at));
            }
        }
        out
    }

    fn feed_patterns(&self, firings: &[String], at: Timestamp) -> Vec<StreamEvent> {
        let mut out = Vec::new();
        let mut patterns = self.patterns.lock();
        for (id, matcher) in patterns.iter_mut() {
            for c in firings {
                if let Some(members) = matcher.on_fire(c, at) {
                    let e = StreamEvent {
                        seq: self.seq.fetch_add(1, Ordering::SeqCst) + 1,
                        stream_id: String::new(),
                        kind: StreamEventKind::ContextChange,
                        payload: EventPayload::Pattern { pattern_id: id.clone(), members },
                        at,
                    };
                    self.pattern_events.lock().push(e.clone());
                    out.push(e);
                }
            }
        }
        out
    }

    /// Stream events with `seq > since`.
    pub fn events_since(&self, id: &str, since: u64) -> Result<Vec<StreamEvent>, StreamError> {
        let p = self.pipeline(id)?;
        let p = p.lock();
        Ok(p.events.iter().filter(|e| e.seq > since).cloned().collect())
    }

    pub fn pattern_events(&self) -> Vec<StreamEvent> {
        self.pattern_events.lock().clone()
    }
}

/// Composite entity updates reach streams through broker notifications.
impl NotificationSink for StreamProcessor {
    fn deliver(&self, _sink: &Sink, n: &Notification) {
        if n.new.quality != Quality::Derived {
            return;
        }
        let Scalar::Number(value) = n.new.value else { return };
        let m = Measurement::new(&n.entity_id, &n.attribute, value, &n.new.unit, n.new.observed_at);
        if let Err(e) = self.ingest_derived(m) {
            tracing::warn!(entity = %n.entity_id, attribute = %n.attribute, error = %e, "derived value not stored");
        }
    }
}
