//! Query builder over users and sensor series, analysis templates backed by
//! an algorithm registry, k-means clustering and behavioural features.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use parking_lot::RwLock;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::broker::ContextBroker;
use crate::fusion::{FusionEngine, SourceKind, SourceRecord};
use crate::recommender::{FeedbackResponse, GamerType, RecommendationKind, RecommendationState, Recommender, UserProfile};
use crate::time::{Span, Timestamp};
use crate::timeseries::{SeriesQuery, TimeSeriesError, TimeSeriesStore};
use crate::value::{Comparator, Quality, Scalar};

pub const MAX_QUERY_DEPTH: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalyticsError {
    #[error("unknown field `{0}`")]
    UnknownField(String),
    #[error("malformed query: {0}")]
    MalformedTree(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("no input rows")]
    EmptyInput,
    #[error("vector {index} has dimension {found}, expected {expected}")]
    DimensionMismatch { index: usize, expected: usize, found: usize },
    #[error("k = {k} exceeds the {n} available points")]
    KTooLarge { k: usize, n: usize },
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("unknown algorithm `{0}`")]
    UnknownAlgorithm(String),
    #[error("unknown analysis result `{0}`")]
    UnknownResult(String),
    #[error("unknown user `{0}`")]
    UnknownUser(String),
    #[error(transparent)]
    Store(#[from] TimeSeriesError),
}

impl AnalyticsError {
    pub fn code(&self) -> &'static str {
        match self {
            AnalyticsError::UnknownField(_) => "unknown-field",
            AnalyticsError::MalformedTree(_) => "malformed-tree",
            AnalyticsError::InvalidConfig(_) => "invalid-config",
            AnalyticsError::EmptyInput => "empty-input",
            AnalyticsError::DimensionMismatch { .. } => "dimension-mismatch",
            AnalyticsError::KTooLarge { .. } => "k-too-large",
            AnalyticsError::UnknownTemplate(_) => "unknown-template",
            AnalyticsError::UnknownAlgorithm(_) => "unknown-algorithm",
            AnalyticsError::UnknownResult(_) => "unknown-result",
            AnalyticsError::UnknownUser(_) => "unknown-user",
            AnalyticsError::Store(e) => e.code(),
        }
    }
}

fn malformed(msg: impl Into<String>) -> AnalyticsError {
    AnalyticsError::MalformedTree(msg.into())
}

// -- query AST --------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryTarget {
    Users,
    Series,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum FieldKind {
    Text,
    Number,
    Time,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Arity {
    One,
    Many,
}

const USER_FIELDS: &[(&str, FieldKind, Arity)] = &[
    ("user_id", FieldKind::Text, Arity::One),
    ("gamer_type", FieldKind::Text, Arity::Many),
    ("group", FieldKind::Text, Arity::Many),
    ("preference", FieldKind::Text, Arity::Many),
    ("activity_location", FieldKind::Text, Arity::Many),
];

const SERIES_FIELDS: &[(&str, FieldKind, Arity)] = &[
    ("sensor_id", FieldKind::Text, Arity::One),
    ("attribute", FieldKind::Text, Arity::One),
    ("unit", FieldKind::Text, Arity::One),
    ("quality", FieldKind::Text, Arity::One),
    ("space", FieldKind::Text, Arity::One),
    ("timestamp", FieldKind::Time, Arity::One),
    ("value", FieldKind::Number, Arity::One),
];

impl QueryTarget {
    /// Kind of a declared field. Users also accept `demographic.<key>` (text)
    /// and `action_count.<badge>` (number).
    fn field_kind(self, field: &str) -> Option<FieldKind> {
        match self {
            QueryTarget::Users => USER_FIELDS.iter().find(|(f, ..)| *f == field).map(|(_, k, _)| *k).or_else(|| {
                if field.strip_prefix("demographic.").is_some_and(|k| !k.is_empty()) {
                    Some(FieldKind::Text)
                } else if field.strip_prefix("action_count.").is_some_and(|k| !k.is_empty()) {
                    Some(FieldKind::Number)
                } else {
                    None
                }
            }),
            QueryTarget::Series => SERIES_FIELDS.iter().find(|(f, ..)| *f == field).map(|(_, k, _)| *k),
        }
    }

    pub fn default_projection(self) -> Vec<String> {
        match self {
            QueryTarget::Users => vec!["user_id".into()],
            QueryTarget::Series => ["sensor_id", "attribute", "timestamp", "value"].into_iter().map(String::from).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Leaf {
    pub field: String,
    pub op: Comparator,
    pub value: Scalar,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Predicate {
    And(Vec<Predicate>),
    Or(Vec<Predicate>),
    Leaf(Leaf),
}

impl Predicate {
    pub fn leaf(field: &str, op: Comparator, value: impl Into<Scalar>) -> Self {
        Predicate::Leaf(Leaf { field: field.to_owned(), op, value: value.into() })
    }

    pub fn depth(&self) -> usize {
        match self {
            Predicate::Leaf(_) => 1,
            Predicate::And(c) | Predicate::Or(c) => 1 + c.iter().map(Predicate::depth).max().unwrap_or(0),
        }
    }

    fn to_canonical(&self) -> Value {
        match self {
            Predicate::Leaf(l) => {
                let mut m = Map::new();
                m.insert("field".into(), Value::String(l.field.clone()));
                m.insert("op".into(), Value::String(l.op.symbol().into()));
                m.insert("value".into(), serde_json::to_value(&l.value).expect("scalar serializes"));
                Value::Object(m)
            }
            Predicate::And(c) | Predicate::Or(c) => {
                let key = if matches!(self, Predicate::And(_)) { "and" } else { "or" };
                let mut children: Vec<(String, Value)> = c
                    .iter()
                    .map(|p| {
                        let v = p.to_canonical();
                        (v.to_string(), v)
                    })
                    .collect();
                children.sort_by(|a, b| a.0.cmp(&b.0));
                json!({ key: children.into_iter().map(|(_, v)| v).collect::<Vec<_>>() })
            }
        }
    }

    fn from_value(v: &Value, depth: usize) -> Result<Self, AnalyticsError> {
        if depth > MAX_QUERY_DEPTH {
            return Err(malformed(format!("tree deeper than {MAX_QUERY_DEPTH}")));
        }
        let obj = v.as_object().ok_or_else(|| malformed("predicate must be an object"))?;
        let group = |key: &str| -> Result<Option<Vec<Predicate>>, AnalyticsError> {
            let Some(children) = obj.get(key) else { return Ok(None) };
            if obj.len() != 1 {
                return Err(malformed(format!("`{key}` node has extra keys")));
            }
            let arr = children.as_array().ok_or_else(|| malformed(format!("`{key}` expects an array")))?;
            let mut out: Vec<Predicate> = arr.iter().map(|c| Predicate::from_value(c, depth + 1)).collect::<Result<_, _>>()?;
            out.sort_by_cached_key(|p| p.to_canonical().to_string());
            Ok(Some(out))
        };
        if let Some(c) = group("and")? {
            return Ok(Predicate::And(c));
        }
        if let Some(c) = group("or")? {
            return Ok(Predicate::Or(c));
        }
        let keys: BTreeSet<&str> = obj.keys().map(String::as_str).collect();
        if keys != BTreeSet::from(["field", "op", "value"]) {
            return Err(malformed(format!("leaf keys must be field, op, value; found {keys:?}")));
        }
        let field = obj["field"].as_str().ok_or_else(|| malformed("`field` must be a string"))?;
        let op: Comparator = obj["op"].as_str().ok_or_else(|| malformed("`op` must be a string"))?.parse().map_err(malformed)?;
        let value: Scalar = match &obj["value"] {
            Value::Number(n) => Scalar::Number(n.as_f64().ok_or_else(|| malformed("number out of range"))?),
            Value::String(s) => Scalar::Text(s.clone()),
            Value::Bool(b) => Scalar::Bool(*b),
            other => return Err(malformed(format!("unsupported literal {other}"))),
        };
        Ok(Predicate::Leaf(Leaf { field: field.to_owned(), op, value }))
    }

    fn check(&self, target: QueryTarget) -> Result<(), AnalyticsError> {
        match self {
            Predicate::And(c) | Predicate::Or(c) => c.iter().try_for_each(|p| p.check(target)),
            Predicate::Leaf(l) => {
                let kind = target.field_kind(&l.field).ok_or_else(|| AnalyticsError::UnknownField(l.field.clone()))?;
                let ok = match (kind, &l.value) {
                    (FieldKind::Number, Scalar::Number(_)) => true,
                    (FieldKind::Text, Scalar::Text(_)) => true,
                    (FieldKind::Time, Scalar::Text(s)) => Timestamp::parse_rfc3339(s).is_some(),
                    _ => false,
                };
                if ok {
                    Ok(())
                } else {
                    Err(malformed(format!("literal {} does not fit field `{}`", l.value, l.field)))
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeRange {
    pub from: Timestamp,
    pub to: Timestamp,
}

impl TimeRange {
    pub fn new(from: Timestamp, to: Timestamp) -> Self {
        TimeRange { from, to }
    }

    pub fn len(&self) -> Span {
        self.to - self.from
    }

    pub fn is_empty(&self) -> bool {
        self.to <= self.from
    }

    pub fn previous(&self) -> TimeRange {
        TimeRange { from: self.from - self.len(), to: self.from }
    }
}

/// Parsed query. Constructed only through [`QueryAst::parse`] or
/// [`QueryAst::new`], so the predicate is always in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryAst {
    pub target: QueryTarget,
    pub predicate: Option<Predicate>,
    pub range: Option<TimeRange>,
    pub projection: Vec<String>,
}

impl QueryAst {
    pub fn new(target: QueryTarget, predicate: Option<Predicate>, range: Option<TimeRange>, projection: Vec<String>) -> Result<Self, AnalyticsError> {
        let draft = QueryAst { target, predicate, range, projection };
        Self::from_value(&draft.to_value_unchecked())
    }

    pub fn users(predicate: Option<Predicate>) -> Result<Self, AnalyticsError> {
        Self::new(QueryTarget::Users, predicate, None, Vec::new())
    }

    pub fn series(predicate: Option<Predicate>, range: TimeRange) -> Result<Self, AnalyticsError> {
        Self::new(QueryTarget::Series, predicate, Some(range), Vec::new())
    }

    fn to_value_unchecked(&self) -> Value {
        let mut m = Map::new();
        m.insert("predicate".into(), self.predicate.as_ref().map_or(Value::Null, Predicate::to_canonical));
        m.insert("projection".into(), json!(self.projection));
        m.insert(
            "range".into(),
            self.range.map_or(Value::Null, |r| json!({ "from": r.from.to_rfc3339(), "to": r.to.to_rfc3339() })),
        );
        m.insert("target".into(), serde_json::to_value(self.target).expect("target serializes"));
        Value::Object(m)
    }

    /// Canonical JSON: keys sorted, children of each AND/OR node sorted by
    /// their own canonical text, projection in the given order.
    pub fn to_value(&self) -> Value {
        self.to_value_unchecked()
    }

    pub fn to_canonical_string(&self) -> String {
        self.to_value().to_string()
    }

    pub fn parse(text: &str) -> Result<Self, AnalyticsError> {
        let v: Value = serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;
        Self::from_value(&v)
    }

    pub fn from_value(v: &Value) -> Result<Self, AnalyticsError> {
        let obj = v.as_object().ok_or_else(|| malformed("query must be an object"))?;
        if let Some(k) = obj.keys().find(|k| !["target", "predicate", "range", "projection"].contains(&k.as_str())) {
            return Err(malformed(format!("unexpected key `{k}`")));
        }
        let target: QueryTarget = serde_json::from_value(obj.get("target").cloned().unwrap_or(Value::Null))
            .map_err(|_| malformed("`target` must be \"users\" or \"series\""))?;
        let predicate = match obj.get("predicate") {
            None | Some(Value::Null) => None,
            Some(p) => Some(Predicate::from_value(p, 1)?),
        };
        if let Some(p) = &predicate {
            p.check(target)?;
        }
        let range = match obj.get("range") {
            None | Some(Value::Null) => None,
            Some(r) => {
                let r: TimeRange = serde_json::from_value(r.clone()).map_err(|e| malformed(format!("range: {e}")))?;
                if r.is_empty() {
                    return Err(malformed("range must have from < to"));
                }
                Some(r)
            }
        };
        match (target, range) {
            (QueryTarget::Series, None) => return Err(malformed("series queries need a range")),
            (QueryTarget::Users, Some(_)) => return Err(malformed("user queries take no range")),
            _ => {}
        }
        let projection: Vec<String> = match obj.get("projection") {
            None | Some(Value::Null) => Vec::new(),
            Some(p) => serde_json::from_value(p.clone()).map_err(|_| malformed("`projection` must be a list of field names"))?,
        };
        for f in &projection {
            if target.field_kind(f).is_none() {
                return Err(AnalyticsError::UnknownField(f.clone()));
            }
        }
        Ok(QueryAst { target, predicate, range, projection })
    }

    pub fn effective_projection(&self) -> Vec<String> {
        if self.projection.is_empty() {
            self.target.default_projection()
        } else {
            self.projection.clone()
        }
    }
}

impl fmt::Display for QueryAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_canonical_string())
    }
}

impl Serialize for QueryAst {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_value().serialize(s)
    }
}

impl<'de> Deserialize<'de> for QueryAst {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        QueryAst::from_value(&Value::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

/// A row as seen by predicates: each field maps to one or more values.
pub type Row = BTreeMap<String, Vec<Scalar>>;

/// Evaluates a predicate against a row. Multi-valued fields hold when any of
/// their values satisfies the leaf.
pub fn eval_predicate(p: &Predicate, row: &Row) -> bool {
    match p {
        Predicate::And(c) => c.iter().all(|p| eval_predicate(p, row)),
        Predicate::Or(c) => c.iter().any(|p| eval_predicate(p, row)),
        Predicate::Leaf(l) => {
            let literal = match (&l.field[..], &l.value) {
                ("timestamp", Scalar::Text(s)) => match Timestamp::parse_rfc3339(s) {
                    Some(t) => Scalar::Number(t.as_millis() as f64),
                    None => return false,
                },
                ("gamer_type", Scalar::Text(s)) => Scalar::Text(GamerType::from_group(s).map_or_else(|| s.clone(), |g| g.name().to_owned())),
                _ => l.value.clone(),
            };
            row.get(&l.field).is_some_and(|vals| vals.iter().any(|v| l.op.eval(v, &literal)))
        }
    }
}

pub fn user_row(u: &UserProfile) -> Row {
    let text = |s: &str| Scalar::Text(s.to_owned());
    let mut row = Row::new();
    row.insert("user_id".into(), vec![text(&u.user_id)]);
    row.insert("gamer_type".into(), u.gamer_types().into_iter().map(|g| text(g.name())).collect());
    row.insert("group".into(), u.groups().iter().map(|g| text(g)).collect());
    row.insert("preference".into(), u.preferences.iter().map(|p| text(p)).collect());
    row.insert("activity_location".into(), u.activity_locations.iter().map(|p| text(p)).collect());
    for (k, v) in &u.demographics {
        row.insert(format!("demographic.{k}"), vec![text(v)]);
    }
    for (k, v) in &u.action_counters {
        row.insert(format!("action_count.{k}"), vec![Scalar::Number(*v as f64)]);
    }
    row
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "target", rename_all = "lowercase")]
pub enum QueryResult {
    Users { user_ids: Vec<String> },
    Series { columns: Vec<String>, rows: Vec<Vec<Value>> },
}

impl QueryResult {
    pub fn len(&self) -> usize {
        match self {
            QueryResult::Users { user_ids } => user_ids.len(),
            QueryResult::Series { rows, .. } => rows.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

// -- k-means -------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    pub k: usize,
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Inertia after each assignment step.
    pub inertia_history: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
}

impl KMeansParams {
    pub fn new(k: usize, seed: u64) -> Self {
        KMeansParams { k, seed, max_iter: 100, tol: 1e-6 }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn check_points(points: &[Vec<f64>], k: usize) -> Result<usize, AnalyticsError> {
    if k == 0 {
        return Err(AnalyticsError::InvalidConfig("k must be at least 1".into()));
    }
    if points.len() < k {
        return Err(AnalyticsError::KTooLarge { k, n: points.len() });
    }
    let dim = points[0].len();
    if let Some((index, p)) = points.iter().enumerate().find(|(_, p)| p.len() != dim) {
        return Err(AnalyticsError::DimensionMismatch { index, expected: dim, found: p.len() });
    }
    Ok(dim)
}

fn seed_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = d2.iter().rposition(|d| *d > 0.0).unwrap_or(0);
            for (i, d) in d2.iter().enumerate() {
                if *d > 0.0 && target < *d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..points.len())
        };
        centroids.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

/// Lloyd iterations from seeded k-means++ initialisation.
pub fn kmeans(points: &[Vec<f64>], params: KMeansParams) -> Result<ClusterResult, AnalyticsError> {
    let dim = check_points(points, params.k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut centroids = seed_plus_plus(points, params.k, &mut rng);
    let mut history = Vec::new();
    let mut assignments = vec![0; points.len()];
    let mut iterations = 0;
    loop {
        let mut inertia = 0.0;
        for (a, p) in assignments.iter_mut().zip(points) {
            let (i, d) = nearest(p, &centroids);
            *a = i;
            inertia += d;
        }
        history.push(inertia);
        if iterations >= params.max_iter {
            break;
        }
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; params.k];
        let mut counts = vec![0usize; params.k];
        for (a, p) in assignments.iter().zip(points) {
            counts[*a] += 1;
            sums[*a].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        let mut shift: f64 = 0.0;
        for c in 0..params.k {
            if counts[c] == 0 {
                continue;
            }
            let next: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(sq_dist(&next, &centroids[c]).sqrt());
            centroids[c] = next;
        }
        if shift < params.tol {
            let mut inertia = 0.0;
            for (a, p) in assignments.iter_mut().zip(points) {
                let (i, d) = nearest(p, &centroids);
                *a = i;
                inertia += d;
            }
            history.push(inertia);
            break;
        }
    }
    let inertia = *history.last().expect("at least one assignment step");
    Ok(ClusterResult { k: params.k, assignments, centroids, inertia, iterations, seed: params.seed, inertia_history: history })
}

/// Best of `restarts` runs seeded `seed, seed + 1, …`; ties keep the earliest.
pub fn kmeans_restarts(points: &[Vec<f64>], params: KMeansParams, restarts: usize) -> Result<ClusterResult, AnalyticsError> {
    let mut best: Option<ClusterResult> = None;
    for r in 0..restarts.max(1) {
        let run = kmeans(points, KMeansParams { seed: params.seed.wrapping_add(r as u64), ..params })?;
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one run"))
}

/// Per-column z-scores; constant columns are only centred.
pub fn standardize(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let Some(first) = points.first() else { return Vec::new() };
    let n = points.len() as f64;
    let dim = first.len();
    let mut out = points.to_vec();
    for j in 0..dim {
        let mean = points.iter().map(|p| p[j]).sum::<f64>() / n;
        let var = points.iter().map(|p| (p[j] - mean).powi(2)).sum::<f64>() / n;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        out.iter_mut().for_each(|p| p[j] = (p[j] - mean) / sd);
    }
    out
}

// -- summary statistics -----------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub sum: f64,
    /// Population standard deviation.
    pub std: Option<f64>,
}

pub fn summarize(values: &[f64]) -> Summary {
    if values.is_empty() {
        return Summary { count: 0, mean: None, min: None, max: None, sum: 0.0, std: None };
    }
    let n = values.len() as f64;
    let sum: f64 = values.iter().sum();
    let mean = sum / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Summary {
        count: values.len(),
        mean: Some(mean),
        min: values.iter().copied().reduce(f64::min),
        max: values.iter().copied().reduce(f64::max),
        sum,
        std: Some(var.sqrt()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Effect {
    Positive,
    Negative,
    Neutral,
}

/// Classifies a relative consumption change: a drop beyond `threshold` is a
/// positive effect, a rise beyond it negative.
pub fn classify_effect(delta: f64, threshold: f64) -> Effect {
    if delta < -threshold {
        Effect::Positive
    } else if delta > threshold {
        Effect::Negative
    } else {
        Effect::Neutral
    }
}

/// `(current − previous) / previous`, absent without a usable baseline.
pub fn relative_delta(current: f64, previous: f64) -> Option<f64> {
    (previous != 0.0 && previous.is_finite() && current.is_finite()).then(|| (current - previous) / previous)
}

// -- algorithm registry -------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub enum OptionKind {
    Integer { min: i64, max: i64 },
    Number { min: f64, max: f64 },
    Bool,
    Timestamp,
    Choice(&'static [&'static str]),
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptionSpec {
    pub name: &'static str,
    pub kind: OptionKind,
    /// `Null` marks an optional setting with no default.
    pub default: Value,
}

impl OptionSpec {
    fn accepts(&self, v: &Value) -> bool {
        if v.is_null() {
            return self.default.is_null();
        }
        match &self.kind {
            OptionKind::Integer { min, max } => v.as_i64().is_some_and(|i| (*min..=*max).contains(&i)),
            OptionKind::Number { min, max } => v.as_f64().is_some_and(|x| x >= *min && x <= *max),
            OptionKind::Bool => v.is_boolean(),
            OptionKind::Timestamp => v.as_str().and_then(Timestamp::parse_rfc3339).is_some(),
            OptionKind::Choice(opts) => v.as_str().is_some_and(|s| opts.contains(&s)),
        }
    }
}

/// Resolves `layers` (later wins) over the schema defaults and validates.
pub fn resolve_config(schema: &[OptionSpec], layers: &[&Map<String, Value>]) -> Result<Map<String, Value>, AnalyticsError> {
    let mut out: Map<String, Value> = schema.iter().map(|o| (o.name.to_owned(), o.default.clone())).collect();
    for layer in layers {
        for (k, v) in layer.iter() {
            if !out.contains_key(k) {
                return Err(AnalyticsError::InvalidConfig(format!("unknown option `{k}`")));
            }
            out.insert(k.clone(), v.clone());
        }
    }
    for o in schema {
        if !o.accepts(&out[o.name]) {
            return Err(AnalyticsError::InvalidConfig(format!("option `{}` rejects {}", o.name, out[o.name])));
        }
    }
    Ok(out)
}

/// Tabular input handed to an algorithm.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnalysisInput {
    pub ids: Vec<String>,
    pub columns: Vec<String>,
    pub points: Vec<Vec<f64>>,
    pub timestamps: Vec<Option<Timestamp>>,
}

impl AnalysisInput {
    fn digest(&self, hasher: &mut Sha256) {
        hasher.update(self.columns.join("\u{1f}"));
        for ((id, p), t) in self.ids.iter().zip(&self.points).zip(&self.timestamps) {
            hasher.update(id.as_bytes());
            hasher.update(t.map_or(i64::MIN, |t| t.as_millis()).to_le_bytes());
            p.iter().for_each(|x| hasher.update(x.to_bits().to_le_bytes()));
        }
    }
}

pub trait AnalysisAlgorithm: Send + Sync {
    fn name(&self) -> &'static str;
    fn schema(&self) -> Vec<OptionSpec>;
    fn run(&self, input: &AnalysisInput, config: &Map<String, Value>) -> Result<Value, AnalyticsError>;
}

fn opt_u64(config: &Map<String, Value>, key: &str) -> u64 {
    config.get(key).and_then(Value::as_u64).unwrap_or(0)
}

pub struct KMeansAlgorithm;

impl AnalysisAlgorithm for KMeansAlgorithm {
    fn name(&self) -> &'static str {
        "kmeans"
    }

    fn schema(&self) -> Vec<OptionSpec> {
        vec![
            OptionSpec { name: "k", kind: OptionKind::Integer { min: 1, max: 1_000 }, default: json!(2) },
            OptionSpec { name: "seed", kind: OptionKind::Integer { min: 0, max: i64::MAX }, default: json!(0) },
            OptionSpec { name: "max_iter", kind: OptionKind::Integer { min: 1, max: 10_000 }, default: json!(100) },
            OptionSpec { name: "tol", kind: OptionKind::Number { min: 0.0, max: 1.0 }, default: json!(1e-6) },
            OptionSpec { name: "restarts", kind: OptionKind::Integer { min: 1, max: 100 }, default: json!(1) },
            OptionSpec { name: "standardize", kind: OptionKind::Bool, default: json!(true) },
        ]
    }

    fn run(&self, input: &AnalysisInput, config: &Map<String, Value>) -> Result<Value, AnalyticsError> {
        let params = KMeansParams {
            k: opt_u64(config, "k") as usize,
            seed: opt_u64(config, "seed"),
            max_iter: opt_u64(config, "max_iter") as usize,
            tol: config["tol"].as_f64().unwrap_or(1e-6),
        };
        let space = if config["standardize"].as_bool().unwrap_or(true) { standardize(&input.points) } else { input.points.clone() };
        let result = kmeans_restarts(&space, params, opt_u64(config, "restarts") as usize)?;
        let dim = input.columns.len();
        let mut centroids = vec![vec![0.0; dim]; result.k];
        let mut counts = vec![0usize; result.k];
        for (a, p) in result.assignments.iter().zip(&input.points) {
            counts[*a] += 1;
            centroids[*a].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            if *n > 0 {
                c.iter_mut().for_each(|x| *x /= *n as f64);
            }
        }
        let assignments: Map<String, Value> = input.ids.iter().zip(&result.assignments).map(|(id, a)| (id.clone(), json!(a))).collect();
        Ok(json!({
            "k": result.k,
            "columns": input.columns,
            "assignments": assignments,
            "cluster_sizes": counts,
            "centroids": centroids,
            "inertia": result.inertia,
            "iterations": result.iterations,
            "seed": result.seed,
            "inertia_history": result.inertia_history,
        }))
    }
}

pub struct SummaryStatsAlgorithm;

impl AnalysisAlgorithm for SummaryStatsAlgorithm {
    fn name(&self) -> &'static str {
        "summary-stats"
    }

    fn schema(&self) -> Vec<OptionSpec> {
        vec![
            OptionSpec { name: "split_at", kind: OptionKind::Timestamp, default: Value::Null },
            OptionSpec { name: "compare", kind: OptionKind::Choice(&["mean", "sum"]), default: json!("mean") },
            OptionSpec { name: "threshold", kind: OptionKind::Number { min: 0.0, max: 1.0 }, default: json!(0.02) },
        ]
    }

    /// Per-column statistics. With `split_at`, also the before/after
    /// comparison of the first column as a signed relative delta and its
    /// effect class; this comparison is a heuristic, not a significance test.
    fn run(&self, input: &AnalysisInput, config: &Map<String, Value>) -> Result<Value, AnalyticsError> {
        let column = |j: usize, keep: &dyn Fn(Option<Timestamp>) -> bool| -> Vec<f64> {
            input.points.iter().zip(&input.timestamps).filter(|(_, t)| keep(**t)).map(|(p, _)| p[j]).collect()
        };
        let mut columns = Map::new();
        for (j, name) in input.columns.iter().enumerate() {
            columns.insert(name.clone(), serde_json::to_value(summarize(&column(j, &|_| true))).expect("summary serializes"));
        }
        let mut out = json!({ "count": input.points.len(), "columns": columns });
        if let Some(split) = config["split_at"].as_str().and_then(Timestamp::parse_rfc3339) {
            if input.columns.is_empty() {
                return Err(AnalyticsError::EmptyInput);
            }
            let before = summarize(&column(0, &|t| t.is_some_and(|t| t < split)));
            let after = summarize(&column(0, &|t| t.is_some_and(|t| t >= split)));
            let pick = |s: &Summary| if config["compare"] == "sum" { (s.count > 0).then_some(s.sum) } else { s.mean };
            let threshold = config["threshold"].as_f64().unwrap_or(0.02);
            let delta = pick(&after).zip(pick(&before)).and_then(|(a, b)| relative_delta(a, b));
            out["before"] = serde_json::to_value(before).expect("summary serializes");
            out["after"] = serde_json::to_value(after).expect("summary serializes");
            out["delta"] = json!(delta);
            out["effect"] = json!(delta.map(|d| classify_effect(d, threshold)));
        }
        Ok(out)
    }
}

#[derive(Clone, Default)]
pub struct AlgorithmRegistry {
    algorithms: BTreeMap<&'static str, Arc<dyn AnalysisAlgorithm>>,
}

impl fmt::Debug for AlgorithmRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.algorithms.keys()).finish()
    }
}

impl AlgorithmRegistry {
    pub fn with_builtins() -> Self {
        let mut r = AlgorithmRegistry::default();
        r.register(Arc::new(KMeansAlgorithm));
        r.register(Arc::new(SummaryStatsAlgorithm));
        r
    }

    pub fn register(&mut self, alg: Arc<dyn AnalysisAlgorithm>) {
        self.algorithms.insert(alg.name(), alg);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn AnalysisAlgorithm>, AnalyticsError> {
        self.algorithms.get(name).cloned().ok_or_else(|| AnalyticsError::UnknownAlgorithm(name.to_owned()))
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.algorithms.keys().copied().collect()
    }
}

// -- templates and the analytics service ----------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisTemplate {
    #[serde(default)]
    pub id: String,
    pub algorithm: String,
    #[serde(default)]
    pub config: Map<String, Value>,
    pub input: QueryAst,
    /// Period for behavioural features of user inputs.
    #[serde(default)]
    pub period: Option<TimeRange>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Consumption {
    pub total: f64,
    pub samples: usize,
    pub per_space: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisResult {
    pub id: String,
    pub template_id: String,
    pub algorithm: String,
    pub config: Map<String, Value>,
    pub input_size: usize,
    pub payload: Value,
}

/// Behavioural feature names, in vector order.
pub const FEATURES: [&str; 5] = ["recommendations_received", "acceptance_rate", "validation_rate", "mean_response_latency_s", "consumption_delta"];

#[derive(Clone, Debug)]
pub struct AnalyticsConfig {
    /// Attribute summed for per-user consumption deltas.
    pub energy_attribute: String,
}

impl Default for AnalyticsConfig {
    fn default() -> Self {
        AnalyticsConfig { energy_attribute: "energy".into() }
    }
}

pub struct Analytics {
    config: AnalyticsConfig,
    broker: Arc<ContextBroker>,
    store: Arc<TimeSeriesStore>,
    recommender: Arc<Recommender>,
    fusion: Arc<FusionEngine>,
    registry: AlgorithmRegistry,
    templates: RwLock<BTreeMap<String, AnalysisTemplate>>,
    results: RwLock<BTreeMap<String, (AnalysisResult, String)>>,
    next_template: RwLock<u64>,
}

impl fmt::Debug for Analytics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Analytics").field("registry", &self.registry).finish()
    }
}

impl Analytics {
    pub fn new(
        broker: Arc<ContextBroker>,
        store: Arc<TimeSeriesStore>,
        recommender: Arc<Recommender>,
        fusion: Arc<FusionEngine>,
        config: AnalyticsConfig,
    ) -> Self {
        Self::with_registry(broker, store, recommender, fusion, config, AlgorithmRegistry::with_builtins())
    }

    pub fn with_registry(
        broker: Arc<ContextBroker>,
        store: Arc<TimeSeriesStore>,
        recommender: Arc<Recommender>,
        fusion: Arc<FusionEngine>,
        config: AnalyticsConfig,
        registry: AlgorithmRegistry,
    ) -> Self {
        Analytics {
            config,
            broker,
            store,
            recommender,
            fusion,
            registry,
            templates: RwLock::new(BTreeMap::new()),
            results: RwLock::new(BTreeMap::new()),
            next_template: RwLock::new(0),
        }
    }

    pub fn registry(&self) -> &AlgorithmRegistry {
        &self.registry
    }

    fn space_of(&self, sensor: &str) -> Option<String> {
        self.broker.get_entity(sensor).ok().and_then(|r| r.located_in().map(str::to_owned))
    }

    pub fn execute_query(&self, ast: &QueryAst) -> Result<QueryResult, AnalyticsError> {
        match ast.target {
            QueryTarget::Users => {
                let user_ids = self
                    .recommender
                    .users()
                    .iter()
                    .filter(|u| ast.predicate.as_ref().is_none_or(|p| eval_predicate(p, &user_row(u))))
                    .map(|u| u.user_id.clone())
                    .collect();
                Ok(QueryResult::Users { user_ids })
            }
            QueryTarget::Series => {
                let range = ast.range.ok_or_else(|| malformed("series queries need a range"))?;
                let columns = ast.effective_projection();
                let mut rows = Vec::new();
                for key in self.store.series_keys() {
                    let space = self.space_of(&key.sensor_id);
                    for m in self.store.query_raw(&SeriesQuery::raw(&key, range.from, range.to))? {
                        let text = |s: &str| vec![Scalar::Text(s.to_owned())];
                        let mut row = Row::new();
                        row.insert("sensor_id".into(), text(&m.sensor_id));
                        row.insert("attribute".into(), text(&m.attribute));
                        row.insert("unit".into(), text(&m.unit));
                        row.insert("quality".into(), text(m.quality.as_str()));
                        row.insert("space".into(), space.as_deref().map(text).unwrap_or_default());
                        row.insert("timestamp".into(), vec![Scalar::Number(m.observed_at.as_millis() as f64)]);
                        row.insert("value".into(), vec![Scalar::Number(m.value)]);
                        if ast.predicate.as_ref().is_some_and(|p| !eval_predicate(p, &row)) {
                            continue;
                        }
                        rows.push(
                            columns
                                .iter()
                                .map(|c| match c.as_str() {
                                    "timestamp" => json!(m.observed_at.to_rfc3339()),
                                    "value" => json!(m.value),
                                    "space" => json!(space),
                                    other => json!(row[other][0].to_string()),
                                })
                                .collect(),
                        );
                    }
                }
                Ok(QueryResult::Series { columns, rows })
            }
        }
    }

    /// Fixed-order features for `user_id` over `period`; see [`FEATURES`].
    /// Without data the rates are 0, the latency is the period length and the
    /// consumption delta is 0.
    pub fn behavioural_features(&self, user_id: &str, period: TimeRange) -> Result<Vec<f64>, AnalyticsError> {
        let user = self.recommender.user(user_id).map_err(|_| AnalyticsError::UnknownUser(user_id.to_owned()))?;
        let recs: Vec<_> = self
            .recommender
            .recommendations_for(user_id, None)
            .into_iter()
            .filter(|r| r.delivered_at.is_some_and(|t| t >= period.from && t < period.to))
            .collect();
        let delivered = recs.len();
        let accepted = recs
            .iter()
            .filter(|r| {
                matches!(r.state, RecommendationState::Accepted | RecommendationState::Validated)
                    || r.feedback.as_ref().is_some_and(|f| f.response != FeedbackResponse::Reject)
            })
            .count();
        let tasks = recs.iter().filter(|r| r.kind == RecommendationKind::Task).count();
        let validated = recs.iter().filter(|r| r.state == RecommendationState::Validated).count();
        let latencies: Vec<f64> = recs
            .iter()
            .filter_map(|r| Some((r.feedback.as_ref()?.at? - r.delivered_at?).as_secs_f64()))
            .collect();
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let latency = if latencies.is_empty() { period.len().as_secs_f64() } else { latencies.iter().sum::<f64>() / latencies.len() as f64 };
        Ok(vec![delivered as f64, ratio(accepted, delivered), ratio(validated, tasks), latency, self.consumption_delta(&user, period)?.unwrap_or(0.0)])
    }

    /// Energy use in `spaces` during `range`: the sum of `attribute` over
    /// series whose sensor is one of the spaces or located in one. Samples
    /// dropped as outliers (stored `Raw`) are excluded.
    pub fn consumption(&self, attribute: &str, spaces: &BTreeSet<String>, range: TimeRange) -> Result<Consumption, AnalyticsError> {
        let mut out = Consumption { per_space: spaces.iter().map(|s| (s.clone(), 0.0)).collect(), ..Default::default() };
        for key in self.store.series_keys().into_iter().filter(|k| k.attribute == attribute) {
            let space = if spaces.contains(&key.sensor_id) { Some(key.sensor_id.clone()) } else { self.space_of(&key.sensor_id) };
            let Some(space) = space.filter(|s| spaces.contains(s)) else { continue };
            for m in self.store.query_raw(&SeriesQuery::raw(&key, range.from, range.to))? {
                if m.quality == Quality::Raw {
                    continue;
                }
                out.total += m.value;
                out.samples += 1;
                *out.per_space.entry(space.clone()).or_default() += m.value;
            }
        }
        Ok(out)
    }

    fn consumption_delta(&self, user: &UserProfile, period: TimeRange) -> Result<Option<f64>, AnalyticsError> {
        if user.activity_locations.is_empty() {
            return Ok(None);
        }
        let attr = &self.config.energy_attribute;
        let current = self.consumption(attr, &user.activity_locations, period)?;
        let previous = self.consumption(attr, &user.activity_locations, period.previous())?;
        Ok(relative_delta(current.total, previous.total))
    }

    pub fn register_template(&self, mut template: AnalysisTemplate) -> Result<String, AnalyticsError> {
        let alg = self.registry.get(&template.algorithm)?;
        resolve_config(&alg.schema(), &[&template.config])?;
        if template.input.target == QueryTarget::Users && template.period.is_none() {
            return Err(AnalyticsError::InvalidConfig("user inputs need a feature period".into()));
        }
        let mut n = self.next_template.write();
        if template.id.is_empty() {
            *n += 1;
            template.id = format!("template-{n}");
        }
        let id = template.id.clone();
        self.templates.write().insert(id.clone(), template);
        Ok(id)
    }

    pub fn template(&self, id: &str) -> Result<AnalysisTemplate, AnalyticsError> {
        self.templates.read().get(id).cloned().ok_or_else(|| AnalyticsError::UnknownTemplate(id.to_owned()))
    }

    pub fn templates(&self) -> Vec<AnalysisTemplate> {
        self.templates.read().values().cloned().collect()
    }

    fn gather_input(&self, template: &AnalysisTemplate) -> Result<AnalysisInput, AnalyticsError> {
        match self.execute_query(&template.input)? {
            QueryResult::Users { user_ids } => {
                let period = template.period.ok_or_else(|| AnalyticsError::InvalidConfig("user inputs need a feature period".into()))?;
                let points = user_ids.iter().map(|u| self.behavioural_features(u, period)).collect::<Result<Vec<_>, _>>()?;
                Ok(AnalysisInput {
                    timestamps: vec![None; user_ids.len()],
                    ids: user_ids,
                    columns: FEATURES.iter().map(|s| s.to_string()).collect(),
                    points,
                })
            }
            QueryResult::Series { .. } => {
                let range = template.input.range.expect("series queries carry a range");
                let full = QueryAst { projection: Vec::new(), ..template.input.clone() };
                let QueryResult::Series { rows, .. } = self.execute_query(&full)? else { unreachable!("series target") };
                let mut input = AnalysisInput { columns: vec!["value".into()], ..Default::default() };
                for row in rows {
                    let (sensor, attr, ts, value) = (&row[0], &row[1], &row[2], &row[3]);
                    let ts = ts.as_str().and_then(Timestamp::parse_rfc3339);
                    input.ids.push(format!("{}/{}@{}", sensor.as_str().unwrap_or(""), attr.as_str().unwrap_or(""), ts.map_or(range.from, |t| t).as_millis()));
                    input.points.push(vec![value.as_f64().unwrap_or(f64::NAN)]);
                    input.timestamps.push(ts);
                }
                Ok(input)
            }
        }
    }

    /// Runs a template; identical (template, config, data) give identical
    /// results. The result is also stored as a JSON-LD document.
    pub fn run_template(&self, template_id: &str, overrides: &Map<String, Value>) -> Result<AnalysisResult, AnalyticsError> {
        let template = self.template(template_id)?;
        let alg = self.registry.get(&template.algorithm)?;
        let config = resolve_config(&alg.schema(), &[&template.config, overrides])?;
        let input = self.gather_input(&template)?;
        let payload = alg.run(&input, &config)?;
        let mut hasher = Sha256::new();
        hasher.update(template.id.as_bytes());
        hasher.update(template.algorithm.as_bytes());
        hasher.update(template.input.to_canonical_string());
        hasher.update(Value::Object(config.clone()).to_string());
        input.digest(&mut hasher);
        let id = format!("ar-{}", &hex::encode(hasher.finalize())[..16]);
        let result = AnalysisResult { id: id.clone(), template_id: template.id.clone(), algorithm: template.algorithm.clone(), config, input_size: input.points.len(), payload };
        let record = SourceRecord::new(SourceKind::AnalysisResult, &id, self.broker.clock().now())
            .text("algorithm", &result.algorithm)
            .text("payload", &result.payload.to_string());
        let doc_id = self.fusion.ingest(&record).unwrap_or_else(|e| {
            tracing::warn!(result = %id, error = %e, "analysis document rejected");
            String::new()
        });
        self.results.write().insert(id, (result.clone(), doc_id));
        Ok(result)
    }

    pub fn result(&self, id: &str) -> Result<AnalysisResult, AnalyticsError> {
        self.results.read().get(id).map(|(r, _)| r.clone()).ok_or_else(|| AnalyticsError::UnknownResult(id.to_owned()))
    }

    /// Id of the JSON-LD document that stores a result.
    pub fn result_document_id(&self, id: &str) -> Result<String, AnalyticsError> {
        self.results.read().get(id).map(|(_, d)| d.clone()).ok_or_else(|| AnalyticsError::UnknownResult(id.to_owned()))
    }
}
