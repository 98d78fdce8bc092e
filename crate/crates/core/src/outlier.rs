//! Outlier detectors and the per-series cleaner that chains them.
//!
//! Detectors are strategies registered by name. A policy lists the names to
//! run, in order; the first rejection wins.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Consistency constant turning a MAD into a standard-deviation estimate
/// for normal data.
pub const MAD_SCALE: f64 = 0.6745;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("plausible range [{lo}, {hi}] is empty")]
    EmptyRange { lo: f64, hi: f64 },
    #[error("window size {0} is below the minimum of 5")]
    WindowTooSmall(usize),
    #[error("threshold must be positive, got {0}")]
    NonPositiveThreshold(f64),
    #[error("mad epsilon must be non-negative, got {0}")]
    NegativeEpsilon(f64),
    #[error("unknown outlier detector `{0}`")]
    UnknownDetector(String),
}

impl PolicyError {
    pub fn code(&self) -> &'static str {
        match self {
            PolicyError::UnknownDetector(_) => "unknown-detector",
            _ => "invalid-policy",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutlierPolicy {
    pub plausible_range: (f64, f64),
    #[serde(default = "default_window")]
    pub window_size: usize,
    #[serde(default = "default_threshold")]
    pub zscore_threshold: f64,
    pub mad_epsilon: f64,
    #[serde(default = "default_detectors")]
    pub detectors: Vec<String>,
    /// After this many consecutive window-based rejections the window is
    /// rebuilt from that run and refills as on cold start. 0 disables.
    #[serde(default = "default_reseed_after")]
    pub reseed_after: usize,
}

fn default_window() -> usize {
    20
}

fn default_threshold() -> f64 {
    3.5
}

fn default_reseed_after() -> usize {
    5
}

fn default_detectors() -> Vec<String> {
    vec![PlausibleRange::NAME.to_owned(), ModifiedZScore::NAME.to_owned()]
}

impl OutlierPolicy {
    /// Policy with the default window, threshold and detector chain; the MAD
    /// fallback band is three sensor resolutions.
    pub fn new(lo: f64, hi: f64, resolution: f64) -> Self {
        OutlierPolicy {
            plausible_range: (lo, hi),
            window_size: default_window(),
            zscore_threshold: default_threshold(),
            mad_epsilon: 3.0 * resolution,
            detectors: default_detectors(),
            reseed_after: default_reseed_after(),
        }
    }

    pub fn range_only(lo: f64, hi: f64) -> Self {
        OutlierPolicy { detectors: vec![PlausibleRange::NAME.to_owned()], ..Self::new(lo, hi, 0.0) }
    }

    /// Built-in policy per attribute kind.
    pub fn default_for(attribute: &str) -> Self {
        match attribute {
            "co2" => Self::new(0.0, 10_000.0, 1.0),
            "temperature" => Self::new(-40.0, 85.0, 0.1),
            "humidity" => Self::new(0.0, 100.0, 0.1),
            "energy" => Self::new(0.0, 1.0e6, 0.001),
            "power" => Self::new(0.0, 1.0e7, 1.0),
            "open" | "door" => Self::range_only(0.0, 1.0),
            "presence" | "occupancy" | "count" => Self::range_only(0.0, 10_000.0),
            _ => Self::range_only(f64::MIN, f64::MAX),
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let (lo, hi) = self.plausible_range;
        if !(lo < hi) {
            return Err(PolicyError::EmptyRange { lo, hi });
        }
        if self.window_size < 5 {
            return Err(PolicyError::WindowTooSmall(self.window_size));
        }
        if !(self.zscore_threshold > 0.0) {
            return Err(PolicyError::NonPositiveThreshold(self.zscore_threshold));
        }
        if !(self.mad_epsilon >= 0.0) {
            return Err(PolicyError::NegativeEpsilon(self.mad_epsilon));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "kebab-case")]
pub enum RejectReason {
    OutOfRange { lo: f64, hi: f64 },
    RobustScore { score: f64, threshold: f64 },
    FlatWindow { deviation: f64, epsilon: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Verdict {
    Accept,
    Reject(RejectReason),
}

impl Verdict {
    pub fn is_accept(&self) -> bool {
        matches!(self, Verdict::Accept)
    }

    /// Rejected by comparison with the trailing window rather than by a
    /// static bound.
    pub fn is_window_reject(&self) -> bool {
        matches!(self, Verdict::Reject(RejectReason::RobustScore { .. } | RejectReason::FlatWindow { .. }))
    }
}

pub trait OutlierDetector: Send + Sync {
    fn name(&self) -> &'static str;

    /// `window` holds the most recent accepted samples, oldest first.
    fn assess(&self, value: f64, window: &[f64], policy: &OutlierPolicy) -> Verdict;
}

/// Static bounds per attribute kind.
pub struct PlausibleRange;

impl PlausibleRange {
    pub const NAME: &'static str = "plausible-range";
}

impl OutlierDetector for PlausibleRange {
    fn name(&self) -> &'static str {
        Self::NAME
    }

    fn assess(&self, value: f64, _window: &[f64], policy: &OutlierPolicy) -> Verdict {
        let (lo, hi) = policy.plausible_range;
        if value < lo || value > hi || !value.is_finite() {
            Verdict::Reject(RejectReason::OutOfRange { lo, hi })
        } else {
            Verdict::Accept
        }
    }
}

/// Iglewicz-Hoaglin modified z-score against the trailing window. Accepts
/// everything until the window is full.
pub struct ModifiedZScore;

impl ModifiedZScore {
    pub const NAME: &'static str = "modified-zscore";
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

impl OutlierDetector for ModifiedZScore {
    fn name(&self) -> &'static str {
        Self::NAME
    }

    fn assess(&self, value: f64, window: &[f64], policy: &OutlierPolicy) -> Verdict {
        if window.len() < policy.window_size {
            return Verdict::Accept;
        }
        let mut buf = window.to_vec();
        let med = median(&mut buf);
        for v in buf.iter_mut() {
            *v = (*v - med).abs();
        }
        let mad = median(&mut buf);
        let deviation = value - med;
        if mad == 0.0 {
            if deviation.abs() > policy.mad_epsilon {
                return Verdict::Reject(RejectReason::FlatWindow { deviation, epsilon: policy.mad_epsilon });
            }
            return Verdict::Accept;
        }
        let score = MAD_SCALE * deviation / mad;
        if score.abs() > policy.zscore_threshold {
            Verdict::Reject(RejectReason::RobustScore { score, threshold: policy.zscore_threshold })
        } else {
            Verdict::Accept
        }
    }
}

#[derive(Clone)]
pub struct DetectorRegistry {
    detectors: BTreeMap<String, Arc<dyn OutlierDetector>>,
}

impl Default for DetectorRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl DetectorRegistry {
    pub fn empty() -> Self {
        DetectorRegistry { detectors: BTreeMap::new() }
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(PlausibleRange));
        r.register(Arc::new(ModifiedZScore));
        r
    }

    pub fn register(&mut self, detector: Arc<dyn OutlierDetector>) {
        self.detectors.insert(detector.name().to_owned(), detector);
    }

    pub fn get(&self, name: &str) -> Option<Arc<dyn OutlierDetector>> {
        self.detectors.get(name).cloned()
    }

    pub fn names(&self) -> Vec<&str> {
        self.detectors.keys().map(String::as_str).collect()
    }

    pub fn cleaner(&self, policy: OutlierPolicy) -> Result<SeriesCleaner, PolicyError> {
        policy.validate()?;
        let chain = policy
            .detectors
            .iter()
            .map(|n| self.get(n).ok_or_else(|| PolicyError::UnknownDetector(n.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(SeriesCleaner { window: VecDeque::with_capacity(policy.window_size), run: Vec::new(), policy, chain })
    }
}

/// Cleaning state of one (sensor, attribute) series.
pub struct SeriesCleaner {
    policy: OutlierPolicy,
    chain: Vec<Arc<dyn OutlierDetector>>,
    window: VecDeque<f64>,
    /// Consecutive window-based rejections since the last accept.
    run: Vec<f64>,
}

impl SeriesCleaner {
    pub fn policy(&self) -> &OutlierPolicy {
        &self.policy
    }

    /// Runs the detector chain without touching the window.
    pub fn assess(&self, value: f64) -> Verdict {
        let window: Vec<f64> = self.window.iter().copied().collect();
        for d in &self.chain {
            let v = d.assess(value, &window, &self.policy);
            if !v.is_accept() {
                return v;
            }
        }
        Verdict::Accept
    }

    /// Adds an accepted sample to the trailing window.
    pub fn commit(&mut self, value: f64) {
        self.run.clear();
        if self.window.len() == self.policy.window_size {
            self.window.pop_front();
        }
        self.window.push_back(value);
    }

    /// Records a rejected sample. A long enough run of window-based
    /// rejections means the level moved, so the window restarts from the run.
    /// Returns whether the window was rebuilt.
    pub fn reject(&mut self, value: f64, verdict: &Verdict) -> bool {
        if !verdict.is_window_reject() {
            return false;
        }
        self.run.push(value);
        let k = self.policy.reseed_after;
        if k == 0 || self.run.len() < k {
            return false;
        }
        let keep = self.run.len().min(self.policy.window_size);
        self.window = self.run[self.run.len() - keep..].iter().copied().collect();
        self.run.clear();
        true
    }

    pub fn window(&self) -> Vec<f64> {
        self.window.iter().copied().collect()
    }
}
