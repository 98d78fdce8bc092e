//! Scenario description read from the `--spec` JSON file.

use std::collections::{BTreeMap, BTreeSet};

use entropy_core::recommender::GamerType;
use entropy_core::{Comparator, Span, Timestamp};
use serde::{Deserialize, Serialize};

use crate::SimError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SensorKind {
    Co2,
    Temperature,
    Humidity,
    Energy,
    Door,
    Presence,
}

impl SensorKind {
    pub fn attribute(self) -> &'static str {
        match self {
            SensorKind::Co2 => "co2",
            SensorKind::Temperature => "temperature",
            SensorKind::Humidity => "humidity",
            SensorKind::Energy => "energy",
            SensorKind::Door => "open",
            SensorKind::Presence => "presence",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            SensorKind::Co2 => "ppm",
            SensorKind::Temperature => "Cel",
            SensorKind::Humidity => "%",
            SensorKind::Energy => "kWh",
            SensorKind::Door | SensorKind::Presence => "",
        }
    }

    pub fn default_period(self) -> Span {
        match self {
            SensorKind::Co2 => Span::from_mins(1),
            SensorKind::Energy => Span::from_mins(15),
            _ => Span::from_mins(5),
        }
    }

    /// Kinds whose samples may carry injected outliers.
    pub fn is_continuous(self) -> bool {
        matches!(self, SensorKind::Co2 | SensorKind::Temperature | SensorKind::Humidity | SensorKind::Energy)
    }
}

/// Half-open offset interval `[from, to)` from the scenario start.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interval {
    pub from: Span,
    pub to: Span,
}

impl Interval {
    pub fn new(from: Span, to: Span) -> Self {
        Interval { from, to }
    }

    pub fn contains(&self, offset: Span) -> bool {
        self.from <= offset && offset < self.to
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorSpec {
    pub id: String,
    pub kind: SensorKind,
    #[serde(default)]
    pub period: Option<Span>,
}

impl SensorSpec {
    pub fn new(id: &str, kind: SensorKind) -> Self {
        SensorSpec { id: id.to_owned(), kind, period: None }
    }

    pub fn period(&self) -> Span {
        self.period.unwrap_or(self.kind.default_period())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceSpec {
    pub id: String,
    #[serde(default = "default_area")]
    pub area_m2: f64,
    pub sensors: Vec<SensorSpec>,
    #[serde(default)]
    pub door_open: Vec<Interval>,
}

fn default_area() -> f64 {
    20.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OccupantSpec {
    pub user_id: String,
    pub gamer_type: GamerType,
    pub space: String,
    #[serde(default)]
    pub preferences: BTreeSet<String>,
    #[serde(default)]
    pub present: Vec<Interval>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Co2Model {
    pub baseline_ppm: f64,
    /// Initial rise rate per occupant in a room of `reference_area_m2`.
    pub rise_per_person_ppm_h: f64,
    /// Equilibrium excess per occupant in a room of `reference_area_m2`.
    pub asymptote_per_person_ppm: f64,
    pub reference_area_m2: f64,
    /// Decay time constant of a vacant room with the door shut.
    pub decay_tau: Span,
    /// Decay time constant while the door is open.
    pub door_tau: Span,
    pub noise_ppm: f64,
}

impl Default for Co2Model {
    fn default() -> Self {
        Co2Model {
            baseline_ppm: 420.0,
            rise_per_person_ppm_h: 75.0,
            asymptote_per_person_ppm: 400.0,
            reference_area_m2: 20.0,
            decay_tau: Span::from_hours(1),
            door_tau: Span::from_mins(10),
            noise_ppm: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiurnalModel {
    pub baseline: f64,
    pub amplitude: f64,
    /// Hour of day (UTC) of the sinusoid's maximum.
    pub peak_hour: f64,
    pub per_person: f64,
    pub noise: f64,
}

impl DiurnalModel {
    fn temperature() -> Self {
        DiurnalModel { baseline: 21.0, amplitude: 1.5, peak_hour: 15.0, per_person: 0.2, noise: 0.1 }
    }

    fn humidity() -> Self {
        DiurnalModel { baseline: 45.0, amplitude: 5.0, peak_hour: 6.0, per_person: 0.5, noise: 0.5 }
    }
}

impl Default for DiurnalModel {
    fn default() -> Self {
        Self::temperature()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyModel {
    pub base_kw: f64,
    pub per_person_kw: f64,
    pub noise_kwh: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        EnergyModel { base_kw: 0.4, per_person_kw: 0.15, noise_kwh: 0.005 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SignalModels {
    pub co2: Co2Model,
    pub temperature: DiurnalModel,
    pub humidity: DiurnalModel,
    pub energy: EnergyModel,
}

impl Default for SignalModels {
    fn default() -> Self {
        SignalModels {
            co2: Co2Model::default(),
            temperature: DiurnalModel::temperature(),
            humidity: DiurnalModel::humidity(),
            energy: EnergyModel::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutlierInjection {
    /// Per-sample probability on continuous sensors.
    pub rate: f64,
    /// Multiplicative spike factor range.
    pub spike: (f64, f64),
    /// Share of injected outliers that leave the plausible range instead.
    pub range_fraction: f64,
}

impl Default for OutlierInjection {
    fn default() -> Self {
        OutlierInjection { rate: 0.0, spike: (5.0, 20.0), range_fraction: 0.3 }
    }
}

/// A threshold watch whose firings the ground truth predicts, mirroring an
/// hourly last-value stream with a level trigger.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WatchSpec {
    pub sensor_id: String,
    #[serde(default = "default_watch_attribute")]
    pub attribute: String,
    #[serde(default = "default_comparator")]
    pub comparator: Comparator,
    pub threshold: f64,
    #[serde(default = "default_frequency")]
    pub frequency: Span,
    #[serde(default)]
    pub cooldown: Option<Span>,
}

fn default_watch_attribute() -> String {
    "co2".into()
}

fn default_comparator() -> Comparator {
    Comparator::Gt
}

fn default_frequency() -> Span {
    Span::from_hours(1)
}

impl WatchSpec {
    pub fn cooldown(&self) -> Span {
        self.cooldown.unwrap_or(self.frequency)
    }
}

/// Replay pacing: simulated seconds per wall second, or as fast as possible.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum Speed {
    #[default]
    Max,
    Factor(f64),
}

impl std::str::FromStr for Speed {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "max" | "inf" | "∞" => Ok(Speed::Max),
            other => match other.parse::<f64>() {
                Ok(f) if f.is_infinite() && f > 0.0 => Ok(Speed::Max),
                Ok(f) if f > 0.0 => Ok(Speed::Factor(f)),
                _ => Err(format!("speed must be a positive number or `max`, got `{s}`")),
            },
        }
    }
}

impl Serialize for Speed {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Speed::Max => s.serialize_str("max"),
            Speed::Factor(f) => s.serialize_f64(*f),
        }
    }
}

impl<'de> Deserialize<'de> for Speed {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            Number(f64),
        }
        match Raw::deserialize(d)? {
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
            Raw::Number(f) => f.to_string().parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub seed: u64,
    pub start: Timestamp,
    pub duration: Span,
    pub spaces: Vec<SpaceSpec>,
    #[serde(default)]
    pub signals: SignalModels,
    #[serde(default)]
    pub outliers: OutlierInjection,
    #[serde(default)]
    pub occupants: Vec<OccupantSpec>,
    #[serde(default)]
    pub watches: Vec<WatchSpec>,
    /// Probability that an occupant accepts a delivered recommendation.
    #[serde(default)]
    pub acceptance: BTreeMap<GamerType, f64>,
    #[serde(default)]
    pub speed: Speed,
}

impl ScenarioSpec {
    pub fn end(&self) -> Timestamp {
        self.start + self.duration
    }

    pub fn sensor(&self, id: &str) -> Option<(&SpaceSpec, &SensorSpec)> {
        self.spaces.iter().find_map(|sp| sp.sensors.iter().find(|s| s.id == id).map(|s| (sp, s)))
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidSpec(m));
        if !self.duration.is_positive() {
            return bad("duration must be positive".into());
        }
        if self.spaces.is_empty() {
            return bad("at least one space is required".into());
        }
        let mut ids = BTreeSet::new();
        for sp in &self.spaces {
            if !(sp.area_m2 > 0.0) {
                return bad(format!("space `{}` needs a positive area", sp.id));
            }
            for id in std::iter::once(&sp.id).chain(sp.sensors.iter().map(|s| &s.id)) {
                if let Err(e) = entropy_core::broker::validate_id(id) {
                    return bad(e.to_string());
                }
                if !ids.insert(id.clone()) {
                    return bad(format!("duplicate id `{id}`"));
                }
            }
            for s in &sp.sensors {
                if !s.period().is_positive() {
                    return bad(format!("sensor `{}` needs a positive period", s.id));
                }
            }
            for iv in &sp.door_open {
                if iv.to <= iv.from {
                    return bad(format!("empty door interval in `{}`", sp.id));
                }
            }
        }
        let o = &self.outliers;
        if !(0.0..=1.0).contains(&o.rate) || !(0.0..=1.0).contains(&o.range_fraction) {
            return bad("outlier rate and range_fraction must lie in [0, 1]".into());
        }
        if !(o.spike.0 > 1.0 && o.spike.0 <= o.spike.1) {
            return bad("spike factors must satisfy 1 < lo <= hi".into());
        }
        let c = &self.signals.co2;
        if !(c.reference_area_m2 > 0.0 && c.rise_per_person_ppm_h > 0.0 && c.asymptote_per_person_ppm > 0.0)
            || !c.decay_tau.is_positive()
            || !c.door_tau.is_positive()
        {
            return bad("co2 model parameters must be positive".into());
        }
        let noises = [c.noise_ppm, self.signals.temperature.noise, self.signals.humidity.noise, self.signals.energy.noise_kwh];
        if noises.iter().any(|n| !(*n >= 0.0)) {
            return bad("noise levels must be non-negative".into());
        }
        let mut users = BTreeSet::new();
        for occ in &self.occupants {
            if !users.insert(&occ.user_id) {
                return bad(format!("duplicate occupant `{}`", occ.user_id));
            }
            if !self.spaces.iter().any(|s| s.id == occ.space) {
                return bad(format!("occupant `{}` is in unknown space `{}`", occ.user_id, occ.space));
            }
            if occ.present.iter().any(|iv| iv.to <= iv.from) {
                return bad(format!("empty presence interval for `{}`", occ.user_id));
            }
        }
        for w in &self.watches {
            if self.sensor(&w.sensor_id).is_none() {
                return bad(format!("watch on unknown sensor `{}`", w.sensor_id));
            }
            if !w.frequency.is_positive() || w.cooldown().as_millis() < 0 {
                return bad("watch frequency must be positive".into());
            }
        }
        if self.acceptance.values().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("acceptance probabilities must lie in [0, 1]".into());
        }
        Ok(())
    }
}
