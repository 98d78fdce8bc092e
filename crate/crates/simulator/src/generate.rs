//! Deterministic trace generation with ground-truth labels.

use std::collections::BTreeMap;

use entropy_core::broker::{AttributeValue, EntityRecord, EntityType};
use entropy_core::outlier::OutlierPolicy;
use entropy_core::recommender::UserProfile;
use entropy_core::timeseries::Measurement;
use entropy_core::{Span, Timestamp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::model::{diurnal, energy, Co2Trajectory, SpaceTimeline};
use crate::spec::{ScenarioSpec, SensorKind, SensorSpec, SpaceSpec, WatchSpec};
use crate::SimError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutlierKind {
    Spike,
    RangeViolation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InjectedOutlier {
    /// Line of the measurement in the trace.
    pub index: usize,
    pub sensor_id: String,
    pub attribute: String,
    pub observed_at: Timestamp,
    pub value: f64,
    /// What the sensor would have reported.
    pub clean_value: f64,
    pub kind: OutlierKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Crossing {
    pub watch: usize,
    pub sensor_id: String,
    pub threshold: f64,
    pub at: Timestamp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpectedFiring {
    pub watch: usize,
    pub sensor_id: String,
    pub attribute: String,
    pub at: Timestamp,
    /// Noise-free model value of the sample the tick reads.
    pub model_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub start: Timestamp,
    pub end: Timestamp,
    pub total_events: usize,
    /// Events per `sensor_id/attribute`.
    pub counts: BTreeMap<String, usize>,
    pub outliers: Vec<InjectedOutlier>,
    pub crossings: Vec<Crossing>,
    pub expected_firings: Vec<ExpectedFiring>,
}

/// Registry content the platform needs before the trace is replayed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provision {
    pub entities: Vec<EntityRecord>,
    pub users: Vec<UserProfile>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bundle {
    pub spec: ScenarioSpec,
    pub trace: Vec<Measurement>,
    pub ground_truth: GroundTruth,
    pub provision: Provision,
}

pub fn series_label(sensor_id: &str, attribute: &str) -> String {
    format!("{sensor_id}/{attribute}")
}

struct Sample {
    m: Measurement,
    model_value: f64,
    outlier: Option<(OutlierKind, f64)>,
}

fn hour_of_day(t: Timestamp) -> f64 {
    t.as_millis().rem_euclid(86_400_000) as f64 / 3_600_000.0
}

fn noise(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sigma).expect("validated sigma").sample(rng)
}

fn sensor_samples(
    spec: &ScenarioSpec,
    space: &SpaceSpec,
    sensor: &SensorSpec,
    timeline: &SpaceTimeline,
    co2: &Co2Trajectory,
    rng: &mut ChaCha8Rng,
) -> Vec<Sample> {
    let kind = sensor.kind;
    let attr = kind.attribute();
    let mut out = Vec::new();
    let mk = |offset: Span, value: f64, model_value: f64| Sample {
        m: Measurement::new(&sensor.id, attr, value, kind.unit(), spec.start + offset),
        model_value,
        outlier: None,
    };
    if kind == SensorKind::Door {
        out.push(mk(Span::ZERO, 0.0, 0.0));
        for iv in &space.door_open {
            if iv.from < spec.duration {
                out.push(mk(iv.from, 1.0, 1.0));
            }
            if iv.to < spec.duration {
                out.push(mk(iv.to, 0.0, 0.0));
            }
        }
        out.sort_by_key(|s| s.m.observed_at);
        return out;
    }
    let period = sensor.period();
    let signals = &spec.signals;
    let (lo, hi) = OutlierPolicy::default_for(attr).plausible_range;
    let mut offset = Span::ZERO;
    while offset < spec.duration {
        let at = spec.start + offset;
        let n = timeline.occupancy(offset);
        let (model_value, sigma) = match kind {
            SensorKind::Co2 => (co2.at(offset), signals.co2.noise_ppm),
            SensorKind::Temperature => (diurnal(&signals.temperature, hour_of_day(at), n), signals.temperature.noise),
            SensorKind::Humidity => (diurnal(&signals.humidity, hour_of_day(at), n), signals.humidity.noise),
            SensorKind::Energy => (energy(&signals.energy, period, n), signals.energy.noise_kwh),
            SensorKind::Presence => (n as f64, 0.0),
            SensorKind::Door => unreachable!("handled above"),
        };
        let mut value = model_value + noise(rng, sigma);
        if kind == SensorKind::Energy {
            value = value.max(0.0);
        }
        let mut sample = mk(offset, value, model_value);
        if kind.is_continuous() && spec.outliers.rate > 0.0 && rng.random_bool(spec.outliers.rate) {
            let o = &spec.outliers;
            let (injected, k) = if rng.random_bool(o.range_fraction) {
                let v = if rng.random_bool(0.5) { hi * rng.random_range(1.5..3.0) } else { lo - (hi - lo) * rng.random_range(0.01..0.5) };
                (v, OutlierKind::RangeViolation)
            } else {
                let factor = if o.spike.0 == o.spike.1 { o.spike.0 } else { rng.random_range(o.spike.0..o.spike.1) };
                (value.abs().max(1e-3) * factor, OutlierKind::Spike)
            };
            sample.outlier = Some((k, value));
            sample.m.value = injected;
        }
        out.push(sample);
        offset = offset + period;
    }
    out
}

/// Firings of an hourly-style last-value stream with a level trigger: the
/// tick at `T` reads the latest non-outlier sample in `(T − 2f, T]`.
fn expected_firings(spec: &ScenarioSpec, index: usize, watch: &WatchSpec, samples: &[&Sample]) -> Vec<ExpectedFiring> {
    let f = watch.frequency;
    let staleness = f * 2;
    let series: Vec<&&Sample> = samples
        .iter()
        .filter(|s| s.m.sensor_id == watch.sensor_id && s.m.attribute == watch.attribute && s.outlier.is_none())
        .collect();
    let mut out = Vec::new();
    let mut last: Option<Timestamp> = None;
    let mut tick = spec.start.floor_to(f) + f;
    while tick <= spec.end() {
        let i = series.partition_point(|s| s.m.observed_at <= tick);
        let latest = i.checked_sub(1).map(|j| series[j]).filter(|s| s.m.observed_at > tick - staleness);
        if let Some(s) = latest {
            let cooled = last.is_none_or(|l| tick - l >= watch.cooldown());
            if watch.comparator.eval_f64(s.model_value, watch.threshold) && cooled {
                out.push(ExpectedFiring {
                    watch: index,
                    sensor_id: watch.sensor_id.clone(),
                    attribute: watch.attribute.clone(),
                    at: tick,
                    model_value: s.model_value,
                });
                last = Some(tick);
            }
        }
        tick = tick + f;
    }
    out
}

fn provision(spec: &ScenarioSpec) -> Provision {
    let mut entities = Vec::new();
    for space in &spec.spaces {
        entities.push(EntityRecord::new(space.id.clone(), EntityType::Room));
        for s in &space.sensors {
            let ty = if s.kind == SensorKind::Door { EntityType::Door } else { EntityType::SensorNode };
            entities.push(EntityRecord::new(s.id.clone(), ty).with_attribute("locatedIn", AttributeValue::text(&space.id, spec.start)));
        }
    }
    let users = spec
        .occupants
        .iter()
        .map(|o| {
            let mut p = UserProfile::new(&o.user_id).with_gamer_type(o.gamer_type).with_location(&o.space);
            p.preferences = o.preferences.clone();
            p
        })
        .collect();
    Provision { entities, users }
}

/// Generates the trace, ground truth and provisioning for `spec`. Identical
/// specs give identical bundles.
pub fn generate(spec: &ScenarioSpec) -> Result<Bundle, SimError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut samples = Vec::new();
    let mut trajectories = BTreeMap::new();
    for space in &spec.spaces {
        let timeline = SpaceTimeline::new(space, &spec.occupants);
        let co2 = Co2Trajectory::new(&spec.signals.co2, space.area_m2, &timeline, spec.duration);
        for sensor in &space.sensors {
            samples.extend(sensor_samples(spec, space, sensor, &timeline, &co2, &mut rng));
        }
        trajectories.insert(space.id.clone(), co2);
    }
    samples.sort_by(|a, b| (a.m.observed_at, &a.m.sensor_id, &a.m.attribute).cmp(&(b.m.observed_at, &b.m.sensor_id, &b.m.attribute)));

    let mut counts = BTreeMap::new();
    let mut outliers = Vec::new();
    for (index, s) in samples.iter().enumerate() {
        *counts.entry(series_label(&s.m.sensor_id, &s.m.attribute)).or_insert(0) += 1;
        if let Some((kind, clean_value)) = s.outlier {
            outliers.push(InjectedOutlier {
                index,
                sensor_id: s.m.sensor_id.clone(),
                attribute: s.m.attribute.clone(),
                observed_at: s.m.observed_at,
                value: s.m.value,
                clean_value,
                kind,
            });
        }
    }

    let refs: Vec<&Sample> = samples.iter().collect();
    let mut crossings = Vec::new();
    let mut firings = Vec::new();
    for (i, w) in spec.watches.iter().enumerate() {
        let (space, sensor) = spec.sensor(&w.sensor_id).expect("validated watch");
        if sensor.kind == SensorKind::Co2 && w.attribute == "co2" {
            for at in trajectories[&space.id].upward_crossings(w.threshold) {
                crossings.push(Crossing { watch: i, sensor_id: w.sensor_id.clone(), threshold: w.threshold, at: spec.start + at });
            }
        }
        firings.extend(expected_firings(spec, i, w, &refs));
    }

    let ground_truth = GroundTruth {
        seed: spec.seed,
        start: spec.start,
        end: spec.end(),
        total_events: samples.len(),
        counts,
        outliers,
        crossings,
        expected_firings: firings,
    };
    Ok(Bundle {
        spec: spec.clone(),
        trace: samples.into_iter().map(|s| s.m).collect(),
        ground_truth,
        provision: provision(spec),
    })
}
