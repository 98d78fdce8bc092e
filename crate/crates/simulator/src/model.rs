//! Noise-free signal models. CO₂ follows a first-order response whose target
//! and time constant change only at occupancy and door events, so its value
//! and threshold crossings have closed forms.

use std::f64::consts::PI;

use entropy_core::Span;

use crate::spec::{Co2Model, DiurnalModel, EnergyModel, Interval, OccupantSpec, SpaceSpec};

const MS_PER_HOUR: f64 = 3_600_000.0;

/// Occupancy and door state of one space over the scenario.
#[derive(Clone, Debug)]
pub struct SpaceTimeline {
    presence: Vec<Interval>,
    door_open: Vec<Interval>,
}

impl SpaceTimeline {
    pub fn new(space: &SpaceSpec, occupants: &[OccupantSpec]) -> Self {
        SpaceTimeline {
            presence: occupants.iter().filter(|o| o.space == space.id).flat_map(|o| o.present.iter().copied()).collect(),
            door_open: space.door_open.clone(),
        }
    }

    pub fn occupancy(&self, offset: Span) -> usize {
        self.presence.iter().filter(|iv| iv.contains(offset)).count()
    }

    pub fn door_open(&self, offset: Span) -> bool {
        self.door_open.iter().any(|iv| iv.contains(offset))
    }

    /// Offsets in `[0, end)` where the state may change, ascending, starting at 0.
    pub fn breakpoints(&self, end: Span) -> Vec<Span> {
        let mut b: Vec<Span> = std::iter::once(Span::ZERO)
            .chain(self.presence.iter().chain(&self.door_open).flat_map(|iv| [iv.from, iv.to]))
            .filter(|t| *t >= Span::ZERO && *t < end)
            .collect();
        b.sort();
        b.dedup();
        b
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Segment {
    start: Span,
    c0: f64,
    target: f64,
    tau_h: f64,
}

impl Segment {
    fn value(&self, offset: Span) -> f64 {
        let dt_h = (offset - self.start).as_millis() as f64 / MS_PER_HOUR;
        self.target + (self.c0 - self.target) * (-dt_h / self.tau_h).exp()
    }
}

/// Piecewise closed-form CO₂ concentration of one space.
#[derive(Clone, Debug)]
pub struct Co2Trajectory {
    segments: Vec<Segment>,
    end: Span,
}

impl Co2Trajectory {
    pub fn new(model: &Co2Model, area_m2: f64, timeline: &SpaceTimeline, end: Span) -> Self {
        let scale = model.reference_area_m2 / area_m2;
        let mut segments = Vec::new();
        let mut c = model.baseline_ppm;
        let points = timeline.breakpoints(end);
        for (i, &start) in points.iter().enumerate() {
            let n = timeline.occupancy(start) as f64;
            let (target, tau_h) = if timeline.door_open(start) {
                (model.baseline_ppm, model.door_tau.as_millis() as f64 / MS_PER_HOUR)
            } else if n == 0.0 {
                (model.baseline_ppm, model.decay_tau.as_millis() as f64 / MS_PER_HOUR)
            } else {
                (model.baseline_ppm + n * model.asymptote_per_person_ppm * scale, model.asymptote_per_person_ppm / model.rise_per_person_ppm_h)
            };
            let seg = Segment { start, c0: c, target, tau_h };
            let next = points.get(i + 1).copied().unwrap_or(end);
            c = seg.value(next);
            segments.push(seg);
        }
        Co2Trajectory { segments, end }
    }

    fn segment(&self, offset: Span) -> &Segment {
        let i = self.segments.partition_point(|s| s.start <= offset);
        &self.segments[i.saturating_sub(1)]
    }

    pub fn at(&self, offset: Span) -> f64 {
        self.segment(offset).value(offset)
    }

    /// Offsets where the concentration rises through `threshold`, rounded up
    /// to the millisecond.
    pub fn upward_crossings(&self, threshold: f64) -> Vec<Span> {
        let mut out = Vec::new();
        for (i, s) in self.segments.iter().enumerate() {
            if !(s.c0 < threshold && s.target > threshold) {
                continue;
            }
            let dt_h = s.tau_h * ((s.target - s.c0) / (s.target - threshold)).ln();
            let at = s.start + Span::from_millis((dt_h * MS_PER_HOUR).ceil() as i64);
            let seg_end = self.segments.get(i + 1).map_or(self.end, |n| n.start);
            if at < seg_end {
                out.push(at);
            }
        }
        out
    }
}

/// `baseline + amplitude·cos(2π(h − peak)/24) + per_person·n` at hour of day `h`.
pub fn diurnal(model: &DiurnalModel, hour_of_day: f64, occupancy: usize) -> f64 {
    model.baseline + model.amplitude * (2.0 * PI * (hour_of_day - model.peak_hour) / 24.0).cos() + model.per_person * occupancy as f64
}

/// Energy drawn over `period` at constant occupancy.
pub fn energy(model: &EnergyModel, period: Span, occupancy: usize) -> f64 {
    (model.base_kw + model.per_person_kw * occupancy as f64) * period.as_millis() as f64 / MS_PER_HOUR
}
