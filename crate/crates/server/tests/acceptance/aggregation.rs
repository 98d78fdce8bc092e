use entropy_core::timeseries::{AggFn, AggregateBucket, Measurement, SeriesKey, SeriesQuery, TimeSeriesStore};
use entropy_core::{Quality, Span, Timestamp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Verdict;

const QUERIES: usize = 1000;
const DAY: i64 = 86_400_000;

fn origin() -> Timestamp {
    Timestamp::parse_rfc3339("2026-03-02T00:00:00Z").expect("valid instant")
}

fn random_sample(rng: &mut ChaCha8Rng, key: &SeriesKey) -> Measurement {
    let at = origin() + Span::from_millis(rng.random_range(0..3 * DAY));
    let quality = if rng.random_bool(0.7) { Quality::Cleaned } else { Quality::Raw };
    Measurement::new(&key.sensor_id, &key.attribute, rng.random_range(0.5..1000.0), "u", at).with_quality(quality)
}

#[derive(Clone, Copy)]
struct Bucket {
    start: Timestamp,
    end: Timestamp,
    count: u64,
    sum: f64,
    min: f64,
    max: f64,
}

impl Bucket {
    fn value(&self, func: AggFn) -> Option<f64> {
        (self.count > 0).then(|| match func {
            AggFn::Count => self.count as f64,
            AggFn::Sum => self.sum,
            AggFn::Avg => self.sum / self.count as f64,
            AggFn::Min => self.min,
            AggFn::Max => self.max,
        })
    }
}

/// Partitions raw samples into `[from + i·w, from + (i+1)·w)` clipped at `to`.
fn recompute(raw: &[Measurement], from: Timestamp, to: Timestamp, width: Span) -> Vec<Bucket> {
    let w = width.as_millis();
    let len = (to - from).as_millis();
    let n = (len + w - 1) / w;
    let mut buckets: Vec<Bucket> = (0..n)
        .map(|i| Bucket {
            start: from + Span::from_millis(i * w),
            end: (from + Span::from_millis((i + 1) * w)).min(to),
            count: 0,
            sum: 0.0,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        })
        .collect();
    for m in raw {
        let b = &mut buckets[((m.observed_at - from).as_millis() / w) as usize];
        b.count += 1;
        b.sum += m.value;
        b.min = b.min.min(m.value);
        b.max = b.max.max(m.value);
    }
    buckets
}

fn compare(got: &[AggregateBucket], want: &[Bucket], func: AggFn, worst: &mut f64) -> Result<(), String> {
    if got.len() != want.len() {
        return Err(format!("{} buckets, expected {}", got.len(), want.len()));
    }
    for (g, w) in got.iter().zip(want) {
        if (g.bucket_start, g.bucket_end, g.sample_count) != (w.start, w.end, w.count) {
            return Err(format!("bucket {} has {} samples, expected {} at {}", g.bucket_start, g.sample_count, w.count, w.start));
        }
        match (g.value, w.value(func)) {
            (None, None) => {}
            (Some(a), Some(b)) => match func {
                AggFn::Avg | AggFn::Sum => {
                    let rel = (a - b).abs() / b.abs().max(f64::MIN_POSITIVE);
                    *worst = worst.max(rel);
                    if rel > 1e-9 {
                        return Err(format!("{func:?} at {}: {a} vs {b} (relative error {rel:e})", g.bucket_start));
                    }
                }
                _ if a != b => return Err(format!("{func:?} at {}: {a} vs {b}", g.bucket_start)),
                _ => {}
            },
            (a, b) => return Err(format!("{func:?} at {}: {a:?} vs {b:?}", g.bucket_start)),
        }
    }
    Ok(())
}

pub fn criterion() -> Verdict {
    let store = TimeSeriesStore::in_memory();
    let keys = [SeriesKey::new("meter-1", "energy"), SeriesKey::new("co2-1", "co2"), SeriesKey::new("temp-1", "temperature")];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for key in &keys {
        for _ in 0..4000 {
            store.append(random_sample(&mut rng, key)).expect("sample stores");
        }
        store.rollup_maintenance(key, &[Span::from_hours(1), Span::from_days(1)]).expect("rollups build");
    }
    let fixed = [Span::from_mins(1), Span::from_mins(5), Span::from_mins(15), Span::from_hours(1), Span::from_hours(3), Span::from_days(1)];
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    let mut buckets = 0usize;
    let mut aligned = 0usize;
    for i in 0..QUERIES {
        if i % 10 == 0 {
            for _ in 0..25 {
                let key = &keys[rng.random_range(0..keys.len())];
                store.append(random_sample(&mut rng, key)).expect("sample stores");
            }
        }
        let key = &keys[rng.random_range(0..keys.len())];
        let width = if rng.random_bool(0.7) { fixed[rng.random_range(0..fixed.len())] } else { Span::from_millis(rng.random_range(30_000..6 * 3_600_000)) };
        let mut from = origin() + Span::from_millis(rng.random_range(-DAY / 2..3 * DAY));
        if rng.random_bool(0.5) {
            from = from.floor_to(width);
            aligned += 1;
        }
        let to = from + Span::from_millis(rng.random_range(1..2 * DAY));
        let func = AggFn::ALL[rng.random_range(0..AggFn::ALL.len())];
        let quality = [None, Some(Quality::Cleaned), Some(Quality::Raw)][rng.random_range(0..3)];

        let mut q = SeriesQuery::aggregate(key, from, to, width, func);
        q.quality = quality;
        let mut rq = SeriesQuery::raw(key, from, to);
        rq.quality = quality;
        let result = store.query_aggregate(&q).map_err(|e| e.to_string()).and_then(|got| {
            let raw = store.query_raw(&rq).map_err(|e| e.to_string())?;
            let want = recompute(&raw, from, to, width);
            buckets += want.len();
            compare(&got, &want, func, &mut worst)
        });
        if let Err(e) = result {
            failures.push(format!("query {i}: {e}"));
        }
    }
    Verdict::check(
        failures.is_empty(),
        format!(
            "{QUERIES} queries ({aligned} grid-aligned, {buckets} buckets), {} mismatches, worst avg/sum relative error {worst:e}{}",
            failures.len(),
            failures.first().map(|f| format!("; first: {f}")).unwrap_or_default()
        ),
    )
}
