use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use entropy_core::fusion::JsonLdDocument;
use entropy_core::outlier::{ModifiedZScore, OutlierPolicy};
use entropy_core::platform::{ItemStatus, Platform, PlatformConfig};
use entropy_core::timeseries::Measurement;
use entropy_simulator::{generate, ScenarioSpec};
use serde_json::json;

use crate::Verdict;

const EVENTS: usize = 10_000;
const BATCH: usize = 500;

pub fn fleet(seed: u64, rate: f64, duration: &str) -> ScenarioSpec {
    let space = |n: &str, area: f64| {
        json!({
            "id": format!("room-{n}"),
            "area_m2": area,
            "sensors": [
                { "id": format!("co2-{n}"), "kind": "co2" },
                { "id": format!("temp-{n}"), "kind": "temperature" },
                { "id": format!("hum-{n}"), "kind": "humidity" },
                { "id": format!("meter-{n}"), "kind": "energy" },
                { "id": format!("door-{n}"), "kind": "door" }
            ],
            "door_open": [{ "from": "10h", "to": "10h 15m" }, { "from": "15h", "to": "15h 10m" }]
        })
    };
    let person = |id: &str, g: &str, room: &str, from: &str, to: &str| {
        json!({ "user_id": id, "gamer_type": g, "space": room, "present": [{ "from": from, "to": to }] })
    };
    serde_json::from_value(json!({
        "seed": seed,
        "start": "2026-03-02T00:00:00Z",
        "duration": duration,
        "spaces": [space("a", 20.0), space("b", 30.0), space("c", 45.0)],
        "outliers": { "rate": rate },
        "occupants": [
            person("u1", "Humanitarian", "room-a", "8h", "17h"),
            person("u2", "Socialiser", "room-a", "9h", "12h"),
            person("u3", "Player", "room-a", "13h", "18h"),
            person("u4", "FreeSpirit", "room-b", "9h", "12h"),
            person("u5", "Humanitarian", "room-b", "9h", "12h"),
            person("u6", "Socialiser", "room-c", "13h", "18h"),
            person("u7", "Player", "room-c", "13h", "18h"),
            person("u8", "Humanitarian", "room-c", "13h", "18h"),
            person("u9", "FreeSpirit", "room-c", "14h", "16h")
        ]
    }))
    .expect("fleet spec is valid")
}

fn naive_median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Default)]
struct SeriesState {
    accepted: Vec<f64>,
    run: Vec<f64>,
}

/// Brute-force reference: plausible range, then the modified z-score
/// 0.6745·(x − median)/MAD of the last `window_size` accepted samples, with
/// the flat-window band when MAD is zero and the reseed after a run of
/// window rejections.
fn reference_dropped(trace: &[Measurement]) -> BTreeSet<usize> {
    let mut state: BTreeMap<(String, String), SeriesState> = BTreeMap::new();
    let mut dropped = BTreeSet::new();
    for (i, m) in trace.iter().enumerate() {
        let policy = OutlierPolicy::default_for(&m.attribute);
        let s = state.entry((m.sensor_id.clone(), m.attribute.clone())).or_default();
        let (lo, hi) = policy.plausible_range;
        if !m.value.is_finite() || m.value < lo || m.value > hi {
            dropped.insert(i);
            continue;
        }
        if !policy.detectors.iter().any(|d| d == ModifiedZScore::NAME) {
            continue;
        }
        let ws = policy.window_size;
        let reject = s.accepted.len() >= ws && {
            let recent = &s.accepted[s.accepted.len() - ws..];
            let med = naive_median(recent);
            let deviations: Vec<f64> = recent.iter().map(|x| (x - med).abs()).collect();
            let mad = naive_median(&deviations);
            if mad == 0.0 {
                (m.value - med).abs() > policy.mad_epsilon
            } else {
                (0.6745 * (m.value - med) / mad).abs() > policy.zscore_threshold
            }
        };
        if reject {
            dropped.insert(i);
            s.run.push(m.value);
            if policy.reseed_after > 0 && s.run.len() >= policy.reseed_after {
                let keep = s.run.len().min(ws);
                s.accepted = s.run[s.run.len() - keep..].to_vec();
                s.run.clear();
            }
        } else {
            s.accepted.push(m.value);
            s.run.clear();
        }
    }
    dropped
}

pub fn criterion(docs: &mut Vec<JsonLdDocument>) -> Verdict {
    let bundle = generate(&fleet(2024, 0.02, "2days")).expect("fleet generates");
    if bundle.trace.len() < EVENTS {
        return Verdict::fail(format!("fleet produced only {} events", bundle.trace.len()));
    }
    let trace = &bundle.trace[..EVENTS];
    let injected: BTreeSet<usize> = bundle.ground_truth.outliers.iter().map(|o| o.index).filter(|i| *i < EVENTS).collect();

    let p = Platform::in_memory(PlatformConfig::simulated(bundle.spec.start));
    for e in &bundle.provision.entities {
        p.upsert_entity(e.clone()).expect("entity provisions");
    }
    let started = Instant::now();
    let mut dropped = BTreeSet::new();
    let mut other = 0;
    for (b, chunk) in trace.chunks(BATCH).enumerate() {
        let report = p.ingest_batch(chunk.to_vec(), None).expect("batch ingests");
        for item in report.items {
            match item.status {
                ItemStatus::DroppedAsOutlier => {
                    dropped.insert(b * BATCH + item.index);
                }
                ItemStatus::Accepted => {}
                _ => other += 1,
            }
        }
    }
    let elapsed = started.elapsed().as_secs_f64();

    let reference = reference_dropped(trace);
    let false_drops = dropped.difference(&reference).count();
    let missed = reference.difference(&dropped).count();
    let caught = injected.intersection(&dropped).count();
    let recall = caught as f64 / injected.len().max(1) as f64;
    let beyond = dropped.difference(&injected).count();
    docs.extend(p.fusion().store().all());

    Verdict::check(
        false_drops == 0 && missed == 0 && other == 0 && elapsed < 10.0,
        format!(
            "{EVENTS} samples, {} injected, {} dropped; against the reference {false_drops} extra and {missed} missing drops; \
             ground-truth recall {recall:.3} ({caught}/{}, reported); {beyond} drops outside the injected set; \
             {other} items neither accepted nor dropped; {elapsed:.2}s",
            injected.len(),
            dropped.len(),
            injected.len()
        ),
    )
}
