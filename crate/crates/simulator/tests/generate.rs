use std::path::PathBuf;
use std::process::Command;

use entropy_core::{Span, Timestamp};
use entropy_simulator::generate::OutlierKind;
use entropy_simulator::spec::{Interval, OccupantSpec, SensorKind, SensorSpec, WatchSpec};
use entropy_simulator::{generate, read_spec, Bundle, ScenarioSpec};
use entropy_core::recommender::GamerType;
use proptest::prelude::*;

fn office_spec() -> ScenarioSpec {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios/office.json");
    read_spec(&path).expect("example scenario parses")
}

fn single_room(seed: u64, rate: f64, hours: i64) -> ScenarioSpec {
    let mut spec: ScenarioSpec = serde_json::from_value(serde_json::json!({
        "seed": seed,
        "start": "2026-01-05T00:00:00Z",
        "duration": format!("{hours}h"),
        "spaces": [{ "id": "room-1", "sensors": [] }],
    }))
    .unwrap();
    spec.spaces[0].sensors = vec![
        SensorSpec::new("co2-1", SensorKind::Co2),
        SensorSpec::new("temp-1", SensorKind::Temperature),
        SensorSpec::new("meter-1", SensorKind::Energy),
    ];
    spec.outliers.rate = rate;
    spec
}

#[test]
fn same_seed_gives_identical_bundles() {
    let spec = office_spec();
    let a = generate(&spec).unwrap();
    let b = generate(&spec).unwrap();
    assert_eq!(a.trace_jsonl(), b.trace_jsonl());
    assert_eq!(a.ground_truth, b.ground_truth);
    assert_eq!(a.digest(), b.digest());

    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    a.write(dir_a.path()).unwrap();
    b.write(dir_b.path()).unwrap();
    for f in ["spec.json", "trace.jsonl", "ground_truth.json", "provision.json"] {
        assert_eq!(std::fs::read(dir_a.path().join(f)).unwrap(), std::fs::read(dir_b.path().join(f)).unwrap(), "{f}");
    }

    let mut other = spec.clone();
    other.seed += 1;
    assert_ne!(generate(&other).unwrap().digest(), a.digest());
}

#[test]
fn zero_rate_injects_nothing() {
    let bundle = generate(&single_room(7, 0.0, 48)).unwrap();
    assert!(bundle.ground_truth.outliers.is_empty());
    let max_co2 = bundle.trace.iter().filter(|m| m.attribute == "co2").map(|m| m.value).fold(f64::MIN, f64::max);
    assert!(max_co2 < 460.0, "{max_co2}");
}

#[test]
fn outliers_are_labelled_at_their_trace_line() {
    let bundle = generate(&single_room(11, 0.05, 72)).unwrap();
    let gt = &bundle.ground_truth;
    assert!(!gt.outliers.is_empty());
    for o in &gt.outliers {
        let m = &bundle.trace[o.index];
        assert_eq!((m.sensor_id.as_str(), m.attribute.as_str(), m.observed_at, m.value), (o.sensor_id.as_str(), o.attribute.as_str(), o.observed_at, o.value));
        match o.kind {
            OutlierKind::Spike => assert!(o.value.abs() >= 5.0 * o.clean_value.abs().max(1e-3) - 1e-9),
            OutlierKind::RangeViolation => {
                let (lo, hi) = entropy_core::outlier::OutlierPolicy::default_for(&o.attribute).plausible_range;
                assert!(o.value < lo || o.value > hi);
            }
        }
    }
}

#[test]
fn four_occupants_cross_the_threshold_at_the_closed_form_time() {
    let mut spec = single_room(3, 0.0, 12);
    spec.occupants = (0..4)
        .map(|i| OccupantSpec {
            user_id: format!("u{i}"),
            gamer_type: GamerType::Socialiser,
            space: "room-1".into(),
            preferences: Default::default(),
            present: vec![Interval::new(Span::from_hours(1), Span::from_hours(12))],
        })
        .collect();
    spec.watches = vec![WatchSpec {
        sensor_id: "co2-1".into(),
        attribute: "co2".into(),
        comparator: entropy_core::Comparator::Gt,
        threshold: 1000.0,
        frequency: Span::from_hours(1),
        cooldown: None,
    }];
    let bundle = generate(&spec).unwrap();
    let gt = &bundle.ground_truth;
    // initial slope 4·75 ppm/h, equilibrium 420 + 4·400 ppm, τ = 400/75 h
    let tau_h = 400.0 / 75.0;
    let hours = 1.0 + tau_h * (1600.0f64 / (2020.0 - 1000.0)).ln();
    let want = spec.start.as_millis() as f64 + hours * 3.6e6;
    assert_eq!(gt.crossings.len(), 1);
    assert!((gt.crossings[0].at.as_millis() as f64 - want).abs() <= 1.0);
    let first = &gt.expected_firings[0];
    assert_eq!(first.at, gt.crossings[0].at.floor_to(Span::from_hours(1)) + Span::from_hours(1));
    assert!(first.model_value > 1000.0);
    // level trigger with hourly cooldown keeps firing while the room stays occupied
    assert!(gt.expected_firings.windows(2).all(|w| w[1].at - w[0].at == Span::from_hours(1)));
}

#[test]
fn bundle_round_trips_through_disk() {
    let bundle = generate(&office_spec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    bundle.write(dir.path()).unwrap();
    let back = Bundle::read(dir.path()).unwrap();
    assert_eq!(back, bundle);
    assert_eq!(back.ground_truth.crossings.len(), 2);
}

#[test]
fn truncated_trace_is_rejected() {
    let bundle = generate(&office_spec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    bundle.write(dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("trace.jsonl")).unwrap();
    let cut: String = text.lines().skip(1).map(|l| format!("{l}\n")).collect();
    std::fs::write(dir.path().join("trace.jsonl"), cut).unwrap();
    let err = Bundle::read(dir.path()).unwrap_err();
    assert_eq!(err.code(), "invalid-bundle");
}

#[test]
fn cli_rejects_invalid_spec_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("bad.json");
    std::fs::write(&spec, r#"{"seed":1,"start":"2026-01-01T00:00:00Z","duration":"0s","spaces":[]}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_simulate"))
        .args(["generate", "--spec"])
        .arg(&spec)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("invalid-spec"));
}

#[test]
fn cli_generate_writes_a_readable_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let spec = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios/office.json");
    let out = Command::new(env!("CARGO_BIN_EXE_simulate")).args(["generate", "--spec"]).arg(&spec).arg("--out").arg(dir.path()).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let bundle = Bundle::read(dir.path()).unwrap();
    assert_eq!(summary["events"], bundle.trace.len());
    assert_eq!(summary["digest"], bundle.digest());
}

#[test]
fn replay_against_an_unreachable_platform_fails_after_retries() {
    let bundle_dir = tempfile::tempdir().unwrap();
    generate(&single_room(1, 0.0, 2)).unwrap().write(bundle_dir.path()).unwrap();
    // bind then drop to get a port nobody listens on
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let out = Command::new(env!("CARGO_BIN_EXE_simulate"))
        .args(["replay", "--bundle"])
        .arg(bundle_dir.path())
        .args(["--url", &format!("http://127.0.0.1:{port}"), "--max-attempts", "2"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["acked"], 0);
    assert!(report["failure"].as_str().unwrap().contains("gave up"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn trace_is_ordered_and_counted(seed in any::<u64>(), rate in 0.0f64..0.2, hours in 1i64..30) {
        let bundle = generate(&single_room(seed, rate, hours)).unwrap();
        let gt = &bundle.ground_truth;
        prop_assert_eq!(gt.total_events, bundle.trace.len());
        prop_assert_eq!(gt.counts.values().sum::<usize>(), bundle.trace.len());
        prop_assert!(bundle.trace.windows(2).all(|w| w[0].observed_at <= w[1].observed_at));
        let end: Timestamp = bundle.spec.end();
        prop_assert!(bundle.trace.iter().all(|m| m.observed_at >= bundle.spec.start && m.observed_at < end));
        prop_assert_eq!(gt.counts["co2-1/co2"], (hours * 60) as usize);
        prop_assert!(gt.outliers.windows(2).all(|w| w[0].index < w[1].index));
    }
}
