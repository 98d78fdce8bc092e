use std::collections::BTreeMap;

use entropy_core::broker::{AttributePredicate, AttributeValue, EntityRecord, EntityType, NodeRegistration, NodeState, LOCATED_IN_ATTRIBUTE};
use entropy_core::composite::{CompositeSpec, FoldFn, MemberSelector};
use entropy_core::platform::{ItemStatus, Platform, PlatformConfig};
use entropy_core::timeseries::Measurement;
use entropy_core::{Comparator, Quality, Scalar, Span, Timestamp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Verdict;

const SENSORS: usize = 12;
const REGISTERED: usize = 6;
const OPS: usize = 1000;
const ROOMS: [&str; 4] = ["room-a", "room-b", "room-c", "room-z"];

#[derive(Clone, Default)]
struct Sensor {
    room: String,
    co2: Option<f64>,
    occupied: Option<bool>,
    registered: bool,
    last_seen: Option<Timestamp>,
}

impl Sensor {
    fn live(&self, now: Timestamp, timeout: Span) -> bool {
        !self.registered || self.last_seen.is_none_or(|seen| now - seen <= timeout)
    }
}

fn fold(func: FoldFn, values: &[Scalar]) -> Option<Scalar> {
    match func {
        FoldFn::Any | FoldFn::All => {
            let flags: Vec<bool> = values.iter().filter_map(|v| if let Scalar::Bool(b) = v { Some(*b) } else { None }).collect();
            if flags.is_empty() {
                None
            } else if func == FoldFn::Any {
                Some(Scalar::Bool(flags.contains(&true)))
            } else {
                Some(Scalar::Bool(!flags.contains(&false)))
            }
        }
        _ => {
            let mut nums: Vec<f64> = values.iter().filter_map(|v| if let Scalar::Number(n) = v { Some(*n) } else { None }).collect();
            if nums.is_empty() {
                return None;
            }
            nums.sort_by(f64::total_cmp);
            Some(Scalar::Number(match func {
                FoldFn::Min => nums[0],
                FoldFn::Max => nums[nums.len() - 1],
                FoldFn::Sum => nums.iter().sum(),
                _ => nums.iter().sum::<f64>() / nums.len() as f64,
            }))
        }
    }
}

fn attrs(pairs: &[(&str, FoldFn)]) -> BTreeMap<String, FoldFn> {
    pairs.iter().map(|(a, f)| (a.to_string(), *f)).collect()
}

fn specs() -> Vec<CompositeSpec> {
    let room = |id: &str, aggregations| CompositeSpec {
        composite_id: id.into(),
        entity_type: EntityType::Room,
        members: MemberSelector::Predicate {
            predicate: AttributePredicate { attribute: LOCATED_IN_ATTRIBUTE.into(), comparator: Comparator::Eq, value: Scalar::Text(id.into()) },
        },
        aggregations,
        staleness_horizon: None,
    };
    vec![
        room("room-a", attrs(&[("co2", FoldFn::Avg), ("occupied", FoldFn::Any)])),
        room("room-b", attrs(&[("co2", FoldFn::Min), ("occupied", FoldFn::All)])),
        room("room-c", attrs(&[("co2", FoldFn::Sum), ("occupied", FoldFn::Any)])),
        CompositeSpec {
            composite_id: "wing".into(),
            entity_type: EntityType::Building,
            members: MemberSelector::ids(["room-a", "room-b", "s11"]),
            aggregations: attrs(&[("co2", FoldFn::Max), ("occupied", FoldFn::All)]),
            staleness_horizon: None,
        },
    ]
}

/// Recomputes every composite attribute from first principles.
fn expected(specs: &[CompositeSpec], sensors: &[Sensor], now: Timestamp, timeout: Span) -> BTreeMap<(String, String), Option<Scalar>> {
    let sensor_value = |s: &Sensor, attr: &str| match attr {
        "co2" => s.co2.map(Scalar::Number),
        _ => s.occupied.map(Scalar::Bool),
    };
    let mut out: BTreeMap<(String, String), Option<Scalar>> = BTreeMap::new();
    for spec in specs {
        for (attr, func) in &spec.aggregations {
            let values: Vec<Scalar> = match &spec.members {
                MemberSelector::Predicate { .. } => sensors
                    .iter()
                    .filter(|s| s.room == spec.composite_id && s.live(now, timeout))
                    .filter_map(|s| sensor_value(s, attr))
                    .collect(),
                MemberSelector::Ids { ids } => ids
                    .iter()
                    .filter_map(|id| match id.strip_prefix('s').and_then(|n| n.parse::<usize>().ok()) {
                        Some(i) => sensors[i].live(now, timeout).then(|| sensor_value(&sensors[i], attr)).flatten(),
                        None => out.get(&(id.clone(), attr.clone())).cloned().flatten(),
                    })
                    .collect(),
            };
            out.insert((spec.composite_id.clone(), attr.clone()), fold(*func, &values));
        }
    }
    out
}

fn same(a: &Option<Scalar>, b: &Option<Scalar>) -> bool {
    match (a, b) {
        (Some(Scalar::Number(x)), Some(Scalar::Number(y))) => (x - y).abs() <= 1e-9 * y.abs().max(1.0),
        _ => a == b,
    }
}

pub fn criterion() -> Verdict {
    let mut now = Timestamp::parse_rfc3339("2026-03-02T08:00:00Z").expect("valid instant");
    let timeout = Span::from_mins(5);
    let p = Platform::in_memory(PlatformConfig::simulated(now));
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for room in ROOMS {
        p.upsert_entity(EntityRecord::new(room, EntityType::Room)).expect("room stores");
    }
    let mut sensors: Vec<Sensor> = (0..SENSORS).map(|i| Sensor { room: ROOMS[i % 3].into(), registered: i < REGISTERED, ..Default::default() }).collect();
    for (i, s) in sensors.iter().enumerate() {
        let id = format!("s{i:02}");
        p.upsert_entity(EntityRecord::new(&id, EntityType::SensorNode).with_attribute(LOCATED_IN_ATTRIBUTE, AttributeValue::text(&s.room, now)))
            .expect("sensor stores");
        if s.registered {
            p.register_node(NodeRegistration { node_id: id, reporting_period: Span::from_mins(1), config_commands: Vec::new(), liveness_timeout: Some(timeout) })
                .expect("node registers");
        }
    }
    let specs = specs();
    for spec in &specs {
        if let Err(e) = p.define_composite(spec.clone()) {
            return Verdict::fail(format!("{} rejected: {e}", spec.composite_id));
        }
    }

    let mut walk: Vec<f64> = (0..SENSORS).map(|_| rng.random_range(450.0..900.0)).collect();
    let (mut checkpoints, mut compared, mut dropped) = (0, 0, 0);
    let mut failures = Vec::new();
    for op in 1..=OPS {
        now = now + if rng.random_bool(0.1) { Span::from_mins(rng.random_range(6..20)) } else { Span::from_secs(rng.random_range(10..180)) };
        if let Err(e) = p.set_clock(now) {
            return Verdict::fail(format!("clock refused {now}: {e}"));
        }
        let i = rng.random_range(0..SENSORS);
        let id = format!("s{i:02}");
        let roll: f64 = rng.random();
        if roll < 0.5 {
            walk[i] = (walk[i] + rng.random_range(-25.0..25.0)).clamp(350.0, 2500.0);
            let m = Measurement::new(&id, "co2", walk[i], "ppm", now);
            match p.ingest_batch(vec![m], None).map(|r| r.items[0].status) {
                Ok(ItemStatus::Accepted) => {
                    sensors[i].co2 = Some(walk[i]);
                    sensors[i].last_seen = Some(now);
                }
                Ok(ItemStatus::DroppedAsOutlier) => dropped += 1,
                other => return Verdict::fail(format!("op {op}: ingest for {id} ended {other:?}")),
            }
        } else if roll < 0.75 {
            let b = rng.random_bool(0.6);
            let value = AttributeValue { value: Scalar::Bool(b), unit: String::new(), observed_at: now, quality: Quality::Raw };
            if let Err(e) = p.update_attributes(&id, BTreeMap::from([("occupied".to_owned(), value)])) {
                return Verdict::fail(format!("op {op}: occupancy update for {id}: {e}"));
            }
            sensors[i].occupied = Some(b);
        } else {
            let room = ROOMS[rng.random_range(0..ROOMS.len())];
            if let Err(e) = p.update_attributes(&id, BTreeMap::from([(LOCATED_IN_ATTRIBUTE.to_owned(), AttributeValue::text(room, now))])) {
                return Verdict::fail(format!("op {op}: move of {id}: {e}"));
            }
            sensors[i].room = room.into();
        }

        if op % 100 == 0 {
            checkpoints += 1;
            let settle = p.set_clock(now);
            let versions: Vec<Option<u64>> = specs.iter().map(|s| p.broker().version_of(&s.composite_id)).collect();
            let again = p.set_clock(now);
            if settle.is_err() || again.is_err() || versions != specs.iter().map(|s| p.broker().version_of(&s.composite_id)).collect::<Vec<_>>() {
                failures.push(format!("checkpoint {checkpoints}: composites still changing after settling"));
            }
            for ((comp, attr), want) in expected(&specs, &sensors, now, timeout) {
                compared += 1;
                let got = p.broker().get_entity(&comp).ok().and_then(|r| r.attributes.get(&attr).map(|a| a.value.clone()));
                if !same(&got, &want) {
                    failures.push(format!("op {op}: {comp}.{attr} is {got:?}, fold gives {want:?}"));
                }
            }
        }
    }
    let disconnects = p.broker().transitions().iter().filter(|t| t.to == NodeState::Disconnected).count();
    Verdict::check(
        failures.is_empty(),
        format!(
            "{OPS} operations, {checkpoints} checkpoints, {compared} composite attributes compared, {} mismatches; {dropped} samples dropped, {disconnects} member disconnects{}",
            failures.len(),
            failures.first().map(|f| format!("; first: {f}")).unwrap_or_default()
        ),
    )
}
