use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use entropy_core::fusion::JsonLdDocument;
use entropy_core::platform::{Platform, PlatformConfig};
use entropy_core::recommender::{
    air_quality_templates, GamerType, Recommendation, RecommendationKind, RecommendationRule, RecommendationState, ValidationSpec,
};
use entropy_core::stream::{ConditionSpec, EventPayload, MeasurementType, SensorDataStream};
use entropy_core::{Comparator, Span, Timestamp};
use entropy_simulator::generate::Bundle;
use entropy_simulator::spec::Interval;
use entropy_simulator::{generate, ScenarioSpec};

use crate::Verdict;

const OFFICE: &str = include_str!("../../../simulator/scenarios/office.json");

const HUMANITARIAN: &str = "The air quality can become better. Let's open the door for 2 minutes to freshen up and get closer to earning the Refresher Badge (after {N} times of action)";
const SOCIALISER: &str = "The air quality is poor for all in the office. Open the door for 2 minutes to freshen the atmosphere and become the Fresh Air Challenge team leader for now";

const SPACE: &str = "office-12";
const N_REQUIRED: u32 = 5;

struct Run {
    platform: Platform,
    bundle: Bundle,
    stream: String,
    rule: String,
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn run_office(spec: &ScenarioSpec) -> Result<Run, String> {
    let bundle = generate(spec).map_err(err)?;
    let p = Platform::in_memory(PlatformConfig::simulated(spec.start));
    for e in &bundle.provision.entities {
        p.upsert_entity(e.clone()).map_err(err)?;
    }
    for u in &bundle.provision.users {
        p.upsert_user(u.clone()).map_err(err)?;
    }
    let stream = p.register_stream(SensorDataStream::new("co2-12", "co2", Span::from_hours(1), MeasurementType::LastValue)).map_err(err)?;
    p.activate_stream(&stream).map_err(err)?;
    let mut condition = ConditionSpec::new(&stream, Comparator::Gt, 1000.0);
    condition.cooldown = Some(Span::from_hours(1));
    let rule = p
        .register_rule(RecommendationRule {
            id: String::new(),
            condition,
            condition_id: String::new(),
            space_id: None,
            target_groups: ["Humanitarian", "Socialiser"].into_iter().map(String::from).collect(),
            kind: RecommendationKind::Task,
            templates: air_quality_templates(),
            validation: Some(ValidationSpec::door("door-12")),
            involved_object: Some("door-12".into()),
            cooldown: None,
            n_required: N_REQUIRED,
            badge: Some("Refresher".into()),
            preference_theme: None,
            campaign_id: None,
        })
        .map_err(err)?;
    for chunk in bundle.trace.chunks(500) {
        let report = p.ingest_batch(chunk.to_vec(), None).map_err(err)?;
        if report.errors > 0 {
            return Err(format!("{} ingest errors", report.errors));
        }
    }
    p.set_clock(spec.end()).map_err(err)?;
    Ok(Run { platform: p, bundle, stream, rule })
}

struct Tally {
    firings: usize,
    recommendations: usize,
    validated: usize,
    failed: usize,
}

/// Users the fixture places in the space with a targeted gamer type.
fn expected_users(spec: &ScenarioSpec) -> BTreeSet<String> {
    spec.occupants
        .iter()
        .filter(|o| o.space == SPACE && matches!(o.gamer_type, GamerType::Humanitarian | GamerType::Socialiser))
        .map(|o| o.user_id.clone())
        .collect()
}

fn expected_text(rec: &Recommendation, all: &[Recommendation]) -> Option<String> {
    match rec.gamer_type {
        GamerType::Humanitarian => {
            let done = all
                .iter()
                .filter(|r| r.user_id == rec.user_id && r.state == RecommendationState::Validated)
                .filter(|r| r.resolved_at.is_some_and(|t| t < rec.created_at))
                .count() as u32;
            Some(HUMANITARIAN.replace("{N}", &N_REQUIRED.saturating_sub(done).to_string()))
        }
        GamerType::Socialiser => Some(SOCIALISER.to_owned()),
        _ => None,
    }
}

fn check(run: &Run, spec: &ScenarioSpec) -> Result<Tally, String> {
    let p = &run.platform;
    let gt = &run.bundle.ground_truth;
    if gt.crossings.len() != 2 {
        return Err(format!("fixture crosses the threshold {} times, expected 2", gt.crossings.len()));
    }
    let fired: Vec<Timestamp> = p
        .streams()
        .events_since(&run.stream, 0)
        .map_err(err)?
        .into_iter()
        .filter(|e| matches!(e.payload, EventPayload::Condition { .. }))
        .map(|e| e.at)
        .collect();
    let expected: Vec<Timestamp> = gt.expected_firings.iter().map(|f| f.at).collect();
    if fired != expected {
        return Err(format!("fired at {fired:?}, ground truth {expected:?}"));
    }

    let mut recs: Vec<Recommendation> = p.recommender().recommendations().into_iter().filter(|r| r.rule_id == run.rule).collect();
    recs.sort_by_key(|r| (r.created_at, r.user_id.clone()));
    let mut by_firing: BTreeMap<Timestamp, BTreeSet<String>> = BTreeMap::new();
    for r in &recs {
        by_firing.entry(r.created_at).or_default().insert(r.user_id.clone());
    }
    let users = expected_users(spec);
    let want: BTreeMap<Timestamp, BTreeSet<String>> = expected.iter().map(|t| (*t, users.clone())).collect();
    if by_firing != want {
        return Err(format!("recipients {by_firing:?}, expected {want:?}"));
    }

    let door_opens: Vec<Timestamp> =
        spec.spaces.iter().filter(|s| s.id == SPACE).flat_map(|s| s.door_open.iter().map(|iv| spec.start + iv.from)).collect();
    let mut tally = Tally { firings: fired.len(), recommendations: recs.len(), validated: 0, failed: 0 };
    for r in &recs {
        match expected_text(r, &recs) {
            Some(text) if text == r.content => {}
            other => return Err(format!("{} got `{}`, expected {other:?}", r.user_id, r.content)),
        }
        let delivered = r.delivered_at.ok_or_else(|| format!("{} was never delivered", r.id))?;
        let window_end = delivered + Span::from_mins(30);
        if r.window_end != Some(window_end) {
            return Err(format!("{} window ends {:?}, expected {window_end}", r.id, r.window_end));
        }
        let acted = door_opens.iter().any(|d| *d >= delivered && *d <= window_end);
        match (acted, r.state) {
            (true, RecommendationState::Validated) => tally.validated += 1,
            (false, RecommendationState::Failed) if r.resolved_at == Some(window_end) => tally.failed += 1,
            (_, state) => {
                return Err(format!("{} for {} at {} ended {state:?} at {:?} (door opened in window: {acted})", r.id, r.user_id, r.created_at, r.resolved_at))
            }
        }
    }
    Ok(tally)
}

pub fn criterion(docs: &mut Vec<JsonLdDocument>) -> Verdict {
    let started = Instant::now();
    let fixture: ScenarioSpec = match serde_json::from_str(OFFICE) {
        Ok(s) => s,
        Err(e) => return Verdict::fail(format!("office fixture unreadable: {e}")),
    };
    let mut with_door = fixture.clone();
    with_door.spaces[0].door_open = vec![Interval::new(Span::from_mins(11 * 60 + 5), Span::from_mins(11 * 60 + 20))];
    let mut without_door = fixture;
    without_door.spaces[0].door_open.clear();

    let mut lines = Vec::new();
    let mut ok = true;
    for (label, spec) in [("door opened", &with_door), ("door absent", &without_door)] {
        let outcome = run_office(spec).and_then(|run| {
            let t = check(&run, spec);
            docs.extend(run.platform.fusion().store().all());
            t
        });
        match outcome {
            Ok(t) => {
                let variant_ok = if label == "door opened" { t.validated > 0 } else { t.validated == 0 && t.failed == t.recommendations };
                ok &= variant_ok;
                lines.push(format!(
                    "{label}: {} firings at ground truth, {} recommendations, {} validated, {} failed at window end",
                    t.firings, t.recommendations, t.validated, t.failed
                ));
            }
            Err(e) => {
                ok = false;
                lines.push(format!("{label}: {e}"));
            }
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    Verdict::check(ok && elapsed < 60.0, format!("{}; {elapsed:.1}s", lines.join("; ")))
}
