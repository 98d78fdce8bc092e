use std::collections::{BTreeMap, BTreeSet};

use entropy_core::fusion::JsonLdDocument;
use entropy_core::platform::{Platform, PlatformConfig};
use entropy_core::recommender::{ClassExpression, GamerType, GroupDefinition, PreferenceTaxonomy, UserProfile};
use entropy_core::Timestamp;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Verdict;

const GROUPS: usize = 50;
const PROFILES: usize = 500;
const LISTING: &str = "Person that hasPreference some Reward and hasPreference some Competition";

const PARENTS: &[(&str, &str)] = &[
    ("Badge", "Reward"),
    ("Points", "Reward"),
    ("GoldBadge", "Badge"),
    ("Leaderboard", "Competition"),
    ("Challenge", "Competition"),
    ("WeeklyChallenge", "Challenge"),
    ("TeamWork", "Social"),
    ("Sharing", "Social"),
    ("Recycling", "Environment"),
    ("Energy", "Environment"),
    ("Temperature", "Comfort"),
    ("Light", "Comfort"),
];

struct Definition {
    name: String,
    base: String,
    required: Vec<String>,
}

fn witnesses(preference: &str, class: &str) -> bool {
    let parents: BTreeMap<&str, &str> = PARENTS.iter().copied().collect();
    let mut cur = preference;
    loop {
        if cur == class {
            return true;
        }
        match parents.get(cur) {
            Some(p) => cur = p,
            None => return false,
        }
    }
}

/// Definitions only name earlier groups as their base, so one ordered pass
/// reaches the fixpoint.
fn expected_groups(profile: &UserProfile, defs: &[Definition]) -> BTreeSet<String> {
    let mut member = BTreeSet::new();
    for d in defs {
        let base_ok = d.base == "Person" || profile.asserted_groups.contains(&d.base) || member.contains(&d.base);
        let witnessed = d.required.iter().all(|c| profile.preferences.iter().any(|p| witnesses(p, c)));
        if base_ok && witnessed {
            member.insert(d.name.clone());
        }
    }
    member
}

pub fn criterion(docs: &mut Vec<JsonLdDocument>) -> Verdict {
    let p = Platform::in_memory(PlatformConfig::simulated(Timestamp::parse_rfc3339("2026-03-02T00:00:00Z").expect("valid instant")));
    let parents = PARENTS.iter().map(|(c, p)| (c.to_string(), p.to_string())).collect();
    if let Err(e) = p.set_taxonomy(PreferenceTaxonomy { parents }) {
        return Verdict::fail(format!("taxonomy rejected: {e}"));
    }
    let classes: Vec<&str> = PARENTS.iter().flat_map(|(c, p)| [*c, *p]).collect::<BTreeSet<_>>().into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    let mut defs = Vec::new();
    for i in 0..GROUPS {
        let base = if i > 0 && rng.random_bool(0.2) { format!("G{}", rng.random_range(0..i)) } else { "Person".to_owned() };
        let n = rng.random_range(1..=3);
        let required: Vec<&str> = classes.choose_multiple(&mut rng, n).copied().collect();
        let name = format!("G{i}");
        if let Err(e) = p.register_group(GroupDefinition::new(&name, ClassExpression::restricted(&base, &required))) {
            return Verdict::fail(format!("{name} rejected: {e}"));
        }
        defs.push(Definition { name, base, required: required.iter().map(|s| s.to_string()).collect() });
    }
    let listing: ClassExpression = match LISTING.parse() {
        Ok(e) => e,
        Err(e) => return Verdict::fail(format!("listing text does not parse: {e}")),
    };
    let listing_shape = listing == ClassExpression::restricted("Person", &["Reward", "Competition"]) && listing.to_string() == LISTING;
    if let Err(e) = p.register_group(GroupDefinition::new("Player", listing)) {
        return Verdict::fail(format!("listing group rejected: {e}"));
    }
    defs.push(Definition { name: "Player".into(), base: "Person".into(), required: vec!["Reward".into(), "Competition".into()] });

    let mut profiles = Vec::new();
    for i in 0..PROFILES {
        let n = rng.random_range(0..=4);
        let mut profile = UserProfile::new(&format!("p{i:03}"));
        profile.preferences = classes.choose_multiple(&mut rng, n).map(|s| s.to_string()).collect();
        if rng.random_bool(0.1) {
            profile.asserted_groups.insert(format!("G{}", rng.random_range(0..GROUPS)));
        }
        profiles.push(profile);
    }
    profiles.push(UserProfile::new("listing-exact").with_preferences(&["Reward", "Competition"]));
    profiles.push(UserProfile::new("listing-subclasses").with_preferences(&["GoldBadge", "WeeklyChallenge"]));
    profiles.push(UserProfile::new("listing-partial").with_preferences(&["Reward", "Energy"]));

    let mut mismatches = Vec::new();
    let mut memberships = 0;
    for profile in &profiles {
        let want = expected_groups(profile, &defs);
        memberships += want.len();
        match p.upsert_user(profile.clone()) {
            Ok(_) => {}
            Err(e) => {
                mismatches.push(format!("{} rejected: {e}", profile.user_id));
                continue;
            }
        }
        let got = p.recommender().user(&profile.user_id).map(|u| u.inferred_groups).unwrap_or_default();
        if got != want {
            mismatches.push(format!("{}: inferred {got:?}, expected {want:?}", profile.user_id));
        }
    }
    let is_player = |id: &str| p.recommender().user(id).is_ok_and(|u| u.gamer_types().contains(&GamerType::Player));
    let listing_ok = listing_shape && is_player("listing-exact") && is_player("listing-subclasses") && !is_player("listing-partial");
    docs.extend(p.fusion().store().all());

    Verdict::check(
        mismatches.is_empty() && listing_ok,
        format!(
            "{} profiles x {} definitions, {memberships} memberships, {} disagreements with the conjunct oracle; listing case {}{}",
            profiles.len(),
            defs.len(),
            mismatches.len(),
            if listing_ok { "infers Player" } else { "FAILED" },
            mismatches.first().map(|m| format!("; first: {m}")).unwrap_or_default()
        ),
    )
}
