//! Condition-action recommendations personalised by gamer type, with
//! feedback handling, infrastructure-based task validation and group
//! inference over behavioural profiles.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::ContextBroker;
use crate::fusion::{FusionEngine, PropertyValue, SourceKind, SourceRecord};
use crate::stream::{ConditionSpec, StreamError, StreamProcessor};
use crate::time::{Span, Timestamp};
use crate::value::Scalar;

pub const PREFERENCE_PROPERTY: &str = "hasPreference";
pub const PERSON_CLASS: &str = "Person";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RecommenderError {
    #[error("class expression is outside the supported shape: {0}")]
    UnsupportedExpressionShape(String),
    #[error("cannot parse class expression: {0}")]
    MalformedExpression(String),
    #[error("rule targets {0} but has no template for it")]
    MissingTemplate(GamerType),
    #[error("task rule involves `{0}`, which has sensors, but carries no validation spec")]
    TaskWithoutValidation(String),
    #[error("{0:?} rules cannot carry a validation spec")]
    ValidationOnNonTask(RecommendationKind),
    #[error("no template matches the user's gamer type")]
    NoMatchingTemplate,
    #[error("unknown recommendation `{0}`")]
    UnknownRecommendation(String),
    #[error("unknown rule `{0}`")]
    UnknownRule(String),
    #[error("unknown user `{0}`")]
    UnknownUser(String),
    #[error("recommendation is {state:?}, expected {expected:?}")]
    WrongState { state: RecommendationState, expected: RecommendationState },
    #[error("recommendation has no validation spec")]
    NoValidationSpec,
    #[error("invalid rule: {0}")]
    InvalidRule(String),
    #[error(transparent)]
    Stream(#[from] StreamError),
}

impl RecommenderError {
    pub fn code(&self) -> &'static str {
        match self {
            RecommenderError::UnsupportedExpressionShape(_) => "unsupported-expression-shape",
            RecommenderError::MalformedExpression(_) => "malformed-expression",
            RecommenderError::MissingTemplate(_) => "missing-template",
            RecommenderError::TaskWithoutValidation(_) => "task-without-validation-spec",
            RecommenderError::ValidationOnNonTask(_) => "validation-on-non-task",
            RecommenderError::NoMatchingTemplate => "no-matching-template",
            RecommenderError::UnknownRecommendation(_) => "unknown-recommendation",
            RecommenderError::UnknownRule(_) => "unknown-rule",
            RecommenderError::UnknownUser(_) => "unknown-user",
            RecommenderError::WrongState { .. } => "wrong-state",
            RecommenderError::NoValidationSpec => "no-validation-spec",
            RecommenderError::InvalidRule(_) => "invalid-rule",
            RecommenderError::Stream(e) => e.code(),
        }
    }
}

// -- class expressions ----------------------------------------------------

/// OWL class expression. Only named classes, intersections and existential
/// restrictions are accepted by the reasoner; the other shapes exist so that
/// they can be parsed and rejected with a precise error.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ClassExpression {
    Named(String),
    Intersection(Vec<ClassExpression>),
    Union(Vec<ClassExpression>),
    Complement(Box<ClassExpression>),
    Some { property: String, filler: Box<ClassExpression> },
    Only { property: String, filler: Box<ClassExpression> },
}

fn local_name(s: &str) -> &str {
    s.rsplit_once(':').map_or(s, |(_, l)| l)
}

impl ClassExpression {
    pub fn some(property: &str, filler: &str) -> Self {
        ClassExpression::Some { property: property.to_owned(), filler: Box::new(ClassExpression::Named(filler.to_owned())) }
    }

    /// `base ⊓ ∃hasPreference.C₁ ⊓ … ⊓ ∃hasPreference.Cₙ`.
    pub fn restricted(base: &str, preferences: &[&str]) -> Self {
        if preferences.is_empty() {
            return ClassExpression::Named(base.to_owned());
        }
        let mut parts = vec![ClassExpression::Named(base.to_owned())];
        parts.extend(preferences.iter().map(|p| Self::some(PREFERENCE_PROPERTY, p)));
        ClassExpression::Intersection(parts)
    }

    /// Splits a restricted-shape expression into its named class and the
    /// required preference classes.
    pub fn normalize(&self) -> Result<(String, BTreeSet<String>), RecommenderError> {
        fn flatten<'a>(e: &'a ClassExpression, out: &mut Vec<&'a ClassExpression>) {
            match e {
                ClassExpression::Intersection(parts) => parts.iter().for_each(|p| flatten(p, out)),
                other => out.push(other),
            }
        }
        let mut parts = Vec::new();
        flatten(self, &mut parts);
        let mut base = None;
        let mut required = BTreeSet::new();
        for p in parts {
            match p {
                ClassExpression::Named(n) if base.is_none() => base = Some(local_name(n).to_owned()),
                ClassExpression::Some { property, filler } if local_name(property) == PREFERENCE_PROPERTY => match filler.as_ref() {
                    ClassExpression::Named(c) => {
                        required.insert(local_name(c).to_owned());
                    }
                    other => return Err(RecommenderError::UnsupportedExpressionShape(format!("nested filler `{other}`"))),
                },
                other => return Err(RecommenderError::UnsupportedExpressionShape(other.to_string())),
            }
        }
        let base = base.ok_or_else(|| RecommenderError::UnsupportedExpressionShape("no named class".into()))?;
        Ok((base, required))
    }
}

impl fmt::Display for ClassExpression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn atom(e: &ClassExpression) -> String {
            match e {
                ClassExpression::Named(n) => n.clone(),
                other => format!("({other})"),
            }
        }
        match self {
            ClassExpression::Named(n) => f.write_str(n),
            ClassExpression::Intersection(parts) => {
                let (head, tail) = match parts.split_first() {
                    Some((h @ ClassExpression::Named(_), t)) if !t.is_empty() => (Some(h), t),
                    _ => (None, parts.as_slice()),
                };
                let body: Vec<String> = tail
                    .iter()
                    .map(|p| match p {
                        ClassExpression::Some { .. } | ClassExpression::Only { .. } | ClassExpression::Named(_) => p.to_string(),
                        other => atom(other),
                    })
                    .collect();
                match head {
                    Some(h) => write!(f, "{h} that {}", body.join(" and ")),
                    None => f.write_str(&body.join(" and ")),
                }
            }
            ClassExpression::Union(parts) => f.write_str(&parts.iter().map(atom).collect::<Vec<_>>().join(" or ")),
            ClassExpression::Complement(inner) => write!(f, "not {}", atom(inner)),
            ClassExpression::Some { property, filler } => write!(f, "{property} some {}", atom(filler)),
            ClassExpression::Only { property, filler } => write!(f, "{property} only {}", atom(filler)),
        }
    }
}

struct Parser<'a> {
    tokens: Vec<&'a str>,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&'a str> {
        self.tokens.get(self.pos).copied()
    }

    fn next(&mut self) -> Option<&'a str> {
        let t = self.peek();
        self.pos += 1;
        t
    }

    fn expr(&mut self) -> Result<ClassExpression, RecommenderError> {
        let mut parts = vec![self.conj()?];
        while self.peek().is_some_and(|t| t.eq_ignore_ascii_case("or")) {
            self.next();
            parts.push(self.conj()?);
        }
        Ok(if parts.len() == 1 { parts.remove(0) } else { ClassExpression::Union(parts) })
    }

    fn conj(&mut self) -> Result<ClassExpression, RecommenderError> {
        let mut parts = vec![self.prim()?];
        while self.peek().is_some_and(|t| t.eq_ignore_ascii_case("and") || t.eq_ignore_ascii_case("that")) {
            self.next();
            parts.push(self.prim()?);
        }
        Ok(if parts.len() == 1 { parts.remove(0) } else { ClassExpression::Intersection(parts) })
    }

    fn prim(&mut self) -> Result<ClassExpression, RecommenderError> {
        let tok = self.next().ok_or_else(|| RecommenderError::MalformedExpression("unexpected end".into()))?;
        if tok.eq_ignore_ascii_case("not") {
            return Ok(ClassExpression::Complement(Box::new(self.prim()?)));
        }
        if tok == "(" {
            let inner = self.expr()?;
            return match self.next() {
                Some(")") => Ok(inner),
                other => Err(RecommenderError::MalformedExpression(format!("expected `)`, found {other:?}"))),
            };
        }
        if tok == ")" || ["and", "or", "that", "some", "only"].iter().any(|k| tok.eq_ignore_ascii_case(k)) {
            return Err(RecommenderError::MalformedExpression(format!("unexpected `{tok}`")));
        }
        match self.peek() {
            Some(k) if k.eq_ignore_ascii_case("some") => {
                self.next();
                Ok(ClassExpression::Some { property: tok.to_owned(), filler: Box::new(self.prim()?) })
            }
            Some(k) if k.eq_ignore_ascii_case("only") => {
                self.next();
                Ok(ClassExpression::Only { property: tok.to_owned(), filler: Box::new(self.prim()?) })
            }
            _ => Ok(ClassExpression::Named(tok.to_owned())),
        }
    }
}

impl FromStr for ClassExpression {
    type Err = RecommenderError;

    /// Parses the Manchester-syntax subset `A that p some B and p some C`,
    /// plus `or`, `not`, `only` and parentheses.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let spaced = s.replace('(', " ( ").replace(')', " ) ");
        let mut p = Parser { tokens: spaced.split_whitespace().collect(), pos: 0 };
        let e = p.expr()?;
        if let Some(t) = p.peek() {
            return Err(RecommenderError::MalformedExpression(format!("trailing `{t}`")));
        }
        Ok(e)
    }
}

impl Serialize for ClassExpression {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ClassExpression {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupDefinition {
    pub name: String,
    pub expression: ClassExpression,
}

impl GroupDefinition {
    pub fn new(name: &str, expression: ClassExpression) -> Self {
        GroupDefinition { name: name.to_owned(), expression }
    }
}

/// Preference class hierarchy: child → parent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTaxonomy {
    pub parents: BTreeMap<String, String>,
}

impl PreferenceTaxonomy {
    /// Whether an asserted preference is an instance of `class`.
    pub fn is_a(&self, preference: &str, class: &str) -> bool {
        let mut cur = local_name(preference);
        let mut hops = 0;
        loop {
            if cur == class {
                return true;
            }
            match self.parents.get(cur) {
                Some(p) if hops < 64 => {
                    cur = p;
                    hops += 1;
                }
                _ => return false,
            }
        }
    }
}

/// Closed-world group inference: a group holds when its named class matches
/// and each existential conjunct has a witness among the preferences.
pub fn infer_groups(
    preferences: &BTreeSet<String>,
    asserted: &BTreeSet<String>,
    definitions: &[GroupDefinition],
    taxonomy: &PreferenceTaxonomy,
) -> Result<BTreeSet<String>, RecommenderError> {
    let normalized: Vec<(&str, String, BTreeSet<String>)> = definitions
        .iter()
        .map(|d| d.expression.normalize().map(|(b, r)| (d.name.as_str(), b, r)))
        .collect::<Result<_, _>>()?;
    let mut inferred = BTreeSet::new();
    loop {
        let mut grew = false;
        for (name, base, required) in &normalized {
            if inferred.contains(*name) {
                continue;
            }
            let base_ok = base == PERSON_CLASS || asserted.contains(base) || inferred.contains(base);
            let witnessed = required.iter().all(|c| preferences.iter().any(|p| taxonomy.is_a(p, c)));
            if base_ok && witnessed {
                inferred.insert(name.to_string());
                grew = true;
            }
        }
        if !grew {
            return Ok(inferred);
        }
    }
}

// -- profiles ---------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GamerType {
    Humanitarian,
    Socialiser,
    #[serde(alias = "Free Spirit")]
    FreeSpirit,
    Player,
}

impl GamerType {
    pub const ALL: [GamerType; 4] = [GamerType::Humanitarian, GamerType::Socialiser, GamerType::FreeSpirit, GamerType::Player];

    pub fn name(self) -> &'static str {
        match self {
            GamerType::Humanitarian => "Humanitarian",
            GamerType::Socialiser => "Socialiser",
            GamerType::FreeSpirit => "FreeSpirit",
            GamerType::Player => "Player",
        }
    }

    pub fn from_group(name: &str) -> Option<Self> {
        match local_name(name).replace(' ', "").as_str() {
            "Humanitarian" => Some(GamerType::Humanitarian),
            "Socialiser" | "Socializer" => Some(GamerType::Socialiser),
            "FreeSpirit" => Some(GamerType::FreeSpirit),
            "Player" => Some(GamerType::Player),
            _ => None,
        }
    }
}

impl fmt::Display for GamerType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GamerType {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::from_group(s).ok_or_else(|| format!("unknown gamer type `{s}`"))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: String,
    #[serde(default)]
    pub demographics: BTreeMap<String, String>,
    #[serde(default)]
    pub preferences: BTreeSet<String>,
    #[serde(default)]
    pub gamer_type: Option<GamerType>,
    #[serde(default)]
    pub asserted_groups: BTreeSet<String>,
    #[serde(default)]
    pub inferred_groups: BTreeSet<String>,
    #[serde(default)]
    pub activity_locations: BTreeSet<String>,
    #[serde(default)]
    pub action_counters: BTreeMap<String, u32>,
    /// Accepted recommendations per preference theme.
    #[serde(default)]
    pub preference_evidence: BTreeMap<String, u32>,
}

impl UserProfile {
    pub fn new(user_id: &str) -> Self {
        UserProfile { user_id: user_id.to_owned(), ..Default::default() }
    }

    pub fn with_gamer_type(mut self, g: GamerType) -> Self {
        self.gamer_type = Some(g);
        self
    }

    pub fn with_location(mut self, space: &str) -> Self {
        self.activity_locations.insert(space.to_owned());
        self
    }

    pub fn with_preferences(mut self, prefs: &[&str]) -> Self {
        self.preferences.extend(prefs.iter().map(|p| p.to_string()));
        self
    }

    /// Asserted ∪ inferred groups plus the stored gamer type.
    pub fn groups(&self) -> BTreeSet<String> {
        let mut g: BTreeSet<String> = self.asserted_groups.union(&self.inferred_groups).cloned().collect();
        if let Some(t) = self.gamer_type {
            g.insert(t.name().to_owned());
        }
        g
    }

    pub fn gamer_types(&self) -> BTreeSet<GamerType> {
        self.groups().iter().filter_map(|g| GamerType::from_group(g)).collect()
    }

    /// Highest-precedence gamer type among `allowed`.
    pub fn gamer_type_among(&self, precedence: &[GamerType], allowed: impl Fn(GamerType) -> bool) -> Option<GamerType> {
        let mine = self.gamer_types();
        precedence.iter().copied().find(|g| mine.contains(g) && allowed(*g))
    }
}

// -- rules and recommendations ------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RecommendationKind {
    Task,
    Message,
    Quiz,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RecommendationState {
    Pending,
    Delivered,
    Accepted,
    Rejected,
    Validated,
    Failed,
    Expired,
}

impl RecommendationState {
    pub fn is_terminal(self) -> bool {
        !matches!(self, RecommendationState::Pending | RecommendationState::Delivered)
    }

    pub fn can_transition(self, kind: RecommendationKind, to: RecommendationState) -> bool {
        use RecommendationState::*;
        match (self, to) {
            (Pending, Delivered) => true,
            (Delivered, Validated | Failed) => kind == RecommendationKind::Task,
            (Delivered, Accepted | Rejected | Expired) => true,
            _ => false,
        }
    }
}

impl FromStr for RecommendationState {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_owned())).map_err(|_| format!("unknown state `{s}`"))
    }
}

/// How a Task is checked against the building infrastructure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationSpec {
    /// Entity the user must act on, e.g. a door.
    pub object_id: String,
    #[serde(default = "default_action_attribute")]
    pub action_attribute: String,
    /// Series whose value must improve. Defaults to the condition's stream.
    #[serde(default)]
    pub metric: Option<(String, String)>,
    /// Effect holds below this value. Defaults to the condition threshold.
    #[serde(default)]
    pub effect_threshold: Option<f64>,
    /// Effect also holds after this relative drop from the triggering value.
    #[serde(default)]
    pub relative_drop: Option<f64>,
    #[serde(default)]
    pub window: Option<Span>,
}

fn default_action_attribute() -> String {
    "open".to_owned()
}

impl ValidationSpec {
    pub fn door(object_id: &str) -> Self {
        ValidationSpec {
            object_id: object_id.to_owned(),
            action_attribute: default_action_attribute(),
            metric: None,
            effect_threshold: None,
            relative_drop: None,
            window: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecommendationRule {
    #[serde(default)]
    pub id: String,
    pub condition: ConditionSpec,
    /// Filled in at registration.
    #[serde(default)]
    pub condition_id: String,
    /// Derived from the stream's sensor when absent.
    #[serde(default)]
    pub space_id: Option<String>,
    pub target_groups: BTreeSet<String>,
    pub kind: RecommendationKind,
    pub templates: BTreeMap<GamerType, String>,
    #[serde(default)]
    pub validation: Option<ValidationSpec>,
    /// Entity a Task asks the user to act on.
    #[serde(default)]
    pub involved_object: Option<String>,
    /// Dedup horizon per (rule, user). Defaults to the condition cooldown.
    #[serde(default)]
    pub cooldown: Option<Span>,
    /// Actions needed for the badge; `{N}` renders the remainder.
    #[serde(default)]
    pub n_required: u32,
    /// Counter key for `{N}`; defaults to the rule id.
    #[serde(default)]
    pub badge: Option<String>,
    #[serde(default)]
    pub preference_theme: Option<String>,
    #[serde(default)]
    pub campaign_id: Option<String>,
}

impl RecommendationRule {
    pub fn badge_key(&self) -> &str {
        self.badge.as_deref().unwrap_or(&self.id)
    }
}

/// The three personalised texts of the air-quality scenario.
pub fn air_quality_templates() -> BTreeMap<GamerType, String> {
    BTreeMap::from([
        (
            GamerType::Humanitarian,
            "The air quality can become better. Let's open the door for 2 minutes to freshen up and get closer to earning the Refresher Badge (after {N} times of action)".to_owned(),
        ),
        (
            GamerType::Socialiser,
            "The air quality is poor for all in the office. Open the door for 2 minutes to freshen the atmosphere and become the Fresh Air Challenge team leader for now".to_owned(),
        ),
        (
            GamerType::FreeSpirit,
            "The air quality is quite poor. Open the door for 2 minutes to freshen up and get closer to unlocking a new functionality ({N} more actions remaining)".to_owned(),
        ),
    ])
}

pub fn render_template(template: &str, n_required: u32, n_done: u32) -> String {
    template.replace("{N}", &n_required.saturating_sub(n_done).to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeedbackResponse {
    Accept,
    Reject,
    Answer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Feedback {
    pub response: FeedbackResponse,
    #[serde(default)]
    pub answer: Option<String>,
    #[serde(default)]
    pub at: Option<Timestamp>,
}

impl Feedback {
    pub fn accept() -> Self {
        Feedback { response: FeedbackResponse::Accept, answer: None, at: None }
    }

    pub fn reject() -> Self {
        Feedback { response: FeedbackResponse::Reject, answer: None, at: None }
    }

    pub fn answer(text: &str) -> Self {
        Feedback { response: FeedbackResponse::Answer, answer: Some(text.to_owned()), at: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub id: String,
    pub rule_id: String,
    pub user_id: String,
    pub kind: RecommendationKind,
    pub content: String,
    pub gamer_type: GamerType,
    pub state: RecommendationState,
    pub space_id: Option<String>,
    pub created_at: Timestamp,
    pub delivered_at: Option<Timestamp>,
    pub window_end: Option<Timestamp>,
    pub expires_at: Option<Timestamp>,
    pub trigger_value: f64,
    pub feedback: Option<Feedback>,
    pub resolved_at: Option<Timestamp>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecommendationEvent {
    pub seq: u64,
    pub recommendation_id: String,
    pub user_id: String,
    pub from: Option<RecommendationState>,
    pub to: RecommendationState,
    pub at: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence: Option<ValidationEvidence>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationEvidence {
    pub action_at: Timestamp,
    pub effect_at: Timestamp,
    pub effect_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "kebab-case")]
pub enum ValidationOutcome {
    Validated,
    Failed,
    StillPending,
}

#[derive(Clone, Debug)]
pub struct RecommenderConfig {
    pub precedence: Vec<GamerType>,
    pub validation_window: Span,
    pub relative_drop: f64,
    pub evidence_threshold: u32,
    pub message_expiry: Span,
}

impl Default for RecommenderConfig {
    fn default() -> Self {
        RecommenderConfig {
            precedence: vec![GamerType::Player, GamerType::Socialiser, GamerType::Humanitarian, GamerType::FreeSpirit],
            validation_window: Span::from_mins(30),
            relative_drop: 0.10,
            evidence_threshold: 3,
            message_expiry: Span::from_hours(24),
        }
    }
}

#[derive(Default)]
struct State {
    groups: Vec<GroupDefinition>,
    taxonomy: PreferenceTaxonomy,
    users: BTreeMap<String, UserProfile>,
    rules: BTreeMap<String, RecommendationRule>,
    recommendations: BTreeMap<String, Recommendation>,
    /// Latest creation time per (rule, user).
    last_created: BTreeMap<(String, String), Timestamp>,
    events: Vec<RecommendationEvent>,
    /// Observed values per (entity, attribute), ascending by time.
    observations: BTreeMap<(String, String), Vec<(Timestamp, Scalar)>>,
    next_rule: u64,
    next_rec: u64,
}

impl State {
    fn transition(&mut self, id: &str, to: RecommendationState, at: Timestamp, evidence: Option<ValidationEvidence>) -> Result<(), RecommenderError> {
        let rec = self.recommendations.get_mut(id).ok_or_else(|| RecommenderError::UnknownRecommendation(id.to_owned()))?;
        if !rec.state.can_transition(rec.kind, to) {
            return Err(RecommenderError::WrongState { state: rec.state, expected: RecommendationState::Delivered });
        }
        let from = rec.state;
        rec.state = to;
        match to {
            RecommendationState::Delivered => rec.delivered_at = Some(at),
            s if s.is_terminal() => rec.resolved_at = Some(at),
            _ => {}
        }
        let seq = self.events.len() as u64 + 1;
        let user_id = rec.user_id.clone();
        self.events.push(RecommendationEvent { seq, recommendation_id: id.to_owned(), user_id, from: Some(from), to, at, evidence });
        Ok(())
    }

    fn recompute_groups(&mut self, user_id: &str) -> Result<(), RecommenderError> {
        let Some(user) = self.users.get(user_id) else { return Ok(()) };
        let inferred = infer_groups(&user.preferences, &user.asserted_groups, &self.groups, &self.taxonomy)?;
        if let Some(u) = self.users.get_mut(user_id) {
            u.inferred_groups = inferred;
        }
        Ok(())
    }

    fn first_after(&self, key: &(String, String), from: Timestamp, to: Timestamp, pred: impl Fn(&Scalar) -> bool) -> Option<(Timestamp, Scalar)> {
        self.observations.get(key)?.iter().find(|(t, v)| *t >= from && *t <= to && pred(v)).cloned()
    }
}

pub struct Recommender {
    config: RecommenderConfig,
    broker: Arc<ContextBroker>,
    streams: Arc<StreamProcessor>,
    fusion: Arc<FusionEngine>,
    state: RwLock<State>,
    feedback_lock: Mutex<()>,
}

impl fmt::Debug for Recommender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Recommender").field("rules", &self.state.read().rules.len()).finish()
    }
}

impl Recommender {
    pub fn new(broker: Arc<ContextBroker>, streams: Arc<StreamProcessor>, fusion: Arc<FusionEngine>, config: RecommenderConfig) -> Self {
        Recommender { config, broker, streams, fusion, state: RwLock::new(State::default()), feedback_lock: Mutex::new(()) }
    }

    pub fn config(&self) -> &RecommenderConfig {
        &self.config
    }

    // -- groups and users --

    pub fn register_group(&self, def: GroupDefinition) -> Result<(), RecommenderError> {
        def.expression.normalize()?;
        let mut st = self.state.write();
        st.groups.retain(|g| g.name != def.name);
        st.groups.push(def);
        let ids: Vec<String> = st.users.keys().cloned().collect();
        for id in ids {
            st.recompute_groups(&id)?;
        }
        Ok(())
    }

    pub fn groups(&self) -> Vec<GroupDefinition> {
        self.state.read().groups.clone()
    }

    pub fn set_taxonomy(&self, taxonomy: PreferenceTaxonomy) -> Result<(), RecommenderError> {
        let mut st = self.state.write();
        st.taxonomy = taxonomy;
        let ids: Vec<String> = st.users.keys().cloned().collect();
        for id in ids {
            st.recompute_groups(&id)?;
        }
        Ok(())
    }

    /// Creates or replaces a profile. Counters and evidence survive a replace
    /// when the new profile leaves them empty.
    pub fn upsert_user(&self, mut profile: UserProfile) -> Result<UserProfile, RecommenderError> {
        let out = {
            let mut st = self.state.write();
            if let Some(prev) = st.users.get(&profile.user_id) {
                if profile.action_counters.is_empty() {
                    profile.action_counters = prev.action_counters.clone();
                }
                if profile.preference_evidence.is_empty() {
                    profile.preference_evidence = prev.preference_evidence.clone();
                }
            }
            profile.inferred_groups = infer_groups(&profile.preferences, &profile.asserted_groups, &st.groups, &st.taxonomy)?;
            st.users.insert(profile.user_id.clone(), profile.clone());
            profile
        };
        self.emit_person(&out);
        Ok(out)
    }

    pub fn user(&self, id: &str) -> Result<UserProfile, RecommenderError> {
        self.state.read().users.get(id).cloned().ok_or_else(|| RecommenderError::UnknownUser(id.to_owned()))
    }

    pub fn users(&self) -> Vec<UserProfile> {
        self.state.read().users.values().cloned().collect()
    }

    fn emit_person(&self, p: &UserProfile) {
        let mut rec = SourceRecord::new(SourceKind::UserProfile, &p.user_id, Timestamp::from_millis(0))
            .nodes("preferences", p.preferences.iter().map(|s| local_name(s)).map(|s| s.to_owned()).collect::<Vec<_>>().iter().map(String::as_str))
            .field("groups", PropertyValue::List(p.groups().into_iter().map(|g| PropertyValue::Literal(Scalar::Text(g))).collect()))
            .nodes("activity_locations", p.activity_locations.iter().map(String::as_str));
        if let Some(g) = p.gamer_types().into_iter().next().and(p.gamer_type_among(&self.config.precedence, |_| true)) {
            rec = rec.node("gamer_type", &format!("ebio:{}", g.name())).typed(&format!("ebio:{}", g.name()));
        }
        if let Err(e) = self.fusion.ingest(&rec) {
            tracing::warn!(user = %p.user_id, error = %e, "person document rejected");
        }
    }

    // -- rules --

    fn space_for_stream(&self, stream_id: &str) -> Result<Option<String>, RecommenderError> {
        let stream = self.streams.stream(stream_id)?;
        Ok(match self.broker.get_entity(&stream.sensor_id) {
            Ok(r) if r.entity_type.is_space() => Some(r.id),
            Ok(r) => r.located_in().map(str::to_owned),
            Err(_) => None,
        })
    }

    pub fn register_rule(&self, mut rule: RecommendationRule) -> Result<String, RecommenderError> {
        let stream = self.streams.stream(&rule.condition.stream_id)?;
        for g in &rule.target_groups {
            if let Some(t) = GamerType::from_group(g) {
                if !rule.templates.contains_key(&t) {
                    return Err(RecommenderError::MissingTemplate(t));
                }
            }
        }
        if rule.templates.is_empty() {
            return Err(RecommenderError::InvalidRule("no content templates".into()));
        }
        match rule.kind {
            RecommendationKind::Task => {
                if rule.validation.is_none() {
                    let object = rule.involved_object.clone();
                    if let Some(obj) = object.filter(|o| self.broker.get_entity(o).is_ok_and(|r| !r.attributes.is_empty())) {
                        return Err(RecommenderError::TaskWithoutValidation(obj));
                    }
                }
            }
            k if rule.validation.is_some() => return Err(RecommenderError::ValidationOnNonTask(k)),
            _ => {}
        }
        if rule.space_id.is_none() {
            rule.space_id = self.space_for_stream(&rule.condition.stream_id)?;
        }
        if let Some(v) = &mut rule.validation {
            if v.metric.is_none() {
                v.metric = Some((stream.sensor_id.clone(), stream.attribute.clone()));
            }
        }
        if rule.cooldown.is_none() {
            rule.cooldown = Some(rule.condition.cooldown.unwrap_or(stream.frequency));
        }
        rule.condition_id = self.streams.register_condition(rule.condition.clone())?;
        let mut st = self.state.write();
        st.next_rule += 1;
        rule.id = format!("rule-{}", st.next_rule);
        let id = rule.id.clone();
        st.rules.insert(id.clone(), rule);
        Ok(id)
    }

    pub fn rule(&self, id: &str) -> Result<RecommendationRule, RecommenderError> {
        self.state.read().rules.get(id).cloned().ok_or_else(|| RecommenderError::UnknownRule(id.to_owned()))
    }

    pub fn rules(&self) -> Vec<RecommendationRule> {
        self.state.read().rules.values().cloned().collect()
    }

    /// Users targeted by `rule`: group overlap and activity in the bound space.
    pub fn targets(&self, rule: &RecommendationRule) -> Vec<UserProfile> {
        let st = self.state.read();
        st.users
            .values()
            .filter(|u| u.groups().iter().any(|g| rule.target_groups.contains(g)))
            .filter(|u| rule.space_id.as_ref().is_none_or(|s| u.activity_locations.contains(s)))
            .cloned()
            .collect()
    }

    pub fn select_content(&self, rule: &RecommendationRule, profile: &UserProfile) -> Result<(GamerType, String), RecommenderError> {
        let g = profile
            .gamer_type_among(&self.config.precedence, |g| rule.templates.contains_key(&g))
            .ok_or(RecommenderError::NoMatchingTemplate)?;
        let done = profile.action_counters.get(rule.badge_key()).copied().unwrap_or(0);
        Ok((g, render_template(&rule.templates[&g], rule.n_required, done)))
    }

    /// Creates and delivers one recommendation per targeted user for every
    /// rule bound to `condition_id`.
    pub fn on_condition_fired(&self, condition_id: &str, value: f64, at: Timestamp) -> Vec<Recommendation> {
        let rules: Vec<RecommendationRule> = self.state.read().rules.values().filter(|r| r.condition_id == condition_id).cloned().collect();
        let mut created = Vec::new();
        for rule in rules {
            let targets = self.targets(&rule);
            let mut st = self.state.write();
            for user in targets {
                let key = (rule.id.clone(), user.user_id.clone());
                let cooldown = rule.cooldown.unwrap_or(Span::ZERO);
                if st.last_created.get(&key).is_some_and(|last| at - *last < cooldown) {
                    continue;
                }
                let Ok((gamer_type, content)) = self.select_content(&rule, &user) else {
                    tracing::debug!(user = %user.user_id, rule = %rule.id, "no template for user");
                    continue;
                };
                st.next_rec += 1;
                let id = format!("rec-{}", st.next_rec);
                let window = rule.validation.as_ref().map(|v| v.window.unwrap_or(self.config.validation_window));
                let rec = Recommendation {
                    id: id.clone(),
                    rule_id: rule.id.clone(),
                    user_id: user.user_id.clone(),
                    kind: rule.kind,
                    content,
                    gamer_type,
                    state: RecommendationState::Pending,
                    space_id: rule.space_id.clone(),
                    created_at: at,
                    delivered_at: None,
                    window_end: window.map(|w| at + w),
                    expires_at: if window.is_none() { Some(at + self.config.message_expiry) } else { None },
                    trigger_value: value,
                    feedback: None,
                    resolved_at: None,
                };
                st.recommendations.insert(id.clone(), rec);
                let seq = st.events.len() as u64 + 1;
                st.events.push(RecommendationEvent {
                    seq,
                    recommendation_id: id.clone(),
                    user_id: user.user_id.clone(),
                    from: None,
                    to: RecommendationState::Pending,
                    at,
                    evidence: None,
                });
                st.transition(&id, RecommendationState::Delivered, at, None).expect("pending recommendation can be delivered");
                st.last_created.insert(key, at);
                created.push(st.recommendations[&id].clone());
            }
        }
        for r in &created {
            self.emit_recommendation(r);
        }
        created
    }

    fn emit_recommendation(&self, r: &Recommendation) {
        let kind_class = match r.kind {
            RecommendationKind::Task => "ebio:Task",
            RecommendationKind::Message => "ebio:Message",
            RecommendationKind::Quiz => "ebio:Quiz",
        };
        let rec = SourceRecord::new(SourceKind::Recommendation, &r.id, r.created_at)
            .typed(kind_class)
            .text("rule_id", &r.rule_id)
            .node("user_id", &r.user_id)
            .text("content", &r.content)
            .text("state", &format!("{:?}", r.state))
            .time("created_at", r.created_at);
        if let Err(e) = self.fusion.ingest(&rec) {
            tracing::warn!(recommendation = %r.id, error = %e, "recommendation document rejected");
        }
    }

    pub fn recommendation(&self, id: &str) -> Result<Recommendation, RecommenderError> {
        self.state.read().recommendations.get(id).cloned().ok_or_else(|| RecommenderError::UnknownRecommendation(id.to_owned()))
    }

    pub fn recommendations_for(&self, user_id: &str, state: Option<RecommendationState>) -> Vec<Recommendation> {
        self.state
            .read()
            .recommendations
            .values()
            .filter(|r| r.user_id == user_id && state.is_none_or(|s| r.state == s))
            .cloned()
            .collect()
    }

    pub fn recommendations(&self) -> Vec<Recommendation> {
        self.state.read().recommendations.values().cloned().collect()
    }

    pub fn events(&self) -> Vec<RecommendationEvent> {
        self.state.read().events.clone()
    }

    // -- feedback and validation --

    fn credit_acceptance(&self, st: &mut State, rec: &Recommendation) -> Result<(), RecommenderError> {
        let theme = st.rules.get(&rec.rule_id).and_then(|r| r.preference_theme.clone());
        let Some(theme) = theme else { return Ok(()) };
        let threshold = self.config.evidence_threshold;
        let Some(user) = st.users.get_mut(&rec.user_id) else { return Ok(()) };
        let count = user.preference_evidence.entry(theme.clone()).or_default();
        *count += 1;
        if *count >= threshold && user.preferences.insert(theme) {
            let id = rec.user_id.clone();
            st.recompute_groups(&id)?;
        }
        Ok(())
    }

    pub fn record_feedback(&self, rec_id: &str, mut feedback: Feedback, now: Timestamp) -> Result<Recommendation, RecommenderError> {
        let _serial = self.feedback_lock.lock();
        feedback.at.get_or_insert(now);
        let (rec, profile_changed) = {
            let mut st = self.state.write();
            let rec = st.recommendations.get(rec_id).cloned().ok_or_else(|| RecommenderError::UnknownRecommendation(rec_id.to_owned()))?;
            if rec.state != RecommendationState::Delivered {
                return Err(RecommenderError::WrongState { state: rec.state, expected: RecommendationState::Delivered });
            }
            st.recommendations.get_mut(rec_id).expect("present").feedback = Some(feedback.clone());
            let validated_task = rec.kind == RecommendationKind::Task && rec.window_end.is_some();
            let next = match feedback.response {
                FeedbackResponse::Reject => Some(RecommendationState::Rejected),
                _ if validated_task => None,
                _ => Some(RecommendationState::Accepted),
            };
            let mut changed = false;
            if let Some(to) = next {
                st.transition(rec_id, to, now, None)?;
                if to == RecommendationState::Accepted {
                    let before = st.users.get(&rec.user_id).map(|u| u.preferences.len());
                    self.credit_acceptance(&mut st, &rec)?;
                    changed = before != st.users.get(&rec.user_id).map(|u| u.preferences.len());
                }
            }
            (st.recommendations[rec_id].clone(), changed)
        };
        let response = match feedback.response {
            FeedbackResponse::Accept => "accept",
            FeedbackResponse::Reject => "reject",
            FeedbackResponse::Answer => "answer",
        };
        let mut doc = SourceRecord::new(SourceKind::Feedback, &rec.id, now)
            .node("recommendation_id", &rec.id)
            .node("user_id", &rec.user_id)
            .text("response", response)
            .time("given_at", now);
        if let Some(a) = &feedback.answer {
            doc = doc.text("answer", a);
        }
        if let Err(e) = self.fusion.ingest(&doc) {
            tracing::warn!(recommendation = %rec.id, error = %e, "feedback document rejected");
        }
        self.emit_recommendation(&rec);
        if profile_changed {
            if let Ok(p) = self.user(&rec.user_id) {
                self.emit_person(&p);
            }
        }
        Ok(rec)
    }

    /// Records a value seen on the infrastructure, used as validation
    /// evidence.
    pub fn observe(&self, entity: &str, attribute: &str, value: Scalar, at: Timestamp) {
        let mut st = self.state.write();
        let series = st.observations.entry((entity.to_owned(), attribute.to_owned())).or_default();
        let pos = series.partition_point(|(t, _)| *t <= at);
        series.insert(pos, (at, value));
    }

    /// Whether `(entity, attribute)` is needed as validation evidence.
    pub fn wants_observation(&self, entity: &str, attribute: &str) -> bool {
        self.state.read().rules.values().filter_map(|r| r.validation.as_ref()).any(|v| {
            (v.object_id == entity && v.action_attribute == attribute)
                || v.metric.as_ref().is_some_and(|(s, a)| s == entity && a == attribute)
        })
    }

    pub fn validate_task(&self, rec_id: &str, now: Timestamp) -> Result<ValidationOutcome, RecommenderError> {
        let _serial = self.feedback_lock.lock();
        let (outcome, rec) = {
            let mut st = self.state.write();
            let rec = st.recommendations.get(rec_id).cloned().ok_or_else(|| RecommenderError::UnknownRecommendation(rec_id.to_owned()))?;
            let rule = st.rules.get(&rec.rule_id).cloned().ok_or_else(|| RecommenderError::UnknownRule(rec.rule_id.clone()))?;
            let spec = rule.validation.clone().ok_or(RecommenderError::NoValidationSpec)?;
            if rec.state != RecommendationState::Delivered {
                return Err(RecommenderError::WrongState { state: rec.state, expected: RecommendationState::Delivered });
            }
            let start = rec.delivered_at.unwrap_or(rec.created_at);
            let end = rec.window_end.unwrap_or(start + self.config.validation_window);
            let horizon = now.min(end);
            let action = st.first_after(&(spec.object_id.clone(), spec.action_attribute.clone()), start, horizon, |v| v.truthy() == Some(true));
            let threshold = spec.effect_threshold.unwrap_or(rule.condition.threshold);
            let drop = spec.relative_drop.unwrap_or(self.config.relative_drop);
            let target = rec.trigger_value * (1.0 - drop);
            let effect = action.as_ref().and_then(|(action_at, _)| {
                let metric = spec.metric.clone()?;
                st.first_after(&metric, *action_at, horizon, |v| v.as_f64().is_some_and(|x| x < threshold || x <= target))
            });
            let outcome = match (action, effect) {
                (Some((action_at, _)), Some((effect_at, v))) => {
                    let evidence = ValidationEvidence { action_at, effect_at, effect_value: v.as_f64().unwrap_or(f64::NAN) };
                    st.transition(rec_id, RecommendationState::Validated, effect_at.max(action_at), Some(evidence))?;
                    let badge = rule.badge_key().to_owned();
                    if let Some(u) = st.users.get_mut(&rec.user_id) {
                        *u.action_counters.entry(badge).or_default() += 1;
                    }
                    self.credit_acceptance(&mut st, &rec)?;
                    ValidationOutcome::Validated
                }
                _ if now >= end => {
                    st.transition(rec_id, RecommendationState::Failed, end, None)?;
                    ValidationOutcome::Failed
                }
                _ => ValidationOutcome::StillPending,
            };
            (outcome, st.recommendations[rec_id].clone())
        };
        if outcome != ValidationOutcome::StillPending {
            self.emit_recommendation(&rec);
        }
        Ok(outcome)
    }

    /// Resolves validation windows and expiries due by `now`.
    pub fn sweep(&self, now: Timestamp) -> Vec<(String, RecommendationState)> {
        let open: Vec<Recommendation> = self
            .state
            .read()
            .recommendations
            .values()
            .filter(|r| r.state == RecommendationState::Delivered)
            .cloned()
            .collect();
        let mut out = Vec::new();
        for r in open {
            if r.window_end.is_some() {
                if let Ok(o) = self.validate_task(&r.id, now) {
                    if o != ValidationOutcome::StillPending {
                        out.push((r.id.clone(), self.recommendation(&r.id).map(|x| x.state).unwrap_or(r.state)));
                    }
                }
            } else if r.expires_at.is_some_and(|e| now >= e) {
                let done = {
                    let mut st = self.state.write();
                    st.recommendations.get(&r.id).is_some_and(|x| x.state == RecommendationState::Delivered)
                        && st.transition(&r.id, RecommendationState::Expired, r.expires_at.unwrap_or(now), None).is_ok()
                };
                if done {
                    out.push((r.id.clone(), RecommendationState::Expired));
                    if let Ok(x) = self.recommendation(&r.id) {
                        self.emit_recommendation(&x);
                    }
                }
            }
        }
        self.prune_observations(now);
        out
    }

    fn prune_observations(&self, now: Timestamp) {
        let mut st = self.state.write();
        let oldest_open = st
            .recommendations
            .values()
            .filter(|r| r.state == RecommendationState::Delivered)
            .map(|r| r.delivered_at.unwrap_or(r.created_at))
            .min()
            .unwrap_or(now);
        for series in st.observations.values_mut() {
            let cut = series.partition_point(|(t, _)| *t < oldest_open);
            series.drain(..cut);
        }
    }
}
