//! Semantic enrichment: a small energy/behaviour vocabulary, mapping rules
//! from platform records to compacted JSON-LD, validation, and a document
//! store.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::time::Timestamp;
use crate::value::{Comparator, Scalar};

pub const ENERGY_PREFIX: &str = "entropy";
pub const ENERGY_IRI: &str = "http://entropy-project.eu/ontology/energy#";
pub const BEHAVIOUR_PREFIX: &str = "ebio";
pub const BEHAVIOUR_IRI: &str = "http://entropy-project.eu/ontology/ebio#";
pub const XSD_IRI: &str = "http://www.w3.org/2001/XMLSchema#";
pub const VOCABULARY_VERSION: &str = "1.0.0";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("term `{0}` is not in the vocabulary")]
    UnknownTerm(String),
    #[error("source field `{field}` of {kind} has no mapping")]
    UnmappedField { kind: SourceKind, field: String },
    #[error("{kind} has no field `{field}`")]
    UnknownSourceField { kind: SourceKind, field: String },
    #[error("required field `{0}` missing from the source record")]
    MissingRequiredField(String),
    #[error("rule is for {rule}, record is {record}")]
    KindMismatch { rule: SourceKind, record: SourceKind },
    #[error("no mapping rule registered for {0}")]
    NoRule(SourceKind),
    #[error("document is invalid: {0:?}")]
    InvalidDocument(Vec<Violation>),
    #[error("malformed JSON-LD: {0}")]
    Malformed(String),
}

impl FusionError {
    pub fn code(&self) -> &'static str {
        match self {
            FusionError::UnknownTerm(_) => "unknown-term",
            FusionError::UnmappedField { .. } => "unmapped-field",
            FusionError::UnknownSourceField { .. } => "unknown-field",
            FusionError::MissingRequiredField(_) => "missing-required-field",
            FusionError::KindMismatch { .. } => "kind-mismatch",
            FusionError::NoRule(_) => "no-rule",
            FusionError::InvalidDocument(_) => "invalid-document",
            FusionError::Malformed(_) => "malformed-document",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Range {
    Number,
    String,
    Boolean,
    DateTime,
    Node,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TermKind {
    Class,
    Property { range: Range },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Vocabulary {
    pub version: String,
    pub prefixes: BTreeMap<String, String>,
    pub terms: BTreeMap<String, TermKind>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        use Range::*;
        let classes = [
            "entropy:Observation",
            "entropy:Entity",
            "entropy:Sensor",
            "entropy:Room",
            "entropy:Building",
            "entropy:BuildingSpace",
            "entropy:Door",
            "entropy:AnalysisResult",
            "ebio:Person",
            "ebio:PreferenceAssertion",
            "ebio:Recommendation",
            "ebio:Task",
            "ebio:Message",
            "ebio:Quiz",
            "ebio:Feedback",
            "ebio:GamerType",
            "ebio:Humanitarian",
            "ebio:Socialiser",
            "ebio:FreeSpirit",
            "ebio:Player",
            "ebio:Preference",
            "ebio:Reward",
            "ebio:Competition",
            "ebio:Recognition",
            "ebio:Altruism",
            "ebio:Autonomy",
            "ebio:Learning",
        ];
        let properties = [
            ("entropy:hasValue", Number),
            ("entropy:unit", String),
            ("entropy:observedAt", DateTime),
            ("entropy:madeBySensor", Node),
            ("entropy:observedProperty", String),
            ("entropy:quality", String),
            ("entropy:entityType", String),
            ("entropy:locatedIn", Node),
            ("entropy:updatedAt", DateTime),
            ("entropy:algorithm", String),
            ("entropy:resultPayload", String),
            ("ebio:hasPreference", Node),
            ("ebio:hasGamerType", Node),
            ("ebio:memberOf", String),
            ("ebio:hasActivityIn", Node),
            ("ebio:recommendedTo", Node),
            ("ebio:fromRule", String),
            ("ebio:content", String),
            ("ebio:state", String),
            ("ebio:createdAt", DateTime),
            ("ebio:aboutRecommendation", Node),
            ("ebio:givenBy", Node),
            ("ebio:response", String),
            ("ebio:answer", String),
            ("ebio:givenAt", DateTime),
        ];
        let mut terms: BTreeMap<std::string::String, TermKind> =
            classes.iter().map(|c| (c.to_string(), TermKind::Class)).collect();
        terms.extend(properties.iter().map(|(p, r)| (p.to_string(), TermKind::Property { range: *r })));
        Vocabulary {
            version: VOCABULARY_VERSION.to_owned(),
            prefixes: BTreeMap::from([
                (ENERGY_PREFIX.to_owned(), ENERGY_IRI.to_owned()),
                (BEHAVIOUR_PREFIX.to_owned(), BEHAVIOUR_IRI.to_owned()),
                ("xsd".to_owned(), XSD_IRI.to_owned()),
            ]),
            terms,
        }
    }
}

impl Vocabulary {
    pub fn term(&self, term: &str) -> Option<TermKind> {
        self.terms.get(term).copied()
    }

    pub fn is_class(&self, term: &str) -> bool {
        self.term(term) == Some(TermKind::Class)
    }

    pub fn expand(&self, term: &str) -> Option<String> {
        let (prefix, local) = term.split_once(':')?;
        self.prefixes.get(prefix).map(|iri| format!("{iri}{local}"))
    }

    /// The `@context` object every emitted document carries.
    pub fn context(&self) -> BTreeMap<String, String> {
        self.prefixes.clone()
    }

    /// Standalone context document, including declared term ranges.
    pub fn context_document(&self) -> Value {
        let mut ctx = Map::new();
        for (p, iri) in &self.prefixes {
            ctx.insert(p.clone(), Value::String(iri.clone()));
        }
        let mut terms = Map::new();
        for (t, kind) in &self.terms {
            terms.insert(t.clone(), serde_json::to_value(kind).unwrap_or(Value::Null));
        }
        serde_json::json!({ "@context": ctx, "version": self.version, "terms": terms })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PropertyValue {
    Literal(Scalar),
    DateTime(Timestamp),
    Node(String),
    List(Vec<PropertyValue>),
}

impl PropertyValue {
    fn to_json(&self) -> Value {
        match self {
            PropertyValue::Literal(Scalar::Number(v)) => serde_json::Number::from_f64(*v).map_or(Value::Null, Value::Number),
            PropertyValue::Literal(Scalar::Text(s)) => Value::String(s.clone()),
            PropertyValue::Literal(Scalar::Bool(b)) => Value::Bool(*b),
            PropertyValue::DateTime(t) => serde_json::json!({ "@value": t.to_rfc3339(), "@type": "xsd:dateTime" }),
            PropertyValue::Node(id) => serde_json::json!({ "@id": id }),
            PropertyValue::List(items) => Value::Array(items.iter().map(PropertyValue::to_json).collect()),
        }
    }

    fn from_json(v: &Value) -> Result<Self, FusionError> {
        Ok(match v {
            Value::Number(n) => PropertyValue::Literal(Scalar::Number(
                n.as_f64().ok_or_else(|| FusionError::Malformed(format!("number {n}")))?,
            )),
            Value::String(s) => PropertyValue::Literal(Scalar::Text(s.clone())),
            Value::Bool(b) => PropertyValue::Literal(Scalar::Bool(*b)),
            Value::Array(items) => PropertyValue::List(items.iter().map(Self::from_json).collect::<Result<_, _>>()?),
            Value::Object(o) => {
                if let Some(Value::String(id)) = o.get("@id") {
                    PropertyValue::Node(id.clone())
                } else if let (Some(Value::String(raw)), Some("xsd:dateTime")) = (o.get("@value"), o.get("@type").and_then(Value::as_str)) {
                    PropertyValue::DateTime(Timestamp::parse_rfc3339(raw).ok_or_else(|| FusionError::Malformed(format!("bad dateTime {raw}")))?)
                } else {
                    return Err(FusionError::Malformed(format!("unsupported value object {v}")));
                }
            }
            Value::Null => return Err(FusionError::Malformed("null value".into())),
        })
    }

    fn matches(&self, range: Range) -> bool {
        match (self, range) {
            (PropertyValue::List(items), _) => items.iter().all(|i| i.matches(range)),
            (PropertyValue::Literal(Scalar::Number(v)), Range::Number) => v.is_finite(),
            (PropertyValue::Literal(Scalar::Text(_)), Range::String) => true,
            (PropertyValue::Literal(Scalar::Bool(_)), Range::Boolean) => true,
            (PropertyValue::DateTime(_), Range::DateTime) => true,
            (PropertyValue::Node(_), Range::Node) => true,
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JsonLdDocument {
    pub context: BTreeMap<String, String>,
    pub id: String,
    pub types: Vec<String>,
    pub properties: BTreeMap<String, PropertyValue>,
    pub graph: Vec<JsonLdDocument>,
}

impl JsonLdDocument {
    pub fn new(id: impl Into<String>, types: Vec<String>, context: BTreeMap<String, String>) -> Self {
        JsonLdDocument { context, id: id.into(), types, properties: BTreeMap::new(), graph: Vec::new() }
    }

    pub fn with(mut self, term: &str, value: PropertyValue) -> Self {
        self.properties.insert(term.to_owned(), value);
        self
    }

    pub fn to_value(&self) -> Value {
        self.to_value_inner(true)
    }

    fn to_value_inner(&self, top: bool) -> Value {
        let mut m = Map::new();
        if top {
            let ctx: Map<String, Value> = self.context.iter().map(|(k, v)| (k.clone(), Value::String(v.clone()))).collect();
            m.insert("@context".into(), Value::Object(ctx));
        }
        m.insert("@id".into(), Value::String(self.id.clone()));
        let types = match self.types.as_slice() {
            [one] => Value::String(one.clone()),
            many => Value::Array(many.iter().cloned().map(Value::String).collect()),
        };
        m.insert("@type".into(), types);
        for (k, v) in &self.properties {
            m.insert(k.clone(), v.to_json());
        }
        if !self.graph.is_empty() {
            m.insert("@graph".into(), Value::Array(self.graph.iter().map(|g| g.to_value_inner(false)).collect()));
        }
        Value::Object(m)
    }

    /// Canonical serialization: `@context`, `@id`, `@type`, sorted property
    /// terms, then `@graph`.
    pub fn serialize(&self) -> String {
        self.to_value().to_string()
    }

    pub fn parse(text: &str) -> Result<Self, FusionError> {
        let v: Value = serde_json::from_str(text).map_err(|e| FusionError::Malformed(e.to_string()))?;
        Self::from_value(&v)
    }

    pub fn from_value(v: &Value) -> Result<Self, FusionError> {
        Self::from_value_inner(v, None)
    }

    fn from_value_inner(v: &Value, inherited: Option<&BTreeMap<String, String>>) -> Result<Self, FusionError> {
        let obj = v.as_object().ok_or_else(|| FusionError::Malformed("document is not an object".into()))?;
        let context = match (obj.get("@context"), inherited) {
            (Some(Value::Object(c)), _) => c
                .iter()
                .map(|(k, v)| v.as_str().map(|s| (k.clone(), s.to_owned())).ok_or_else(|| FusionError::Malformed(format!("context entry {k}"))))
                .collect::<Result<_, _>>()?,
            (None, Some(ctx)) => ctx.clone(),
            (None, None) => BTreeMap::new(),
            (Some(other), _) => return Err(FusionError::Malformed(format!("unsupported @context {other}"))),
        };
        let id = obj.get("@id").and_then(Value::as_str).ok_or_else(|| FusionError::Malformed("missing @id".into()))?.to_owned();
        let types = match obj.get("@type") {
            Some(Value::String(s)) => vec![s.clone()],
            Some(Value::Array(a)) => a
                .iter()
                .map(|t| t.as_str().map(str::to_owned).ok_or_else(|| FusionError::Malformed("non-string @type".into())))
                .collect::<Result<_, _>>()?,
            _ => return Err(FusionError::Malformed("missing @type".into())),
        };
        let mut properties = BTreeMap::new();
        let mut graph = Vec::new();
        for (k, val) in obj {
            match k.as_str() {
                "@context" | "@id" | "@type" => {}
                "@graph" => {
                    let items = val.as_array().ok_or_else(|| FusionError::Malformed("@graph is not a list".into()))?;
                    for g in items {
                        graph.push(Self::from_value_inner(g, Some(&context))?);
                    }
                }
                _ => {
                    properties.insert(k.clone(), PropertyValue::from_json(val)?);
                }
            }
        }
        Ok(JsonLdDocument { context, id, types, properties, graph })
    }

    /// Timestamp component of a `urn:entropy:<kind>:<source>:<ms>` id.
    pub fn id_timestamp(&self) -> Option<Timestamp> {
        self.id.rsplit_once(':').and_then(|(_, ms)| ms.parse().ok()).map(Timestamp::from_millis)
    }

    /// Every term the document uses, nested nodes included.
    pub fn terms(&self) -> Vec<String> {
        let mut out: Vec<String> = self.types.iter().chain(self.properties.keys()).cloned().collect();
        for g in &self.graph {
            out.extend(g.terms());
        }
        out
    }
}

impl fmt::Display for JsonLdDocument {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.serialize())
    }
}

impl Serialize for JsonLdDocument {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_value().serialize(s)
    }
}

impl<'de> Deserialize<'de> for JsonLdDocument {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Value::deserialize(d)?;
        JsonLdDocument::from_value(&v).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    UnknownPrefix,
    UnknownTerm,
    NotAClass,
    NotAProperty,
    RangeMismatch,
    MissingType,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub node: String,
    pub term: String,
    pub kind: ViolationKind,
}

pub fn validate(vocab: &Vocabulary, doc: &JsonLdDocument) -> Vec<Violation> {
    let mut out = Vec::new();
    validate_node(vocab, &doc.context, doc, &mut out);
    out
}

fn validate_node(vocab: &Vocabulary, ctx: &BTreeMap<String, String>, doc: &JsonLdDocument, out: &mut Vec<Violation>) {
    let mut flag = |term: &str, kind| out.push(Violation { node: doc.id.clone(), term: term.to_owned(), kind });
    let resolvable = |term: &str| {
        term.split_once(':')
            .is_some_and(|(p, _)| ctx.get(p).is_some_and(|iri| vocab.prefixes.get(p) == Some(iri)))
    };
    if doc.types.is_empty() {
        flag("@type", ViolationKind::MissingType);
    }
    for t in &doc.types {
        match vocab.term(t) {
            None => flag(t, ViolationKind::UnknownTerm),
            Some(TermKind::Property { .. }) => flag(t, ViolationKind::NotAClass),
            Some(TermKind::Class) if !resolvable(t) => flag(t, ViolationKind::UnknownPrefix),
            Some(TermKind::Class) => {}
        }
    }
    for (term, value) in &doc.properties {
        match vocab.term(term) {
            None => flag(term, ViolationKind::UnknownTerm),
            Some(TermKind::Class) => flag(term, ViolationKind::NotAProperty),
            Some(TermKind::Property { .. }) if !resolvable(term) => flag(term, ViolationKind::UnknownPrefix),
            Some(TermKind::Property { range }) if !value.matches(range) => flag(term, ViolationKind::RangeMismatch),
            Some(TermKind::Property { .. }) => {}
        }
    }
    for g in &doc.graph {
        validate_node(vocab, ctx, g, out);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SourceKind {
    Measurement,
    EntityRecord,
    UserProfile,
    Recommendation,
    Feedback,
    AnalysisResult,
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl SourceKind {
    pub fn urn_kind(self) -> &'static str {
        match self {
            SourceKind::Measurement => "observation",
            SourceKind::EntityRecord => "entity",
            SourceKind::UserProfile => "person",
            SourceKind::Recommendation => "recommendation",
            SourceKind::Feedback => "feedback",
            SourceKind::AnalysisResult => "analysis",
        }
    }

    /// Declared fields and whether each is required.
    pub fn fields(self) -> &'static [(&'static str, bool)] {
        match self {
            SourceKind::Measurement => &[
                ("sensor_id", true),
                ("attribute", true),
                ("value", true),
                ("unit", true),
                ("observed_at", true),
                ("quality", true),
            ],
            SourceKind::EntityRecord => &[("entity_type", true), ("located_in", false), ("updated_at", true)],
            SourceKind::UserProfile => &[
                ("gamer_type", false),
                ("preferences", true),
                ("groups", true),
                ("activity_locations", true),
            ],
            SourceKind::Recommendation => &[
                ("rule_id", true),
                ("user_id", true),
                ("content", true),
                ("state", true),
                ("created_at", true),
            ],
            SourceKind::Feedback => &[
                ("recommendation_id", true),
                ("user_id", true),
                ("response", true),
                ("answer", false),
                ("given_at", true),
            ],
            SourceKind::AnalysisResult => &[("algorithm", true), ("payload", true)],
        }
    }
}

/// A platform record flattened for enrichment.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceRecord {
    pub kind: SourceKind,
    pub source_id: String,
    pub timestamp: Timestamp,
    /// Extra class terms added next to the rule's target class.
    pub extra_types: Vec<String>,
    pub fields: BTreeMap<String, PropertyValue>,
}

impl SourceRecord {
    pub fn new(kind: SourceKind, source_id: impl Into<String>, timestamp: Timestamp) -> Self {
        SourceRecord { kind, source_id: source_id.into(), timestamp, extra_types: Vec::new(), fields: BTreeMap::new() }
    }

    pub fn field(mut self, name: &str, value: PropertyValue) -> Self {
        self.fields.insert(name.to_owned(), value);
        self
    }

    pub fn text(self, name: &str, value: &str) -> Self {
        self.field(name, PropertyValue::Literal(Scalar::Text(value.to_owned())))
    }

    pub fn number(self, name: &str, value: f64) -> Self {
        self.field(name, PropertyValue::Literal(Scalar::Number(value)))
    }

    pub fn time(self, name: &str, value: Timestamp) -> Self {
        self.field(name, PropertyValue::DateTime(value))
    }

    pub fn node(self, name: &str, id: &str) -> Self {
        self.field(name, PropertyValue::Node(id.to_owned()))
    }

    pub fn nodes<'a>(self, name: &str, ids: impl IntoIterator<Item = &'a str>) -> Self {
        self.field(name, PropertyValue::List(ids.into_iter().map(|i| PropertyValue::Node(i.to_owned())).collect()))
    }

    pub fn typed(mut self, class: &str) -> Self {
        self.extra_types.push(class.to_owned());
        self
    }

    pub fn document_id(&self) -> String {
        format!("urn:entropy:{}:{}:{}", self.kind.urn_kind(), self.source_id, self.timestamp.as_millis())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MappingRule {
    pub source: SourceKind,
    pub target_class: String,
    /// Source field name to property term.
    pub fields: BTreeMap<String, String>,
}

impl MappingRule {
    pub fn new(source: SourceKind, target_class: &str, fields: &[(&str, &str)]) -> Self {
        MappingRule {
            source,
            target_class: target_class.to_owned(),
            fields: fields.iter().map(|(f, t)| (f.to_string(), t.to_string())).collect(),
        }
    }

    /// Checks terms and field totality.
    pub fn check(&self, vocab: &Vocabulary) -> Result<(), FusionError> {
        if !vocab.is_class(&self.target_class) {
            return Err(FusionError::UnknownTerm(self.target_class.clone()));
        }
        let declared = self.source.fields();
        for (field, term) in &self.fields {
            if !declared.iter().any(|(f, _)| f == field) {
                return Err(FusionError::UnknownSourceField { kind: self.source, field: field.clone() });
            }
            if !matches!(vocab.term(term), Some(TermKind::Property { .. })) {
                return Err(FusionError::UnknownTerm(term.clone()));
            }
        }
        if let Some((f, _)) = declared.iter().find(|(f, _)| !self.fields.contains_key(*f)) {
            return Err(FusionError::UnmappedField { kind: self.source, field: f.to_string() });
        }
        Ok(())
    }

    pub fn defaults() -> Vec<MappingRule> {
        vec![
            MappingRule::new(
                SourceKind::Measurement,
                "entropy:Observation",
                &[
                    ("sensor_id", "entropy:madeBySensor"),
                    ("attribute", "entropy:observedProperty"),
                    ("value", "entropy:hasValue"),
                    ("unit", "entropy:unit"),
                    ("observed_at", "entropy:observedAt"),
                    ("quality", "entropy:quality"),
                ],
            ),
            MappingRule::new(
                SourceKind::EntityRecord,
                "entropy:Entity",
                &[("entity_type", "entropy:entityType"), ("located_in", "entropy:locatedIn"), ("updated_at", "entropy:updatedAt")],
            ),
            MappingRule::new(
                SourceKind::UserProfile,
                "ebio:Person",
                &[
                    ("gamer_type", "ebio:hasGamerType"),
                    ("preferences", "ebio:hasPreference"),
                    ("groups", "ebio:memberOf"),
                    ("activity_locations", "ebio:hasActivityIn"),
                ],
            ),
            MappingRule::new(
                SourceKind::Recommendation,
                "ebio:Recommendation",
                &[
                    ("rule_id", "ebio:fromRule"),
                    ("user_id", "ebio:recommendedTo"),
                    ("content", "ebio:content"),
                    ("state", "ebio:state"),
                    ("created_at", "ebio:createdAt"),
                ],
            ),
            MappingRule::new(
                SourceKind::Feedback,
                "ebio:Feedback",
                &[
                    ("recommendation_id", "ebio:aboutRecommendation"),
                    ("user_id", "ebio:givenBy"),
                    ("response", "ebio:response"),
                    ("answer", "ebio:answer"),
                    ("given_at", "ebio:givenAt"),
                ],
            ),
            MappingRule::new(
                SourceKind::AnalysisResult,
                "entropy:AnalysisResult",
                &[("algorithm", "entropy:algorithm"), ("payload", "entropy:resultPayload")],
            ),
        ]
    }
}

/// Pure enrichment of one record under one rule.
pub fn enrich(vocab: &Vocabulary, record: &SourceRecord, rule: &MappingRule) -> Result<JsonLdDocument, FusionError> {
    if rule.source != record.kind {
        return Err(FusionError::KindMismatch { rule: rule.source, record: record.kind });
    }
    for (field, required) in record.kind.fields() {
        if *required && !record.fields.contains_key(*field) {
            return Err(FusionError::MissingRequiredField(field.to_string()));
        }
    }
    let mut types = vec![rule.target_class.clone()];
    for t in &record.extra_types {
        if !vocab.is_class(t) {
            return Err(FusionError::UnknownTerm(t.clone()));
        }
        if !types.contains(t) {
            types.push(t.clone());
        }
    }
    let mut doc = JsonLdDocument::new(record.document_id(), types, vocab.context());
    for (field, value) in &record.fields {
        let term = rule.fields.get(field).ok_or_else(|| FusionError::UnknownSourceField { kind: record.kind, field: field.clone() })?;
        doc.properties.insert(term.clone(), value.clone());
    }
    Ok(doc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyFilter {
    pub term: String,
    pub comparator: Comparator,
    pub value: Scalar,
}

impl PropertyFilter {
    fn matches(&self, doc: &JsonLdDocument) -> bool {
        match doc.properties.get(&self.term) {
            Some(PropertyValue::Literal(v)) => self.comparator.eval(v, &self.value),
            Some(PropertyValue::Node(id)) => self.comparator.eval(&Scalar::Text(id.clone()), &self.value),
            Some(PropertyValue::DateTime(t)) => match &self.value {
                Scalar::Text(s) => Timestamp::parse_rfc3339(s).is_some_and(|v| self.comparator.holds(t.cmp(&v))),
                Scalar::Number(ms) => self.comparator.eval_f64(t.as_millis() as f64, *ms),
                Scalar::Bool(_) => false,
            },
            Some(PropertyValue::List(items)) => items.iter().any(|i| match i {
                PropertyValue::Literal(v) => self.comparator.eval(v, &self.value),
                PropertyValue::Node(id) => self.comparator.eval(&Scalar::Text(id.clone()), &self.value),
                _ => false,
            }),
            None => false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DocumentQuery {
    #[serde(default)]
    pub class: Option<String>,
    #[serde(default)]
    pub filters: Vec<PropertyFilter>,
    #[serde(default)]
    pub from: Option<Timestamp>,
    #[serde(default)]
    pub to: Option<Timestamp>,
}

impl DocumentQuery {
    pub fn matches(&self, doc: &JsonLdDocument) -> bool {
        let ts = doc.id_timestamp();
        self.class.as_ref().is_none_or(|c| doc.types.contains(c))
            && self.filters.iter().all(|f| f.matches(doc))
            && self.from.is_none_or(|f| ts.is_some_and(|t| t >= f))
            && self.to.is_none_or(|to| ts.is_some_and(|t| t < to))
    }
}

/// Validated JSON-LD documents keyed by id; last write wins.
#[derive(Debug, Default)]
pub struct DocumentStore {
    docs: RwLock<BTreeMap<String, JsonLdDocument>>,
}

impl DocumentStore {
    pub fn insert(&self, doc: JsonLdDocument) -> String {
        let id = doc.id.clone();
        self.docs.write().insert(id.clone(), doc);
        id
    }

    pub fn get(&self, id: &str) -> Option<JsonLdDocument> {
        self.docs.read().get(id).cloned()
    }

    pub fn find(&self, q: &DocumentQuery) -> Vec<JsonLdDocument> {
        self.docs.read().values().filter(|d| q.matches(d)).cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.docs.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.read().is_empty()
    }

    pub fn all(&self) -> Vec<JsonLdDocument> {
        self.docs.read().values().cloned().collect()
    }
}

/// Vocabulary, registered rules and the document store.
#[derive(Debug)]
pub struct FusionEngine {
    vocabulary: Vocabulary,
    rules: RwLock<BTreeMap<SourceKind, MappingRule>>,
    store: Arc<DocumentStore>,
}

impl Default for FusionEngine {
    fn default() -> Self {
        Self::new(Vocabulary::default())
    }
}

impl FusionEngine {
    pub fn new(vocabulary: Vocabulary) -> Self {
        let engine = FusionEngine { vocabulary, rules: RwLock::new(BTreeMap::new()), store: Arc::new(DocumentStore::default()) };
        for rule in MappingRule::defaults() {
            engine.register_rule(rule).expect("built-in mapping rules are total");
        }
        engine
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn store(&self) -> &Arc<DocumentStore> {
        &self.store
    }

    pub fn register_rule(&self, rule: MappingRule) -> Result<(), FusionError> {
        rule.check(&self.vocabulary)?;
        self.rules.write().insert(rule.source, rule);
        Ok(())
    }

    pub fn rule(&self, kind: SourceKind) -> Option<MappingRule> {
        self.rules.read().get(&kind).cloned()
    }

    pub fn enrich(&self, record: &SourceRecord) -> Result<JsonLdDocument, FusionError> {
        let rule = self.rule(record.kind).ok_or(FusionError::NoRule(record.kind))?;
        enrich(&self.vocabulary, record, &rule)
    }

    pub fn validate(&self, doc: &JsonLdDocument) -> Vec<Violation> {
        validate(&self.vocabulary, doc)
    }

    pub fn store_document(&self, doc: JsonLdDocument) -> Result<String, FusionError> {
        let violations = self.validate(&doc);
        if !violations.is_empty() {
            return Err(FusionError::InvalidDocument(violations));
        }
        Ok(self.store.insert(doc))
    }

    /// Enriches and stores in one step.
    pub fn ingest(&self, record: &SourceRecord) -> Result<String, FusionError> {
        let doc = self.enrich(record)?;
        self.store_document(doc)
    }

    pub fn find_documents(&self, q: &DocumentQuery) -> Vec<JsonLdDocument> {
        self.store.find(q)
    }
}
