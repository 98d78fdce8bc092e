//! Context broker: current state of registered entities, attribute updates,
//! queries, change subscriptions and IoT node lifecycle.
//!
//! Writes are serialized behind one lock, which gives per-entity
//! linearizability. Notifications are computed under the lock and dispatched
//! after it is released, so sinks may call back into the broker.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::{Clock, Span, Timestamp};
use crate::value::{Comparator, Quality, Scalar};

/// Attribute carrying the mirrored lifecycle state of a sensor node.
pub const NODE_STATE_ATTRIBUTE: &str = "nodeState";

/// Attribute linking a sensor or door to the building space that contains it.
pub const LOCATED_IN_ATTRIBUTE: &str = "locatedIn";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BrokerError {
    #[error("malformed entity id `{0}`")]
    MalformedId(String),
    #[error("numeric attribute `{0}` has no unit")]
    AttributeWithoutUnit(String),
    #[error("unknown entity `{0}`")]
    UnknownEntity(String),
    #[error("attribute `{attribute}` observed at {observed_at} is older than the stored value")]
    StaleTimestamp { attribute: String, observed_at: Timestamp },
    #[error("attribute `{attribute}` observed at {observed_at} lies in the future")]
    FutureTimestamp { attribute: String, observed_at: Timestamp },
    #[error("non-finite value for attribute `{0}`")]
    NonFiniteValue(String),
    #[error("unknown subscription `{0}`")]
    UnknownSubscription(String),
    #[error("node `{node}` cannot go from {from:?} to {to:?}")]
    InvalidTransition { node: String, from: NodeState, to: NodeState },
}

impl BrokerError {
    pub fn code(&self) -> &'static str {
        match self {
            BrokerError::MalformedId(_) => "malformed-id",
            BrokerError::AttributeWithoutUnit(_) => "attribute-without-unit",
            BrokerError::UnknownEntity(_) => "unknown-entity",
            BrokerError::StaleTimestamp { .. } => "stale-timestamp",
            BrokerError::FutureTimestamp { .. } => "future-timestamp",
            BrokerError::NonFiniteValue(_) => "non-finite-value",
            BrokerError::UnknownSubscription(_) => "unknown-subscription",
            BrokerError::InvalidTransition { .. } => "invalid-transition",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EntityType {
    SensorNode,
    Room,
    Building,
    BuildingSpace,
    Door,
    Custom,
}

impl EntityType {
    pub fn as_str(self) -> &'static str {
        match self {
            EntityType::SensorNode => "SensorNode",
            EntityType::Room => "Room",
            EntityType::Building => "Building",
            EntityType::BuildingSpace => "BuildingSpace",
            EntityType::Door => "Door",
            EntityType::Custom => "Custom",
        }
    }

    pub fn is_space(self) -> bool {
        matches!(self, EntityType::Room | EntityType::Building | EntityType::BuildingSpace)
    }
}

impl FromStr for EntityType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_owned())).map_err(|_| format!("unknown entity type `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeValue {
    pub value: Scalar,
    #[serde(default)]
    pub unit: String,
    pub observed_at: Timestamp,
    #[serde(default)]
    pub quality: Quality,
}

impl AttributeValue {
    pub fn number(value: f64, unit: &str, observed_at: Timestamp) -> Self {
        AttributeValue { value: Scalar::Number(value), unit: unit.to_owned(), observed_at, quality: Quality::Raw }
    }

    pub fn text(value: &str, observed_at: Timestamp) -> Self {
        AttributeValue { value: Scalar::Text(value.to_owned()), unit: String::new(), observed_at, quality: Quality::Raw }
    }

    pub fn with_quality(mut self, quality: Quality) -> Self {
        self.quality = quality;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub id: String,
    pub entity_type: EntityType,
    #[serde(default)]
    pub attributes: BTreeMap<String, AttributeValue>,
    #[serde(default)]
    pub created_at: Timestamp,
    #[serde(default)]
    pub updated_at: Timestamp,
}

impl EntityRecord {
    pub fn new(id: impl Into<String>, entity_type: EntityType) -> Self {
        EntityRecord {
            id: id.into(),
            entity_type,
            attributes: BTreeMap::new(),
            created_at: Timestamp::default(),
            updated_at: Timestamp::default(),
        }
    }

    pub fn with_attribute(mut self, name: impl Into<String>, value: AttributeValue) -> Self {
        self.attributes.insert(name.into(), value);
        self
    }

    pub fn located_in(&self) -> Option<&str> {
        self.attributes.get(LOCATED_IN_ATTRIBUTE).and_then(|a| a.value.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeState {
    Registered,
    Bootstrapping,
    Connected,
    Disconnected,
}

impl NodeState {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeState::Registered => "Registered",
            NodeState::Bootstrapping => "Bootstrapping",
            NodeState::Connected => "Connected",
            NodeState::Disconnected => "Disconnected",
        }
    }

    pub fn can_transition_to(self, next: NodeState) -> bool {
        use NodeState::*;
        matches!(
            (self, next),
            (Registered, Bootstrapping) | (Bootstrapping, Connected) | (Connected, Disconnected) | (Disconnected, Connected)
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeLifecycle {
    pub node_id: String,
    pub state: NodeState,
    pub config_commands: Vec<String>,
    pub reporting_period: Span,
    pub liveness_timeout: Span,
    pub last_seen: Option<Timestamp>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeRegistration {
    pub node_id: String,
    pub reporting_period: Span,
    #[serde(default)]
    pub config_commands: Vec<String>,
    /// Defaults to `liveness_factor` × reporting period.
    #[serde(default)]
    pub liveness_timeout: Option<Span>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub node_id: String,
    pub from: NodeState,
    pub to: NodeState,
    pub at: Timestamp,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Sink {
    TimeseriesStore,
    StreamProcessor,
    CompositeEntities,
    Webhook { url: String },
    /// In-process consumer registered under an arbitrary name.
    Named { name: String },
}

impl Sink {
    fn handler_key(&self) -> String {
        match self {
            Sink::TimeseriesStore => "timeseries-store".into(),
            Sink::StreamProcessor => "stream-processor".into(),
            Sink::CompositeEntities => "composite-entities".into(),
            Sink::Webhook { .. } => "webhook".into(),
            Sink::Named { name } => format!("named:{name}"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Selector {
    #[serde(default)]
    pub entity_type: Option<EntityType>,
    #[serde(default)]
    pub attributes: Option<BTreeSet<String>>,
    #[serde(default)]
    pub ids: Option<BTreeSet<String>>,
}

impl Selector {
    pub fn for_type(entity_type: EntityType) -> Self {
        Selector { entity_type: Some(entity_type), ..Selector::default() }
    }

    pub fn with_attribute(mut self, attribute: &str) -> Self {
        self.attributes.get_or_insert_with(BTreeSet::new).insert(attribute.to_owned());
        self
    }

    fn matches(&self, id: &str, entity_type: EntityType, attribute: &str) -> bool {
        self.entity_type.is_none_or(|t| t == entity_type)
            && self.attributes.as_ref().is_none_or(|a| a.contains(attribute))
            && self.ids.as_ref().is_none_or(|ids| ids.contains(id))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subscription {
    #[serde(default)]
    pub id: String,
    pub selector: Selector,
    pub sink: Sink,
    #[serde(default = "default_true")]
    pub active: bool,
}

fn default_true() -> bool {
    true
}

impl Subscription {
    pub fn new(selector: Selector, sink: Sink) -> Self {
        Subscription { id: String::new(), selector, sink, active: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Notification {
    pub subscription_id: String,
    pub entity_id: String,
    pub entity_type: EntityType,
    pub attribute: String,
    pub old: Option<AttributeValue>,
    pub new: AttributeValue,
    pub version: u64,
}

pub trait NotificationSink: Send + Sync {
    fn deliver(&self, sink: &Sink, notification: &Notification);
}

/// Sink that keeps every notification it receives. Handy in tests and for
/// the webhook outbox.
#[derive(Default)]
pub struct CollectingSink {
    received: Mutex<Vec<Notification>>,
}

impl CollectingSink {
    pub fn take(&self) -> Vec<Notification> {
        std::mem::take(&mut self.received.lock())
    }

    pub fn len(&self) -> usize {
        self.received.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl NotificationSink for CollectingSink {
    fn deliver(&self, _sink: &Sink, notification: &Notification) {
        self.received.lock().push(notification.clone());
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributePredicate {
    pub attribute: String,
    pub comparator: Comparator,
    pub value: Scalar,
}

impl AttributePredicate {
    pub fn matches(&self, record: &EntityRecord) -> bool {
        record.attributes.get(&self.attribute).is_some_and(|a| self.comparator.eval(&a.value, &self.value))
    }
}

impl FromStr for AttributePredicate {
    type Err = String;

    /// Parses `name<op>literal`, e.g. `co2>1000` or `locatedIn=office-12`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let ops = [">=", "<=", "==", ">", "<", "="];
        let (pos, op) = ops
            .iter()
            .filter_map(|op| s.find(op).map(|p| (p, *op)))
            .min_by_key(|(p, op)| (*p, std::cmp::Reverse(op.len())))
            .ok_or_else(|| format!("no comparator in `{s}`"))?;
        let attribute = s[..pos].trim();
        let literal = s[pos + op.len()..].trim();
        if attribute.is_empty() {
            return Err(format!("missing attribute in `{s}`"));
        }
        let value = if let Ok(v) = literal.parse::<f64>() {
            Scalar::Number(v)
        } else if let Ok(b) = literal.parse::<bool>() {
            Scalar::Bool(b)
        } else {
            Scalar::Text(literal.trim_matches('\'').to_owned())
        };
        Ok(AttributePredicate { attribute: attribute.to_owned(), comparator: op.parse()?, value })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EntityFilter {
    #[serde(default)]
    pub entity_type: Option<EntityType>,
    #[serde(default)]
    pub predicate: Option<AttributePredicate>,
    #[serde(default)]
    pub ids: Option<BTreeSet<String>>,
}

impl EntityFilter {
    pub fn of_type(entity_type: EntityType) -> Self {
        EntityFilter { entity_type: Some(entity_type), ..Default::default() }
    }

    pub fn matches(&self, record: &EntityRecord) -> bool {
        self.entity_type.is_none_or(|t| t == record.entity_type)
            && self.ids.as_ref().is_none_or(|ids| ids.contains(&record.id))
            && self.predicate.as_ref().is_none_or(|p| p.matches(record))
    }
}

#[derive(Clone, Debug)]
pub struct BrokerConfig {
    /// How far past the broker clock an `observed_at` may lie.
    pub future_skew: Span,
    /// Numeric attributes that need no unit.
    pub unitless: BTreeSet<String>,
    pub liveness_factor: i64,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        BrokerConfig {
            future_skew: Span::from_secs(60),
            unitless: ["open", "presence", "occupancy", "count"].into_iter().map(String::from).collect(),
            liveness_factor: 3,
        }
    }
}

#[derive(Clone, Debug)]
struct StoredEntity {
    record: EntityRecord,
    version: u64,
    deleted: bool,
}

#[derive(Default)]
struct BrokerState {
    entities: BTreeMap<String, StoredEntity>,
    subscriptions: BTreeMap<String, Subscription>,
    lifecycles: BTreeMap<String, NodeLifecycle>,
    transitions: Vec<Transition>,
    next_version: u64,
    next_subscription: u64,
}

type Outgoing = Vec<(Sink, Notification)>;

impl BrokerState {
    fn bump_version(&mut self) -> u64 {
        self.next_version += 1;
        self.next_version
    }

    fn notifications_for(
        &self,
        id: &str,
        entity_type: EntityType,
        changes: &[(String, Option<AttributeValue>, AttributeValue)],
        version: u64,
    ) -> Outgoing {
        let mut out = Vec::new();
        for sub in self.subscriptions.values().filter(|s| s.active) {
            for (name, old, new) in changes {
                if sub.selector.matches(id, entity_type, name) {
                    out.push((
                        sub.sink.clone(),
                        Notification {
                            subscription_id: sub.id.clone(),
                            entity_id: id.to_owned(),
                            entity_type,
                            attribute: name.clone(),
                            old: old.clone(),
                            new: new.clone(),
                            version,
                        },
                    ));
                }
            }
        }
        out
    }
}

pub struct ContextBroker {
    clock: Arc<dyn Clock>,
    config: BrokerConfig,
    state: RwLock<BrokerState>,
    handlers: RwLock<HashMap<String, Arc<dyn NotificationSink>>>,
    undelivered: Mutex<Vec<(Sink, Notification)>>,
    delivered: Mutex<BTreeMap<String, u64>>,
}

impl fmt::Debug for ContextBroker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ContextBroker").field("entities", &self.state.read().entities.len()).finish()
    }
}

pub fn validate_id(id: &str) -> Result<(), BrokerError> {
    if id.is_empty() || id.len() > 256 || id.chars().any(|c| c.is_whitespace() || c.is_control() || c == '/') {
        return Err(BrokerError::MalformedId(id.to_owned()));
    }
    Ok(())
}

impl ContextBroker {
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        Self::with_config(clock, BrokerConfig::default())
    }

    pub fn with_config(clock: Arc<dyn Clock>, config: BrokerConfig) -> Self {
        ContextBroker {
            clock,
            config,
            state: RwLock::new(BrokerState::default()),
            handlers: RwLock::new(HashMap::new()),
            undelivered: Mutex::new(Vec::new()),
            delivered: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn config(&self) -> &BrokerConfig {
        &self.config
    }

    /// Routes notifications for `sink` kinds to `handler`. Notifications
    /// whose sink has no handler are parked in an outbox.
    pub fn register_sink(&self, sink: &Sink, handler: Arc<dyn NotificationSink>) {
        self.handlers.write().insert(sink.handler_key(), handler);
    }

    fn check_attribute(&self, name: &str, attr: &AttributeValue, now: Timestamp) -> Result<(), BrokerError> {
        if let Scalar::Number(v) = attr.value {
            if !v.is_finite() {
                return Err(BrokerError::NonFiniteValue(name.to_owned()));
            }
            if attr.unit.is_empty() && !self.config.unitless.contains(name) {
                return Err(BrokerError::AttributeWithoutUnit(name.to_owned()));
            }
        }
        if attr.observed_at > now + self.config.future_skew {
            return Err(BrokerError::FutureTimestamp { attribute: name.to_owned(), observed_at: attr.observed_at });
        }
        Ok(())
    }

    /// Inserts or merges an entity. Attributes named in `record` replace the
    /// stored ones; others are kept.
    pub fn upsert_entity(&self, record: EntityRecord) -> Result<u64, BrokerError> {
        validate_id(&record.id)?;
        let now = self.clock.now();
        for (name, attr) in &record.attributes {
            self.check_attribute(name, attr, now)?;
        }
        let outgoing;
        let version;
        {
            let mut st = self.state.write();
            let existing = st.entities.get(&record.id).filter(|e| !e.deleted).cloned();
            if let Some(ex) = &existing {
                for (name, attr) in &record.attributes {
                    if let Some(old) = ex.record.attributes.get(name) {
                        if attr.observed_at < old.observed_at {
                            return Err(BrokerError::StaleTimestamp { attribute: name.clone(), observed_at: attr.observed_at });
                        }
                    }
                }
            }
            version = st.bump_version();
            let mut merged = match &existing {
                Some(ex) => ex.record.clone(),
                None => {
                    let created = st.entities.get(&record.id).map(|e| e.record.created_at).unwrap_or(now);
                    EntityRecord {
                        id: record.id.clone(),
                        entity_type: record.entity_type,
                        attributes: BTreeMap::new(),
                        created_at: created,
                        updated_at: created,
                    }
                }
            };
            merged.entity_type = record.entity_type;
            let mut changes = Vec::new();
            for (name, attr) in record.attributes {
                let old = merged.attributes.get(&name).cloned();
                if old.as_ref() != Some(&attr) {
                    changes.push((name.clone(), old, attr.clone()));
                }
                merged.attributes.insert(name, attr);
            }
            merged.updated_at = Self::next_updated_at(&merged, now);
            outgoing = st.notifications_for(&merged.id, merged.entity_type, &changes, version);
            st.entities.insert(merged.id.clone(), StoredEntity { record: merged, version, deleted: false });
        }
        self.dispatch(outgoing);
        Ok(version)
    }

    fn next_updated_at(record: &EntityRecord, now: Timestamp) -> Timestamp {
        let newest_attr = record.attributes.values().map(|a| a.observed_at).max().unwrap_or(now);
        now.max(record.updated_at).max(newest_attr)
    }

    pub fn update_attributes(
        &self,
        id: &str,
        patch: BTreeMap<String, AttributeValue>,
    ) -> Result<EntityRecord, BrokerError> {
        let now = self.clock.now();
        for (name, attr) in &patch {
            self.check_attribute(name, attr, now)?;
        }
        let outgoing;
        let result;
        {
            let mut st = self.state.write();
            let current = match st.entities.get(id) {
                Some(e) if !e.deleted => e.record.clone(),
                _ => return Err(BrokerError::UnknownEntity(id.to_owned())),
            };
            for (name, attr) in &patch {
                if let Some(old) = current.attributes.get(name) {
                    if attr.observed_at < old.observed_at {
                        return Err(BrokerError::StaleTimestamp { attribute: name.clone(), observed_at: attr.observed_at });
                    }
                }
            }
            let version = st.bump_version();
            let mut record = current;
            let mut changes = Vec::with_capacity(patch.len());
            for (name, attr) in patch {
                let old = record.attributes.insert(name.clone(), attr.clone());
                changes.push((name, old, attr));
            }
            record.updated_at = Self::next_updated_at(&record, now);
            outgoing = st.notifications_for(id, record.entity_type, &changes, version);
            st.entities.insert(id.to_owned(), StoredEntity { record: record.clone(), version, deleted: false });
            result = record;
        }
        self.dispatch(outgoing);
        Ok(result)
    }

    /// Drops attributes from the current state. No notifications: absence is
    /// not a value.
    pub fn remove_attributes(&self, id: &str, names: &[String]) -> Result<EntityRecord, BrokerError> {
        let now = self.clock.now();
        let mut st = self.state.write();
        let version = st.bump_version();
        let entry = st.entities.get_mut(id).filter(|e| !e.deleted).ok_or_else(|| BrokerError::UnknownEntity(id.to_owned()))?;
        for n in names {
            entry.record.attributes.remove(n);
        }
        entry.record.updated_at = entry.record.updated_at.max(now);
        entry.version = version;
        Ok(entry.record.clone())
    }

    /// Soft delete: the entity disappears from reads but its id stays
    /// resolvable for history.
    pub fn delete_entity(&self, id: &str) -> Result<(), BrokerError> {
        let mut st = self.state.write();
        let version = st.bump_version();
        match st.entities.get_mut(id) {
            Some(e) if !e.deleted => {
                e.deleted = true;
                e.version = version;
                Ok(())
            }
            _ => Err(BrokerError::UnknownEntity(id.to_owned())),
        }
    }

    pub fn get_entity(&self, id: &str) -> Result<EntityRecord, BrokerError> {
        self.state
            .read()
            .entities
            .get(id)
            .filter(|e| !e.deleted)
            .map(|e| e.record.clone())
            .ok_or_else(|| BrokerError::UnknownEntity(id.to_owned()))
    }

    pub fn version_of(&self, id: &str) -> Option<u64> {
        self.state.read().entities.get(id).filter(|e| !e.deleted).map(|e| e.version)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.state.read().entities.get(id).is_some_and(|e| !e.deleted)
    }

    /// All live records matching `filter`, ordered by id.
    pub fn query_entities(&self, filter: &EntityFilter) -> Vec<EntityRecord> {
        self.state
            .read()
            .entities
            .values()
            .filter(|e| !e.deleted && filter.matches(&e.record))
            .map(|e| e.record.clone())
            .collect()
    }

    pub fn subscribe(&self, mut sub: Subscription) -> String {
        let mut st = self.state.write();
        st.next_subscription += 1;
        sub.id = format!("sub-{}", st.next_subscription);
        let id = sub.id.clone();
        st.subscriptions.insert(id.clone(), sub);
        id
    }

    pub fn unsubscribe(&self, id: &str) -> Result<(), BrokerError> {
        self.state
            .write()
            .subscriptions
            .remove(id)
            .map(|_| ())
            .ok_or_else(|| BrokerError::UnknownSubscription(id.to_owned()))
    }

    pub fn subscriptions(&self) -> Vec<Subscription> {
        self.state.read().subscriptions.values().cloned().collect()
    }

    /// Notifications handed to a handler for `subscription_id` so far.
    pub fn delivered_count(&self, subscription_id: &str) -> u64 {
        self.delivered.lock().get(subscription_id).copied().unwrap_or(0)
    }

    pub fn take_undelivered(&self) -> Vec<(Sink, Notification)> {
        std::mem::take(&mut self.undelivered.lock())
    }

    fn dispatch(&self, outgoing: Outgoing) {
        if outgoing.is_empty() {
            return;
        }
        for (sink, n) in outgoing {
            let handler = self.handlers.read().get(&sink.handler_key()).cloned();
            match handler {
                Some(h) => {
                    *self.delivered.lock().entry(n.subscription_id.clone()).or_default() += 1;
                    h.deliver(&sink, &n);
                }
                None => self.undelivered.lock().push((sink, n)),
            }
        }
    }

    // -- node lifecycle -------------------------------------------------

    pub fn register_node(&self, reg: NodeRegistration) -> Result<NodeLifecycle, BrokerError> {
        if !self.contains(&reg.node_id) {
            return Err(BrokerError::UnknownEntity(reg.node_id));
        }
        let timeout = reg.liveness_timeout.unwrap_or(reg.reporting_period * self.config.liveness_factor);
        let now = self.clock.now();
        let (lc, fresh) = {
            let mut st = self.state.write();
            let fresh = !st.lifecycles.contains_key(&reg.node_id);
            let lc = st.lifecycles.entry(reg.node_id.clone()).or_insert_with(|| NodeLifecycle {
                node_id: reg.node_id.clone(),
                state: NodeState::Registered,
                config_commands: Vec::new(),
                reporting_period: reg.reporting_period,
                liveness_timeout: timeout,
                last_seen: None,
            });
            lc.config_commands = reg.config_commands;
            lc.reporting_period = reg.reporting_period;
            lc.liveness_timeout = timeout;
            (lc.clone(), fresh)
        };
        if fresh {
            self.mirror_state(&lc.node_id, NodeState::Registered, now);
        }
        Ok(lc)
    }

    pub fn lifecycle(&self, node_id: &str) -> Option<NodeLifecycle> {
        self.state.read().lifecycles.get(node_id).cloned()
    }

    /// True unless the node is known to be disconnected.
    pub fn is_live(&self, node_id: &str) -> bool {
        self.state.read().lifecycles.get(node_id).is_none_or(|lc| lc.state != NodeState::Disconnected)
    }

    pub fn transitions(&self) -> Vec<Transition> {
        self.state.read().transitions.clone()
    }

    /// Starts bootstrapping a registered node and returns the configuration
    /// command sequence to deliver to it.
    pub fn bootstrap(&self, node_id: &str) -> Result<Vec<String>, BrokerError> {
        let now = self.clock.now();
        let cmds = {
            let mut st = self.state.write();
            let lc = st.lifecycles.get_mut(node_id).ok_or_else(|| BrokerError::UnknownEntity(node_id.to_owned()))?;
            match lc.state {
                NodeState::Registered => {}
                NodeState::Bootstrapping => return Ok(lc.config_commands.clone()),
                from => {
                    return Err(BrokerError::InvalidTransition { node: node_id.to_owned(), from, to: NodeState::Bootstrapping })
                }
            }
            lc.state = NodeState::Bootstrapping;
            let cmds = lc.config_commands.clone();
            st.transitions.push(Transition {
                node_id: node_id.to_owned(),
                from: NodeState::Registered,
                to: NodeState::Bootstrapping,
                at: now,
            });
            cmds
        };
        self.mirror_state(node_id, NodeState::Bootstrapping, now);
        Ok(cmds)
    }

    /// Records a sign of life. Walks the node forward to `Connected` through
    /// every intermediate state.
    pub fn mark_liveness(&self, node_id: &str, seen_at: Timestamp) -> Result<NodeLifecycle, BrokerError> {
        let (lc, steps) = {
            let mut st = self.state.write();
            let lc = st.lifecycles.get_mut(node_id).ok_or_else(|| BrokerError::UnknownEntity(node_id.to_owned()))?;
            lc.last_seen = Some(lc.last_seen.map_or(seen_at, |l| l.max(seen_at)));
            let mut steps = Vec::new();
            let path: &[NodeState] = match lc.state {
                NodeState::Registered => &[NodeState::Bootstrapping, NodeState::Connected],
                NodeState::Bootstrapping | NodeState::Disconnected => &[NodeState::Connected],
                NodeState::Connected => &[],
            };
            for next in path {
                steps.push(Transition { node_id: node_id.to_owned(), from: lc.state, to: *next, at: seen_at });
                lc.state = *next;
            }
            let lc = lc.clone();
            st.transitions.extend(steps.iter().cloned());
            (lc, steps)
        };
        for t in &steps {
            self.mirror_state(node_id, t.to, t.at);
        }
        Ok(lc)
    }

    /// Disconnects every connected node silent for longer than its timeout.
    pub fn sweep_liveness(&self, now: Timestamp) -> Vec<NodeLifecycle> {
        let swept: Vec<NodeLifecycle> = {
            let mut st = self.state.write();
            let mut swept = Vec::new();
            for lc in st.lifecycles.values_mut() {
                let overdue = lc.last_seen.is_none_or(|seen| now - seen > lc.liveness_timeout);
                if lc.state == NodeState::Connected && overdue {
                    lc.state = NodeState::Disconnected;
                    swept.push(lc.clone());
                }
            }
            for lc in &swept {
                st.transitions.push(Transition {
                    node_id: lc.node_id.clone(),
                    from: NodeState::Connected,
                    to: NodeState::Disconnected,
                    at: now,
                });
            }
            swept
        };
        for lc in &swept {
            self.mirror_state(&lc.node_id, NodeState::Disconnected, now);
        }
        swept
    }

    fn mirror_state(&self, node_id: &str, state: NodeState, at: Timestamp) {
        let at = self
            .get_entity(node_id)
            .ok()
            .and_then(|r| r.attributes.get(NODE_STATE_ATTRIBUTE).map(|a| a.observed_at))
            .map_or(at, |prev| prev.max(at));
        let attr = AttributeValue::text(state.as_str(), at).with_quality(Quality::Derived);
        let patch = BTreeMap::from([(NODE_STATE_ATTRIBUTE.to_owned(), attr)]);
        if let Err(e) = self.update_attributes(node_id, patch) {
            tracing::warn!(node = node_id, error = %e, "could not mirror lifecycle state");
        }
    }
}
