//! Composite entities: rooms and buildings whose attributes fold over the
//! current values of their member nodes.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Weak};

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::{
    AttributePredicate, AttributeValue, BrokerError, ContextBroker, EntityFilter, EntityRecord, EntityType, NodeState,
    Notification, NotificationSink, Selector, Sink, Subscription, NODE_STATE_ATTRIBUTE,
};
use crate::time::Span;
use crate::value::{Quality, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompositeError {
    #[error("composite `{0}` would contain itself")]
    CycleDetected(String),
    #[error("unknown composite `{0}`")]
    UnknownComposite(String),
    #[error("composite type must be a space, got {0:?}")]
    NotASpace(EntityType),
    #[error("entity `{0}` exists with a non-space type")]
    ExistingNonSpace(String),
    #[error(transparent)]
    Broker(#[from] BrokerError),
}

impl CompositeError {
    pub fn code(&self) -> &'static str {
        match self {
            CompositeError::CycleDetected(_) => "cycle-detected",
            CompositeError::UnknownComposite(_) => "unknown-composite",
            CompositeError::NotASpace(_) | CompositeError::ExistingNonSpace(_) => "invalid-composite-type",
            CompositeError::Broker(e) => e.code(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FoldFn {
    Avg,
    Min,
    Max,
    Sum,
    Any,
    All,
}

impl FoldFn {
    /// Folds member values. `None` when no value is usable.
    pub fn fold(self, values: &[Scalar]) -> Option<Scalar> {
        match self {
            FoldFn::Any | FoldFn::All => {
                let flags: Vec<bool> = values.iter().filter_map(Scalar::truthy).collect();
                if flags.is_empty() {
                    return None;
                }
                let v = if self == FoldFn::Any { flags.iter().any(|b| *b) } else { flags.iter().all(|b| *b) };
                Some(Scalar::Bool(v))
            }
            _ => {
                let nums: Vec<f64> = values.iter().filter_map(Scalar::as_f64).collect();
                if nums.is_empty() {
                    return None;
                }
                let v = match self {
                    FoldFn::Avg => nums.iter().sum::<f64>() / nums.len() as f64,
                    FoldFn::Sum => nums.iter().sum(),
                    FoldFn::Min => nums.iter().cloned().fold(f64::INFINITY, f64::min),
                    _ => nums.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                };
                Some(Scalar::Number(v))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "by", rename_all = "kebab-case")]
pub enum MemberSelector {
    Ids { ids: BTreeSet<String> },
    Predicate { predicate: AttributePredicate },
}

impl MemberSelector {
    pub fn ids<I: IntoIterator<Item = S>, S: Into<String>>(ids: I) -> Self {
        MemberSelector::Ids { ids: ids.into_iter().map(Into::into).collect() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositeSpec {
    pub composite_id: String,
    #[serde(default = "default_space_type")]
    pub entity_type: EntityType,
    pub members: MemberSelector,
    pub aggregations: BTreeMap<String, FoldFn>,
    /// Member values older than this are left out of the fold.
    #[serde(default)]
    pub staleness_horizon: Option<Span>,
}

fn default_space_type() -> EntityType {
    EntityType::Room
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefinedComposite {
    pub composite_id: String,
    pub members: Vec<String>,
    /// Set when the member selector currently resolves to nothing.
    pub empty_member_set: bool,
}

struct Entry {
    spec: CompositeSpec,
    refresh: Mutex<()>,
    last_members: Mutex<BTreeSet<String>>,
}

pub struct CompositeManager {
    broker: Arc<ContextBroker>,
    specs: RwLock<BTreeMap<String, Arc<Entry>>>,
    subscribed: Mutex<bool>,
    me: Weak<CompositeManager>,
}

impl std::fmt::Debug for CompositeManager {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CompositeManager").field("composites", &self.specs.read().len()).finish()
    }
}

impl CompositeManager {
    pub fn new(broker: Arc<ContextBroker>) -> Arc<Self> {
        Arc::new_cyclic(|me| CompositeManager {
            broker,
            specs: RwLock::new(BTreeMap::new()),
            subscribed: Mutex::new(false),
            me: me.clone(),
        })
    }

    fn ensure_subscribed(&self) {
        let mut done = self.subscribed.lock();
        if *done {
            return;
        }
        if let Some(me) = self.me.upgrade() {
            self.broker.register_sink(&Sink::CompositeEntities, me);
            self.broker.subscribe(Subscription::new(Selector::default(), Sink::CompositeEntities));
            *done = true;
        }
    }

    fn resolve(&self, spec: &CompositeSpec) -> BTreeSet<String> {
        let mut out: BTreeSet<String> = match &spec.members {
            MemberSelector::Ids { ids } => ids.iter().filter(|id| self.broker.contains(id)).cloned().collect(),
            MemberSelector::Predicate { predicate } => self
                .broker
                .query_entities(&EntityFilter { predicate: Some(predicate.clone()), ..Default::default() })
                .into_iter()
                .map(|r| r.id)
                .collect(),
        };
        out.remove(&spec.composite_id);
        out
    }

    /// Whether `from` reaches `target` through composite membership.
    fn reaches(&self, from: &str, target: &str, extra: Option<(&str, &BTreeSet<String>)>) -> bool {
        let mut stack = vec![from.to_owned()];
        let mut seen = BTreeSet::new();
        while let Some(cur) = stack.pop() {
            if cur == target {
                return true;
            }
            if !seen.insert(cur.clone()) {
                continue;
            }
            let members = match extra {
                Some((id, m)) if id == cur => m.clone(),
                _ => match self.specs.read().get(&cur) {
                    Some(e) => self.resolve(&e.spec),
                    None => continue,
                },
            };
            stack.extend(members);
        }
        false
    }

    pub fn define_composite(&self, spec: CompositeSpec) -> Result<DefinedComposite, CompositeError> {
        if !spec.entity_type.is_space() {
            return Err(CompositeError::NotASpace(spec.entity_type));
        }
        crate::broker::validate_id(&spec.composite_id)?;
        let direct_self = matches!(&spec.members, MemberSelector::Ids { ids } if ids.contains(&spec.composite_id));
        let members = self.resolve(&spec);
        if direct_self || members.iter().any(|m| self.reaches(m, &spec.composite_id, Some((&spec.composite_id, &members)))) {
            return Err(CompositeError::CycleDetected(spec.composite_id));
        }
        match self.broker.get_entity(&spec.composite_id) {
            Ok(r) if !r.entity_type.is_space() => return Err(CompositeError::ExistingNonSpace(spec.composite_id)),
            Ok(_) => {}
            Err(_) => {
                self.broker.upsert_entity(EntityRecord::new(spec.composite_id.clone(), spec.entity_type))?;
            }
        }
        self.ensure_subscribed();
        let id = spec.composite_id.clone();
        self.specs.write().insert(id.clone(), Arc::new(Entry { spec, refresh: Mutex::new(()), last_members: Mutex::new(BTreeSet::new()) }));
        self.refresh(&id)?;
        let members: Vec<String> = members.into_iter().collect();
        Ok(DefinedComposite { composite_id: id, empty_member_set: members.is_empty(), members })
    }

    pub fn spec(&self, id: &str) -> Option<CompositeSpec> {
        self.specs.read().get(id).map(|e| e.spec.clone())
    }

    pub fn composites(&self) -> Vec<CompositeSpec> {
        self.specs.read().values().map(|e| e.spec.clone()).collect()
    }

    pub fn is_composite(&self, id: &str) -> bool {
        self.specs.read().contains_key(id)
    }

    /// Current member ids, after dropping any that would close a cycle.
    pub fn members(&self, id: &str) -> Result<Vec<String>, CompositeError> {
        let spec = self.spec(id).ok_or_else(|| CompositeError::UnknownComposite(id.to_owned()))?;
        Ok(self.live_candidates(&spec).into_iter().collect())
    }

    fn live_candidates(&self, spec: &CompositeSpec) -> BTreeSet<String> {
        self.resolve(spec)
            .into_iter()
            .filter(|m| !self.is_composite(m) || !self.reaches(m, &spec.composite_id, None))
            .collect()
    }

    fn member_is_live(&self, id: &str) -> bool {
        self.broker.lifecycle(id).is_none_or(|lc| lc.state != NodeState::Disconnected)
    }

    /// Recomputes every mapped attribute from the live members and writes the
    /// changed ones back to the broker.
    pub fn refresh(&self, id: &str) -> Result<EntityRecord, CompositeError> {
        let entry = self.specs.read().get(id).cloned().ok_or_else(|| CompositeError::UnknownComposite(id.to_owned()))?;
        let _serial = entry.refresh.lock();
        let spec = &entry.spec;
        let members = self.live_candidates(spec);
        let now = self.broker.clock().now();
        let records: Vec<EntityRecord> = members
            .iter()
            .filter(|m| self.member_is_live(m))
            .filter_map(|m| self.broker.get_entity(m).ok())
            .collect();
        *entry.last_members.lock() = members;
        let current = self.broker.get_entity(id)?;

        let mut patch = BTreeMap::new();
        let mut absent = Vec::new();
        for (attr, func) in &spec.aggregations {
            let live: Vec<&AttributeValue> = records
                .iter()
                .filter_map(|r| r.attributes.get(attr))
                .filter(|a| spec.staleness_horizon.is_none_or(|h| now - a.observed_at <= h))
                .collect();
            let values: Vec<Scalar> = live.iter().map(|a| a.value.clone()).collect();
            let Some(value) = func.fold(&values) else {
                if current.attributes.contains_key(attr) {
                    absent.push(attr.clone());
                }
                continue;
            };
            let prev = current.attributes.get(attr);
            let newest = live.iter().map(|a| a.observed_at).max().unwrap_or(now);
            let observed_at = prev.map_or(newest, |p| p.observed_at.max(newest));
            let unit = if value.is_number() { live.iter().map(|a| a.unit.as_str()).find(|u| !u.is_empty()).unwrap_or("") } else { "" };
            let next = AttributeValue { value, unit: unit.to_owned(), observed_at, quality: Quality::Derived };
            if prev != Some(&next) {
                patch.insert(attr.clone(), next);
            }
        }
        if !absent.is_empty() {
            self.broker.remove_attributes(id, &absent)?;
        }
        if !patch.is_empty() {
            return Ok(self.broker.update_attributes(id, patch)?);
        }
        Ok(self.broker.get_entity(id)?)
    }

    pub fn refresh_all(&self) -> Vec<CompositeError> {
        let ids: Vec<String> = self.specs.read().keys().cloned().collect();
        ids.iter().filter_map(|id| self.refresh(id).err()).collect()
    }

    fn affected_by(&self, n: &Notification) -> Vec<String> {
        let specs: Vec<(String, Arc<Entry>)> = self.specs.read().iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        specs
            .into_iter()
            .filter(|(id, _)| *id != n.entity_id)
            .filter(|(_, e)| {
                let relevant_attr = n.attribute == NODE_STATE_ATTRIBUTE || e.spec.aggregations.contains_key(&n.attribute);
                match &e.spec.members {
                    MemberSelector::Ids { ids } => ids.contains(&n.entity_id) && relevant_attr,
                    MemberSelector::Predicate { predicate } => {
                        n.attribute == predicate.attribute || (relevant_attr && e.last_members.lock().contains(&n.entity_id))
                    }
                }
            })
            .map(|(id, _)| id)
            .collect()
    }
}

impl NotificationSink for CompositeManager {
    fn deliver(&self, _sink: &Sink, n: &Notification) {
        for id in self.affected_by(n) {
            if let Err(e) = self.refresh(&id) {
                tracing::warn!(composite = %id, error = %e, "composite refresh failed");
            }
        }
    }
}
