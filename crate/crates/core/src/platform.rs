//! Single-process orchestration of the platform modules: measurement
//! ingestion, campaigns, dashboards, clock advancement and a command journal
//! that restores configuration after a restart.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analytics::{AnalysisResult, AnalysisTemplate, Analytics, AnalyticsConfig, AnalyticsError, TimeRange};
use crate::broker::{
    AttributeValue, BrokerConfig, BrokerError, ContextBroker, EntityRecord, EntityType, NodeLifecycle, NodeRegistration, Notification,
    NotificationSink, Selector, Sink, Subscription,
};
use crate::composite::{CompositeError, CompositeManager, CompositeSpec, DefinedComposite};
use crate::fusion::{FusionEngine, FusionError, SourceKind, SourceRecord};
use crate::outlier::{RejectReason, Verdict};
use crate::recommender::{
    Feedback, GroupDefinition, PreferenceTaxonomy, Recommendation, RecommendationRule, RecommendationState, Recommender,
    RecommenderConfig, RecommenderError, UserProfile,
};
use crate::stream::{ConditionSpec, EventPayload, PatternSpec, SensorDataStream, StreamError, StreamEvent, StreamProcessor};
use crate::time::{Clock, SimClock, Span, SystemClock, Timestamp};
use crate::timeseries::{Measurement, StoreConfig, TimeSeriesError, TimeSeriesStore};
use crate::value::{Quality, Scalar};

const JOURNAL_FILE: &str = "commands.jsonl";

#[derive(Debug, Error)]
pub enum PlatformError {
    #[error("unknown campaign `{0}`")]
    UnknownCampaign(String),
    #[error("unknown building space `{0}`")]
    UnknownSpace(String),
    #[error("campaign `{id}` is {status:?}")]
    CampaignState { id: String, status: CampaignStatus },
    #[error("campaign `{0}` is not active")]
    CampaignNotActive(String),
    #[error("invalid campaign: {0}")]
    InvalidCampaign(String),
    #[error("idempotency key `{0}` was used with a different body")]
    IdempotencyConflict(String),
    #[error("the clock is not simulated")]
    ClockNotSimulated,
    #[error("clock cannot move backwards from {now} to {requested}")]
    ClockBackwards { now: Timestamp, requested: Timestamp },
    #[error("invalid period")]
    InvalidPeriod,
    #[error("journal: {0}")]
    Journal(String),
    #[error(transparent)]
    Broker(#[from] BrokerError),
    #[error(transparent)]
    Store(#[from] TimeSeriesError),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Composite(#[from] CompositeError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Recommender(#[from] RecommenderError),
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
}

impl PlatformError {
    pub fn code(&self) -> &'static str {
        match self {
            PlatformError::UnknownCampaign(_) => "unknown-campaign",
            PlatformError::UnknownSpace(_) => "unknown-space",
            PlatformError::CampaignState { .. } => "wrong-campaign-state",
            PlatformError::CampaignNotActive(_) => "campaign-not-active",
            PlatformError::InvalidCampaign(_) => "invalid-campaign",
            PlatformError::IdempotencyConflict(_) => "idempotency-conflict",
            PlatformError::ClockNotSimulated => "clock-not-simulated",
            PlatformError::ClockBackwards { .. } => "clock-backwards",
            PlatformError::InvalidPeriod => "invalid-period",
            PlatformError::Journal(_) => "journal-error",
            PlatformError::Broker(e) => e.code(),
            PlatformError::Store(e) => e.code(),
            PlatformError::Stream(e) => e.code(),
            PlatformError::Composite(e) => e.code(),
            PlatformError::Fusion(e) => e.code(),
            PlatformError::Recommender(e) => e.code(),
            PlatformError::Analytics(e) => e.code(),
        }
    }
}

pub type Result<T, E = PlatformError> = std::result::Result<T, E>;

// -- configuration ------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    System,
    Simulated,
}

#[derive(Clone, Debug)]
pub struct PlatformConfig {
    /// Durable state directory; in-memory when absent.
    pub data_dir: Option<PathBuf>,
    pub clock: ClockMode,
    /// Initial simulated time.
    pub sim_start: Timestamp,
    /// With a simulated clock, ingestion moves the clock forward to each
    /// measurement's timestamp and runs the ticks due before it.
    pub auto_advance: bool,
    /// Emit an Observation document for every accepted measurement.
    pub fuse_observations: bool,
    /// Where new recommendations are pushed, in addition to polling.
    pub recommendation_webhook: Option<String>,
    pub idempotency_capacity: usize,
    pub store: StoreConfig,
    pub broker: BrokerConfig,
    pub recommender: RecommenderConfig,
    pub analytics: AnalyticsConfig,
}

impl Default for PlatformConfig {
    fn default() -> Self {
        PlatformConfig {
            data_dir: None,
            clock: ClockMode::System,
            sim_start: Timestamp::from_millis(0),
            auto_advance: true,
            fuse_observations: true,
            recommendation_webhook: None,
            idempotency_capacity: 1024,
            store: StoreConfig::default(),
            broker: BrokerConfig::default(),
            recommender: RecommenderConfig::default(),
            analytics: AnalyticsConfig::default(),
        }
    }
}

impl PlatformConfig {
    pub fn simulated(start: Timestamp) -> Self {
        PlatformConfig { clock: ClockMode::Simulated, sim_start: start, ..Default::default() }
    }
}

// -- campaigns ------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CampaignStatus {
    Draft,
    Active,
    Ended,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignSpec {
    pub name: String,
    pub spaces: BTreeSet<String>,
    #[serde(default)]
    pub participants: BTreeSet<String>,
    #[serde(default)]
    pub start: Option<Timestamp>,
    #[serde(default)]
    pub end: Option<Timestamp>,
    #[serde(default = "default_energy_attribute")]
    pub energy_attribute: String,
    #[serde(default = "default_energy_unit")]
    pub energy_unit: String,
}

fn default_energy_attribute() -> String {
    "energy".into()
}

fn default_energy_unit() -> String {
    "kWh".into()
}

impl CampaignSpec {
    pub fn new(name: &str, spaces: &[&str]) -> Self {
        CampaignSpec {
            name: name.to_owned(),
            spaces: spaces.iter().map(|s| s.to_string()).collect(),
            participants: BTreeSet::new(),
            start: None,
            end: None,
            energy_attribute: default_energy_attribute(),
            energy_unit: default_energy_unit(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Campaign {
    pub id: String,
    pub name: String,
    pub spaces: BTreeSet<String>,
    pub participants: BTreeSet<String>,
    pub start: Option<Timestamp>,
    pub end: Option<Timestamp>,
    pub status: CampaignStatus,
    pub energy_attribute: String,
    pub energy_unit: String,
    pub streams: Vec<String>,
    pub rules: Vec<String>,
    pub created_at: Timestamp,
    pub last_summary: Option<DashboardSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DashboardSummary {
    pub campaign_id: String,
    pub period: TimeRange,
    pub previous_period: TimeRange,
    pub energy_attribute: String,
    pub unit: String,
    pub current_consumption: f64,
    /// Absent when the previous period holds no samples.
    pub previous_consumption: Option<f64>,
    /// `(current − previous) / previous × 100`.
    pub delta_percent: Option<f64>,
    pub per_space: BTreeMap<String, f64>,
    pub active_streams: usize,
    pub recommendations_delivered: usize,
    pub recommendations_accepted: usize,
    pub recommendations_validated: usize,
}

// -- ingestion reports ------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ItemStatus {
    Accepted,
    DroppedAsOutlier,
    Duplicate,
    Error,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemReport {
    pub index: usize,
    pub status: ItemStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<RejectReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub accepted: usize,
    pub dropped: usize,
    pub duplicates: usize,
    pub errors: usize,
    pub items: Vec<ItemReport>,
}

impl IngestReport {
    fn push(&mut self, item: ItemReport) {
        match item.status {
            ItemStatus::Accepted => self.accepted += 1,
            ItemStatus::DroppedAsOutlier => self.dropped += 1,
            ItemStatus::Duplicate => self.duplicates += 1,
            ItemStatus::Error => self.errors += 1,
        }
        self.items.push(item);
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdvanceReport {
    pub now: Timestamp,
    pub ticks: usize,
    pub condition_firings: usize,
    pub recommendations: Vec<String>,
    pub resolved: Vec<(String, RecommendationState)>,
    pub disconnected: Vec<String>,
}

/// Message for an external webhook, delivered by the HTTP layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutboundMessage {
    pub url: String,
    pub body: Value,
}

// -- journal ----------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", content = "args", rename_all = "kebab-case")]
pub enum Command {
    UpsertEntity(EntityRecord),
    UpdateAttributes { id: String, attributes: BTreeMap<String, AttributeValue> },
    DeleteEntity { id: String },
    RegisterNode(NodeRegistration),
    Subscribe(Subscription),
    DefineComposite(CompositeSpec),
    RegisterStream(SensorDataStream),
    ActivateStream { id: String },
    DeactivateStream { id: String },
    RegisterCondition(ConditionSpec),
    RegisterPattern(PatternSpec),
    RegisterGroup(GroupDefinition),
    SetTaxonomy(PreferenceTaxonomy),
    UpsertUser(UserProfile),
    RegisterRule(RecommendationRule),
    CreateCampaign(CampaignSpec),
    ActivateCampaign { id: String },
    EndCampaign { id: String },
    RegisterTemplate(AnalysisTemplate),
}

#[derive(Serialize, Deserialize)]
struct JournalEntry {
    at: Timestamp,
    command: Command,
}

/// Feeds broker changes to task validation.
struct ValidationFeed(Arc<Recommender>);

impl NotificationSink for ValidationFeed {
    fn deliver(&self, _sink: &Sink, n: &Notification) {
        if self.0.wants_observation(&n.entity_id, &n.attribute) {
            self.0.observe(&n.entity_id, &n.attribute, n.new.value.clone(), n.new.observed_at);
        }
    }
}

struct IdempotencyCache {
    order: VecDeque<String>,
    entries: BTreeMap<String, (String, IngestReport)>,
}

pub struct Platform {
    config: PlatformConfig,
    clock: Arc<dyn Clock>,
    sim_clock: Option<Arc<SimClock>>,
    broker: Arc<ContextBroker>,
    store: Arc<TimeSeriesStore>,
    streams: Arc<StreamProcessor>,
    composites: Arc<CompositeManager>,
    fusion: Arc<FusionEngine>,
    recommender: Arc<Recommender>,
    analytics: Arc<Analytics>,
    campaigns: RwLock<BTreeMap<String, Campaign>>,
    next_campaign: Mutex<u64>,
    idempotency: Mutex<IdempotencyCache>,
    outbox: Mutex<Vec<OutboundMessage>>,
    advance: Mutex<Timestamp>,
    journal: Option<Mutex<File>>,
    replaying: AtomicBool,
}

impl std::fmt::Debug for Platform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Platform").field("clock", &self.config.clock).field("data_dir", &self.config.data_dir).finish()
    }
}

impl Platform {
    /// Builds the platform; with a data directory, reopens the measurement
    /// log and replays the command journal.
    pub fn open(config: PlatformConfig) -> Result<Self> {
        let (clock, sim_clock): (Arc<dyn Clock>, Option<Arc<SimClock>>) = match config.clock {
            ClockMode::System => (Arc::new(SystemClock), None),
            ClockMode::Simulated => {
                let c = Arc::new(SimClock::new(config.sim_start));
                (c.clone(), Some(c))
            }
        };
        let broker = Arc::new(ContextBroker::with_config(clock.clone(), config.broker.clone()));
        let store = Arc::new(match &config.data_dir {
            Some(dir) => TimeSeriesStore::open(dir, config.store.clone())?,
            None => TimeSeriesStore::in_memory_with(config.store.clone()),
        });
        let streams = Arc::new(StreamProcessor::new(broker.clone(), store.clone()));
        broker.register_sink(&Sink::StreamProcessor, streams.clone());
        broker.subscribe(Subscription::new(Selector::default(), Sink::StreamProcessor));
        let composites = CompositeManager::new(broker.clone());
        let fusion = Arc::new(FusionEngine::default());
        let recommender = Arc::new(Recommender::new(broker.clone(), streams.clone(), fusion.clone(), config.recommender.clone()));
        let feed = Sink::Named { name: "task-validation".into() };
        broker.register_sink(&feed, Arc::new(ValidationFeed(recommender.clone())));
        broker.subscribe(Subscription::new(Selector::default(), feed));
        let analytics = Arc::new(Analytics::new(broker.clone(), store.clone(), recommender.clone(), fusion.clone(), config.analytics.clone()));

        let journal_path = config.data_dir.as_ref().map(|d| d.join(JOURNAL_FILE));
        let history = match &journal_path {
            Some(p) if p.exists() => read_journal(p)?,
            _ => Vec::new(),
        };
        let journal = match &journal_path {
            Some(p) => Some(Mutex::new(
                OpenOptions::new().create(true).append(true).open(p).map_err(|e| PlatformError::Journal(e.to_string()))?,
            )),
            None => None,
        };
        let start = clock.now();
        let platform = Platform {
            idempotency: Mutex::new(IdempotencyCache { order: VecDeque::new(), entries: BTreeMap::new() }),
            config,
            clock,
            sim_clock,
            broker,
            store,
            streams,
            composites,
            fusion,
            recommender,
            analytics,
            campaigns: RwLock::new(BTreeMap::new()),
            next_campaign: Mutex::new(0),
            outbox: Mutex::new(Vec::new()),
            advance: Mutex::new(start),
            journal,
            replaying: AtomicBool::new(false),
        };
        platform.replay(history);
        Ok(platform)
    }

    pub fn in_memory(config: PlatformConfig) -> Self {
        Self::open(PlatformConfig { data_dir: None, ..config }).expect("in-memory platform has no I/O")
    }

    fn replay(&self, history: Vec<JournalEntry>) {
        if history.is_empty() {
            return;
        }
        self.replaying.store(true, Ordering::SeqCst);
        let total = history.len();
        let mut failed = 0;
        for entry in history {
            if let Some(c) = &self.sim_clock {
                if entry.at > c.now() {
                    c.set(entry.at);
                }
            }
            if let Err(e) = self.apply(entry.command, entry.at) {
                failed += 1;
                tracing::warn!(error = %e, "journal command failed on replay");
            }
        }
        *self.advance.lock() = self.clock.now();
        self.replaying.store(false, Ordering::SeqCst);
        tracing::info!(commands = total, failed, "configuration restored from journal");
    }

    fn apply(&self, cmd: Command, at: Timestamp) -> Result<()> {
        match cmd {
            Command::UpsertEntity(r) => self.upsert_entity(r).map(drop),
            Command::UpdateAttributes { id, attributes } => self.update_attributes(&id, attributes).map(drop),
            Command::DeleteEntity { id } => self.delete_entity(&id),
            Command::RegisterNode(r) => self.register_node(r).map(drop),
            Command::Subscribe(s) => self.subscribe(s).map(drop),
            Command::DefineComposite(s) => self.define_composite(s).map(drop),
            Command::RegisterStream(s) => self.register_stream(s).map(drop),
            Command::ActivateStream { id } => self.activate_stream_at(&id, at),
            Command::DeactivateStream { id } => self.deactivate_stream(&id),
            Command::RegisterCondition(c) => self.register_condition(c).map(drop),
            Command::RegisterPattern(p) => self.register_pattern(p).map(drop),
            Command::RegisterGroup(g) => self.register_group(g),
            Command::SetTaxonomy(t) => self.set_taxonomy(t),
            Command::UpsertUser(u) => self.upsert_user(u).map(drop),
            Command::RegisterRule(r) => self.register_rule(r).map(drop),
            Command::CreateCampaign(c) => self.create_campaign(c).map(drop),
            Command::ActivateCampaign { id } => self.activate_campaign_at(&id, at).map(drop),
            Command::EndCampaign { id } => self.end_campaign_at(&id, at).map(drop),
            Command::RegisterTemplate(t) => self.register_template(t).map(drop),
        }
    }

    fn record(&self, cmd: Command) {
        if self.replaying.load(Ordering::SeqCst) {
            return;
        }
        let Some(journal) = &self.journal else { return };
        let line = serde_json::to_string(&JournalEntry { at: self.clock.now(), command: cmd }).expect("command serializes");
        let mut f = journal.lock();
        if let Err(e) = writeln!(f, "{line}").and_then(|_| f.flush()) {
            tracing::error!(error = %e, "journal write failed");
        }
    }

    // -- accessors --

    pub fn config(&self) -> &PlatformConfig {
        &self.config
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    pub fn is_simulated(&self) -> bool {
        self.sim_clock.is_some()
    }

    pub fn broker(&self) -> &Arc<ContextBroker> {
        &self.broker
    }

    pub fn store(&self) -> &Arc<TimeSeriesStore> {
        &self.store
    }

    pub fn streams(&self) -> &Arc<StreamProcessor> {
        &self.streams
    }

    pub fn composites(&self) -> &Arc<CompositeManager> {
        &self.composites
    }

    pub fn fusion(&self) -> &Arc<FusionEngine> {
        &self.fusion
    }

    pub fn recommender(&self) -> &Arc<Recommender> {
        &self.recommender
    }

    pub fn analytics(&self) -> &Arc<Analytics> {
        &self.analytics
    }

    pub fn flush(&self) -> Result<()> {
        Ok(self.store.flush()?)
    }

    // -- entities --

    fn fuse_entity(&self, r: &EntityRecord) {
        let mut rec = SourceRecord::new(SourceKind::EntityRecord, &r.id, r.updated_at)
            .text("entity_type", r.entity_type.as_str())
            .time("updated_at", r.updated_at);
        let class = match r.entity_type {
            EntityType::SensorNode => Some("entropy:Sensor"),
            EntityType::Room => Some("entropy:Room"),
            EntityType::Building => Some("entropy:Building"),
            EntityType::BuildingSpace => Some("entropy:BuildingSpace"),
            EntityType::Door => Some("entropy:Door"),
            EntityType::Custom => None,
        };
        if let Some(c) = class {
            rec = rec.typed(c);
        }
        if let Some(space) = r.located_in() {
            rec = rec.node("located_in", space);
        }
        if let Err(e) = self.fusion.ingest(&rec) {
            tracing::warn!(entity = %r.id, error = %e, "entity document rejected");
        }
    }

    pub fn upsert_entity(&self, record: EntityRecord) -> Result<EntityRecord> {
        self.broker.upsert_entity(record.clone())?;
        self.record(Command::UpsertEntity(record.clone()));
        let stored = self.broker.get_entity(&record.id)?;
        self.fuse_entity(&stored);
        self.collect_webhooks();
        Ok(stored)
    }

    pub fn update_attributes(&self, id: &str, attributes: BTreeMap<String, AttributeValue>) -> Result<EntityRecord> {
        let r = self.broker.update_attributes(id, attributes.clone())?;
        self.record(Command::UpdateAttributes { id: id.to_owned(), attributes });
        self.collect_webhooks();
        Ok(r)
    }

    pub fn delete_entity(&self, id: &str) -> Result<()> {
        self.broker.delete_entity(id)?;
        self.record(Command::DeleteEntity { id: id.to_owned() });
        Ok(())
    }

    pub fn register_node(&self, reg: NodeRegistration) -> Result<NodeLifecycle> {
        let lc = self.broker.register_node(reg.clone())?;
        self.record(Command::RegisterNode(reg));
        Ok(lc)
    }

    pub fn subscribe(&self, sub: Subscription) -> Result<String> {
        let id = self.broker.subscribe(sub.clone());
        self.record(Command::Subscribe(sub));
        Ok(id)
    }

    pub fn define_composite(&self, spec: CompositeSpec) -> Result<DefinedComposite> {
        let d = self.composites.define_composite(spec.clone())?;
        self.record(Command::DefineComposite(spec));
        Ok(d)
    }

    // -- streams --

    fn require_active_campaign(&self, id: &str) -> Result<()> {
        match self.campaigns.read().get(id) {
            None => Err(PlatformError::UnknownCampaign(id.to_owned())),
            Some(c) if c.status != CampaignStatus::Active => Err(PlatformError::CampaignNotActive(id.to_owned())),
            Some(_) => Ok(()),
        }
    }

    pub fn register_stream(&self, spec: SensorDataStream) -> Result<String> {
        if let Some(c) = &spec.campaign_id {
            self.require_active_campaign(c)?;
        }
        let id = self.streams.register_stream(spec.clone())?;
        if let Some(c) = &spec.campaign_id {
            if let Some(camp) = self.campaigns.write().get_mut(c) {
                if !camp.streams.contains(&id) {
                    camp.streams.push(id.clone());
                }
            }
        }
        self.record(Command::RegisterStream(spec));
        Ok(id)
    }

    pub fn activate_stream(&self, id: &str) -> Result<SensorDataStream> {
        self.activate_stream_at(id, self.clock.now())?;
        Ok(self.streams.stream(id)?)
    }

    fn activate_stream_at(&self, id: &str, at: Timestamp) -> Result<()> {
        self.streams.activate(id, at)?;
        self.record(Command::ActivateStream { id: id.to_owned() });
        Ok(())
    }

    pub fn deactivate_stream(&self, id: &str) -> Result<()> {
        self.streams.deactivate(id)?;
        self.record(Command::DeactivateStream { id: id.to_owned() });
        Ok(())
    }

    pub fn register_condition(&self, spec: ConditionSpec) -> Result<String> {
        let id = self.streams.register_condition(spec.clone())?;
        self.record(Command::RegisterCondition(spec));
        Ok(id)
    }

    pub fn register_pattern(&self, spec: PatternSpec) -> Result<String> {
        let id = self.streams.register_pattern(spec.clone())?;
        self.record(Command::RegisterPattern(spec));
        Ok(id)
    }

    // -- ingestion --

    fn digest<T: Serialize>(body: &T) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(body).expect("request body serializes"));
        hex::encode(h.finalize())
    }

    /// Processes a batch item by item. A failing item never aborts the batch.
    /// With an idempotency key, a repeated request returns the first report.
    pub fn ingest_batch(&self, items: Vec<Measurement>, idempotency_key: Option<&str>) -> Result<IngestReport> {
        let digest = idempotency_key.map(|_| Self::digest(&items));
        self.ingest_parsed(items.into_iter().map(Ok).collect(), idempotency_key, digest)
    }

    /// Like [`Platform::ingest_batch`] for undecoded JSON items; an item that
    /// is not a measurement is reported as `malformed-measurement`.
    pub fn ingest_json(&self, items: Vec<Value>, idempotency_key: Option<&str>) -> Result<IngestReport> {
        let digest = idempotency_key.map(|_| Self::digest(&items));
        let parsed = items.into_iter().map(|v| serde_json::from_value::<Measurement>(v).map_err(|e| e.to_string())).collect();
        self.ingest_parsed(parsed, idempotency_key, digest)
    }

    fn ingest_parsed(
        &self,
        items: Vec<Result<Measurement, String>>,
        idempotency_key: Option<&str>,
        digest: Option<String>,
    ) -> Result<IngestReport> {
        if let (Some(key), Some(digest)) = (idempotency_key, &digest) {
            if let Some((d, report)) = self.idempotency.lock().entries.get(key) {
                if d != digest {
                    return Err(PlatformError::IdempotencyConflict(key.to_owned()));
                }
                return Ok(report.clone());
            }
        }
        let mut report = IngestReport::default();
        for (index, item) in items.into_iter().enumerate() {
            report.push(match item {
                Ok(m) => self.ingest_one(index, m),
                Err(message) => ItemReport {
                    index,
                    status: ItemStatus::Error,
                    reason: None,
                    code: Some("malformed-measurement".into()),
                    message: Some(message),
                },
            });
        }
        self.collect_webhooks();
        if let (Some(key), Some(digest)) = (idempotency_key, digest) {
            let mut cache = self.idempotency.lock();
            if cache.entries.insert(key.to_owned(), (digest, report.clone())).is_none() {
                cache.order.push_back(key.to_owned());
            }
            while cache.order.len() > self.config.idempotency_capacity {
                if let Some(old) = cache.order.pop_front() {
                    cache.entries.remove(&old);
                }
            }
        }
        Ok(report)
    }

    fn ingest_one(&self, index: usize, m: Measurement) -> ItemReport {
        let error = |code: &str, message: String| ItemReport { index, status: ItemStatus::Error, reason: None, code: Some(code.to_owned()), message: Some(message) };
        if !self.broker.contains(&m.sensor_id) {
            return error("unknown-sensor", format!("unknown sensor `{}`", m.sensor_id));
        }
        if let (Some(c), true) = (&self.sim_clock, self.config.auto_advance) {
            if m.observed_at > c.now() {
                c.set(m.observed_at);
                self.advance_to(m.observed_at - Span::from_millis(1));
            }
        }
        let outcome = match self.streams.ingest(m.clone()) {
            Ok(o) => o,
            Err(e) => return error(e.code(), e.to_string()),
        };
        if outcome.duplicate {
            return ItemReport { index, status: ItemStatus::Duplicate, reason: None, code: None, message: None };
        }
        match outcome.verdict {
            Verdict::Reject(reason) => ItemReport { index, status: ItemStatus::DroppedAsOutlier, reason: Some(reason), code: None, message: None },
            Verdict::Accept => {
                self.after_accept(&m);
                ItemReport { index, status: ItemStatus::Accepted, reason: None, code: None, message: None }
            }
        }
    }

    fn after_accept(&self, m: &Measurement) {
        let attr = AttributeValue { value: Scalar::Number(m.value), unit: m.unit.clone(), observed_at: m.observed_at, quality: Quality::Cleaned };
        if let Err(e) = self.broker.update_attributes(&m.sensor_id, BTreeMap::from([(m.attribute.clone(), attr)])) {
            tracing::debug!(sensor = %m.sensor_id, error = %e, "current state not updated");
        }
        if self.broker.lifecycle(&m.sensor_id).is_some() {
            let _ = self.broker.mark_liveness(&m.sensor_id, m.observed_at);
        }
        if self.recommender.wants_observation(&m.sensor_id, &m.attribute) {
            self.recommender.observe(&m.sensor_id, &m.attribute, Scalar::Number(m.value), m.observed_at);
        }
        if self.config.fuse_observations {
            let rec = SourceRecord::new(SourceKind::Measurement, format!("{}.{}", m.sensor_id, m.attribute), m.observed_at)
                .node("sensor_id", &m.sensor_id)
                .text("attribute", &m.attribute)
                .number("value", m.value)
                .text("unit", &m.unit)
                .time("observed_at", m.observed_at)
                .text("quality", Quality::Cleaned.as_str());
            if let Err(e) = self.fusion.ingest(&rec) {
                tracing::warn!(sensor = %m.sensor_id, error = %e, "observation document rejected");
            }
        }
    }

    // -- time --

    /// Moves the simulated clock and runs everything due up to `t`.
    pub fn set_clock(&self, t: Timestamp) -> Result<AdvanceReport> {
        let c = self.sim_clock.as_ref().ok_or(PlatformError::ClockNotSimulated)?;
        let now = c.now();
        if t < now {
            return Err(PlatformError::ClockBackwards { now, requested: t });
        }
        c.set(t);
        Ok(self.advance_to(t))
    }

    /// Runs stream ticks, fires rules, resolves validation windows and
    /// expiries, sweeps node liveness and refreshes composites.
    pub fn advance_to(&self, now: Timestamp) -> AdvanceReport {
        let mut watermark = self.advance.lock();
        let events: Vec<StreamEvent> = self.streams.advance_to(now);
        let mut report = AdvanceReport { now, ..Default::default() };
        for e in &events {
            match &e.payload {
                EventPayload::Tick { .. } => report.ticks += 1,
                EventPayload::Condition { condition_id, value, .. } => {
                    report.condition_firings += 1;
                    for r in self.recommender.on_condition_fired(condition_id, *value, e.at) {
                        if let Some(url) = &self.config.recommendation_webhook {
                            self.outbox.lock().push(OutboundMessage { url: url.clone(), body: json!({ "recommendation": r }) });
                        }
                        report.recommendations.push(r.id);
                    }
                }
                _ => {}
            }
        }
        report.resolved = self.recommender.sweep(now);
        report.disconnected = self.broker.sweep_liveness(now).into_iter().map(|lc| lc.node_id).collect();
        for e in self.composites.refresh_all() {
            tracing::warn!(error = %e, "composite refresh failed");
        }
        *watermark = (*watermark).max(now);
        drop(watermark);
        self.collect_webhooks();
        report
    }

    fn collect_webhooks(&self) {
        let parked = self.broker.take_undelivered();
        if parked.is_empty() {
            return;
        }
        let mut out = self.outbox.lock();
        for (sink, n) in parked {
            if let Sink::Webhook { url } = sink {
                out.push(OutboundMessage { url, body: json!({ "notification": n }) });
            }
        }
    }

    /// Pending webhook messages, oldest first.
    pub fn drain_outbox(&self) -> Vec<OutboundMessage> {
        self.collect_webhooks();
        std::mem::take(&mut self.outbox.lock())
    }

    // -- recommender --

    pub fn register_group(&self, def: GroupDefinition) -> Result<()> {
        self.recommender.register_group(def.clone())?;
        self.record(Command::RegisterGroup(def));
        Ok(())
    }

    pub fn set_taxonomy(&self, t: PreferenceTaxonomy) -> Result<()> {
        self.recommender.set_taxonomy(t.clone())?;
        self.record(Command::SetTaxonomy(t));
        Ok(())
    }

    pub fn upsert_user(&self, p: UserProfile) -> Result<UserProfile> {
        let out = self.recommender.upsert_user(p.clone())?;
        self.record(Command::UpsertUser(p));
        Ok(out)
    }

    pub fn register_rule(&self, rule: RecommendationRule) -> Result<String> {
        if let Some(c) = &rule.campaign_id {
            self.require_active_campaign(c)?;
        }
        let id = self.recommender.register_rule(rule.clone())?;
        if let Some(c) = &rule.campaign_id {
            if let Some(camp) = self.campaigns.write().get_mut(c) {
                camp.rules.push(id.clone());
            }
        }
        self.record(Command::RegisterRule(rule));
        Ok(id)
    }

    pub fn record_feedback(&self, rec_id: &str, feedback: Feedback) -> Result<Recommendation> {
        Ok(self.recommender.record_feedback(rec_id, feedback, self.clock.now())?)
    }

    // -- campaigns --

    pub fn create_campaign(&self, spec: CampaignSpec) -> Result<Campaign> {
        if spec.name.trim().is_empty() {
            return Err(PlatformError::InvalidCampaign("name is empty".into()));
        }
        if spec.spaces.is_empty() {
            return Err(PlatformError::InvalidCampaign("no building spaces".into()));
        }
        if let (Some(s), Some(e)) = (spec.start, spec.end) {
            if e <= s {
                return Err(PlatformError::InvalidCampaign("end precedes start".into()));
            }
        }
        let campaign = {
            let mut n = self.next_campaign.lock();
            *n += 1;
            let c = Campaign {
                id: format!("campaign-{n}"),
                name: spec.name.clone(),
                spaces: spec.spaces.clone(),
                participants: spec.participants.clone(),
                start: spec.start,
                end: spec.end,
                status: CampaignStatus::Draft,
                energy_attribute: spec.energy_attribute.clone(),
                energy_unit: spec.energy_unit.clone(),
                streams: Vec::new(),
                rules: Vec::new(),
                created_at: self.clock.now(),
                last_summary: None,
            };
            self.campaigns.write().insert(c.id.clone(), c.clone());
            c
        };
        self.record(Command::CreateCampaign(spec));
        Ok(campaign)
    }

    pub fn campaign(&self, id: &str) -> Result<Campaign> {
        self.campaigns.read().get(id).cloned().ok_or_else(|| PlatformError::UnknownCampaign(id.to_owned()))
    }

    pub fn campaigns(&self) -> Vec<Campaign> {
        self.campaigns.read().values().cloned().collect()
    }

    pub fn activate_campaign(&self, id: &str) -> Result<Campaign> {
        self.activate_campaign_at(id, self.clock.now())
    }

    fn activate_campaign_at(&self, id: &str, at: Timestamp) -> Result<Campaign> {
        let c = self.campaign(id)?;
        if c.status != CampaignStatus::Draft {
            return Err(PlatformError::CampaignState { id: id.to_owned(), status: c.status });
        }
        for s in &c.spaces {
            if !self.broker.contains(s) {
                return Err(PlatformError::UnknownSpace(s.clone()));
            }
        }
        let out = {
            let mut all = self.campaigns.write();
            let c = all.get_mut(id).expect("checked above");
            c.status = CampaignStatus::Active;
            c.start.get_or_insert(at);
            c.clone()
        };
        self.record(Command::ActivateCampaign { id: id.to_owned() });
        Ok(out)
    }

    pub fn end_campaign(&self, id: &str) -> Result<Campaign> {
        self.end_campaign_at(id, self.clock.now())
    }

    fn end_campaign_at(&self, id: &str, at: Timestamp) -> Result<Campaign> {
        let c = self.campaign(id)?;
        if c.status != CampaignStatus::Active {
            return Err(PlatformError::CampaignState { id: id.to_owned(), status: c.status });
        }
        {
            let mut all = self.campaigns.write();
            let c = all.get_mut(id).expect("checked above");
            c.end = Some(c.end.map_or(at, |e| e.min(at)));
        }
        let summary = self.compute_summary(&self.campaign(id)?, None).ok();
        let out = {
            let mut all = self.campaigns.write();
            let c = all.get_mut(id).expect("checked above");
            c.status = CampaignStatus::Ended;
            if summary.is_some() {
                c.last_summary = summary;
            }
            c.clone()
        };
        self.record(Command::EndCampaign { id: id.to_owned() });
        Ok(out)
    }

    /// Summary for `period`, by default from the campaign start to its end or
    /// now. An ended campaign returns its last computed summary.
    pub fn dashboard(&self, id: &str, period: Option<TimeRange>) -> Result<DashboardSummary> {
        let c = self.campaign(id)?;
        if c.status == CampaignStatus::Ended && period.is_none() {
            if let Some(s) = c.last_summary {
                return Ok(s);
            }
        }
        let s = self.compute_summary(&c, period)?;
        if let Some(c) = self.campaigns.write().get_mut(id) {
            c.last_summary = Some(s.clone());
        }
        Ok(s)
    }

    fn compute_summary(&self, c: &Campaign, period: Option<TimeRange>) -> Result<DashboardSummary> {
        let period = match period {
            Some(p) => p,
            None => {
                let from = c.start.ok_or(PlatformError::InvalidPeriod)?;
                let inclusive_now = self.clock.now() + Span::from_millis(1);
                let to = c.end.unwrap_or(inclusive_now).min(inclusive_now);
                TimeRange::new(from, to)
            }
        };
        if period.is_empty() {
            return Err(PlatformError::InvalidPeriod);
        }
        let previous_period = period.previous();
        let current = self.analytics.consumption(&c.energy_attribute, &c.spaces, period)?;
        let previous = self.analytics.consumption(&c.energy_attribute, &c.spaces, previous_period)?;
        let previous_consumption = (previous.samples > 0).then_some(previous.total);
        let delta_percent = previous_consumption.and_then(|p| crate::analytics::relative_delta(current.total, p)).map(|d| d * 100.0);
        let rules: BTreeSet<&String> = c.rules.iter().collect();
        let rec_ids: BTreeSet<String> = self.recommender.recommendations().into_iter().filter(|r| rules.contains(&r.rule_id)).map(|r| r.id).collect();
        let events = self.recommender.events();
        let count = |s: RecommendationState| events.iter().filter(|e| e.to == s && rec_ids.contains(&e.recommendation_id)).count();
        let active_streams = c.streams.iter().filter(|s| self.streams.stream(s).is_ok_and(|s| s.active)).count();
        Ok(DashboardSummary {
            campaign_id: c.id.clone(),
            period,
            previous_period,
            energy_attribute: c.energy_attribute.clone(),
            unit: c.energy_unit.clone(),
            current_consumption: current.total,
            previous_consumption,
            delta_percent,
            per_space: current.per_space,
            active_streams,
            recommendations_delivered: count(RecommendationState::Delivered),
            recommendations_accepted: count(RecommendationState::Accepted),
            recommendations_validated: count(RecommendationState::Validated),
        })
    }

    // -- analytics --

    pub fn register_template(&self, t: AnalysisTemplate) -> Result<String> {
        let id = self.analytics.register_template(t.clone())?;
        self.record(Command::RegisterTemplate(AnalysisTemplate { id: id.clone(), ..t }));
        Ok(id)
    }

    pub fn run_analysis(&self, template_id: &str, overrides: &Map<String, Value>) -> Result<AnalysisResult> {
        Ok(self.analytics.run_template(template_id, overrides)?)
    }
}

fn read_journal(path: &Path) -> Result<Vec<JournalEntry>> {
    let file = File::open(path).map_err(|e| PlatformError::Journal(e.to_string()))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| PlatformError::Journal(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(entry) => out.push(entry),
            Err(e) => tracing::warn!(error = %e, "skipping unreadable journal line"),
        }
    }
    Ok(out)
}
