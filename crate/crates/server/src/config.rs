//! Server configuration: built-in defaults, overlaid by a TOML file, overlaid
//! by `ENTROPY_*` environment variables.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use entropy_core::fusion::VOCABULARY_VERSION;
use entropy_core::platform::{ClockMode, PlatformConfig};
use entropy_core::recommender::GamerType;
use entropy_core::{Span, Timestamp};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid value for {var}: {message}")]
    Env { var: &'static str, message: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub server: ServerSection,
    pub clock: ClockSection,
    pub storage: StorageSection,
    pub recommender: RecommenderSection,
    pub webhooks: WebhookSection,
    pub log: LogSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerSection {
    pub bind: SocketAddr,
    /// Bearer token required on every mutating request.
    pub token: String,
    pub idempotency_capacity: usize,
    /// Expected vocabulary version; startup fails on mismatch.
    pub vocabulary_version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClockSection {
    pub mode: ClockMode,
    /// Start of simulated time.
    pub start: Option<Timestamp>,
    /// With a simulated clock, ingestion moves time forward.
    pub auto_advance: bool,
    /// How often the system clock drives stream ticks.
    pub tick_interval: Span,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StorageSection {
    /// Unset keeps everything in memory.
    pub data_dir: Option<PathBuf>,
    pub flush_window: Span,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecommenderSection {
    pub gamer_type_precedence: Vec<GamerType>,
    pub validation_window: Span,
    pub relative_drop: f64,
    pub message_expiry: Span,
    pub evidence_threshold: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WebhookSection {
    /// Receives every delivered recommendation.
    pub recommendations: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogSection {
    /// `tracing` filter directive.
    pub level: String,
}

impl Default for ServerSection {
    fn default() -> Self {
        ServerSection {
            bind: "127.0.0.1:8080".parse().expect("valid address"),
            token: "change-me".into(),
            idempotency_capacity: 1024,
            vocabulary_version: VOCABULARY_VERSION.into(),
        }
    }
}

impl Default for ClockSection {
    fn default() -> Self {
        ClockSection { mode: ClockMode::System, start: None, auto_advance: true, tick_interval: Span::from_secs(1) }
    }
}

impl Default for StorageSection {
    fn default() -> Self {
        StorageSection { data_dir: None, flush_window: Span::from_secs(1) }
    }
}

impl Default for RecommenderSection {
    fn default() -> Self {
        let d = entropy_core::recommender::RecommenderConfig::default();
        RecommenderSection {
            gamer_type_precedence: d.precedence,
            validation_window: d.validation_window,
            relative_drop: d.relative_drop,
            message_expiry: d.message_expiry,
            evidence_threshold: d.evidence_threshold,
        }
    }
}

impl Default for LogSection {
    fn default() -> Self {
        LogSection { level: "info".into() }
    }
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            server: ServerSection::default(),
            clock: ClockSection::default(),
            storage: StorageSection::default(),
            recommender: RecommenderSection::default(),
            webhooks: WebhookSection::default(),
            log: LogSection::default(),
        }
    }
}

/// Environment variables understood by [`ServerConfig::load`].
pub const ENV_VARS: &[&str] = &[
    "ENTROPY_BIND",
    "ENTROPY_TOKEN",
    "ENTROPY_DATA_DIR",
    "ENTROPY_FLUSH_WINDOW",
    "ENTROPY_CLOCK",
    "ENTROPY_SIM_START",
    "ENTROPY_AUTO_ADVANCE",
    "ENTROPY_TICK_INTERVAL",
    "ENTROPY_VALIDATION_WINDOW",
    "ENTROPY_MESSAGE_EXPIRY",
    "ENTROPY_GAMER_TYPE_PRECEDENCE",
    "ENTROPY_RECOMMENDATION_WEBHOOK",
    "ENTROPY_LOG",
];

fn parse<T: std::str::FromStr>(var: &'static str, raw: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    raw.trim().parse().map_err(|e: T::Err| ConfigError::Env { var, message: e.to_string() })
}

fn parse_span(var: &'static str, raw: &str) -> Result<Span, ConfigError> {
    serde_json::from_value(serde_json::Value::String(raw.trim().to_owned())).map_err(|e| ConfigError::Env { var, message: e.to_string() })
}

impl ServerConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    /// Defaults, then `file`, then the variables returned by `env`.
    pub fn load(file: Option<&Path>, env: impl Fn(&str) -> Option<String>) -> Result<Self, ConfigError> {
        let mut config = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_owned(), source })?;
                Self::from_toml(&text)?
            }
            None => ServerConfig::default(),
        };
        config.apply_env(env)?;
        config.check()?;
        Ok(config)
    }

    pub fn apply_env(&mut self, env: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        for var in ENV_VARS {
            let Some(raw) = env(var) else { continue };
            match *var {
                "ENTROPY_BIND" => self.server.bind = parse(var, &raw)?,
                "ENTROPY_TOKEN" => self.server.token = raw,
                "ENTROPY_DATA_DIR" => self.storage.data_dir = (!raw.is_empty()).then(|| PathBuf::from(raw)),
                "ENTROPY_FLUSH_WINDOW" => self.storage.flush_window = parse_span(var, &raw)?,
                "ENTROPY_CLOCK" => {
                    self.clock.mode = serde_json::from_value(serde_json::Value::String(raw.trim().to_lowercase()))
                        .map_err(|_| ConfigError::Env { var, message: format!("expected `system` or `simulated`, got `{raw}`") })?
                }
                "ENTROPY_SIM_START" => {
                    self.clock.start = Some(Timestamp::parse_rfc3339(raw.trim()).ok_or_else(|| ConfigError::Env { var, message: "expected RFC 3339".into() })?)
                }
                "ENTROPY_AUTO_ADVANCE" => self.clock.auto_advance = parse(var, &raw)?,
                "ENTROPY_TICK_INTERVAL" => self.clock.tick_interval = parse_span(var, &raw)?,
                "ENTROPY_VALIDATION_WINDOW" => self.recommender.validation_window = parse_span(var, &raw)?,
                "ENTROPY_MESSAGE_EXPIRY" => self.recommender.message_expiry = parse_span(var, &raw)?,
                "ENTROPY_GAMER_TYPE_PRECEDENCE" => {
                    self.recommender.gamer_type_precedence =
                        raw.split(',').map(|s| parse::<GamerType>(var, s)).collect::<Result<_, _>>()?
                }
                "ENTROPY_RECOMMENDATION_WEBHOOK" => self.webhooks.recommendations = (!raw.is_empty()).then_some(raw),
                "ENTROPY_LOG" => self.log.level = raw,
                _ => unreachable!("listed in ENV_VARS"),
            }
        }
        Ok(())
    }

    pub fn check(&self) -> Result<(), ConfigError> {
        if self.server.token.is_empty() {
            return Err(ConfigError::Invalid("server.token must not be empty".into()));
        }
        if self.server.vocabulary_version != VOCABULARY_VERSION {
            return Err(ConfigError::Invalid(format!(
                "vocabulary version {} is not supported (this build ships {VOCABULARY_VERSION})",
                self.server.vocabulary_version
            )));
        }
        if !self.clock.tick_interval.is_positive() || !self.storage.flush_window.is_positive() {
            return Err(ConfigError::Invalid("tick_interval and flush_window must be positive".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        if !self.recommender.gamer_type_precedence.iter().all(|g| seen.insert(*g)) {
            return Err(ConfigError::Invalid("gamer_type_precedence lists a type twice".into()));
        }
        Ok(())
    }

    pub fn platform_config(&self) -> PlatformConfig {
        let mut p = PlatformConfig {
            data_dir: self.storage.data_dir.clone(),
            clock: self.clock.mode,
            auto_advance: self.clock.auto_advance,
            recommendation_webhook: self.webhooks.recommendations.clone(),
            idempotency_capacity: self.server.idempotency_capacity,
            ..PlatformConfig::default()
        };
        if let Some(start) = self.clock.start {
            p.sim_start = start;
        } else if self.clock.mode == ClockMode::Simulated {
            p.sim_start = entropy_core::Clock::now(&entropy_core::SystemClock);
        }
        p.store.flush_window = self.storage.flush_window.to_std();
        let r = &self.recommender;
        p.recommender.precedence = r.gamer_type_precedence.clone();
        p.recommender.validation_window = r.validation_window;
        p.recommender.relative_drop = r.relative_drop;
        p.recommender.message_expiry = r.message_expiry;
        p.recommender.evidence_threshold = r.evidence_threshold;
        p
    }
}
