//! Posts a bundle to a running platform in timestamp order.

use std::collections::{BTreeMap, BTreeSet};
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::generate::{series_label, Bundle};
use crate::spec::Speed;

#[derive(Clone, Debug)]
pub struct ReplayOptions {
    /// Base URL of the platform, with or without the `/v1` suffix.
    pub url: String,
    pub token: String,
    pub speed: Speed,
    pub batch_size: usize,
    /// Attempts per request before the run is reported as failed.
    pub max_attempts: u32,
    pub base_backoff: Duration,
    pub max_backoff: Duration,
    pub request_timeout: Duration,
    /// Upsert the bundle's entities and users first.
    pub provision: bool,
    /// Answer delivered recommendations on behalf of the scripted occupants.
    pub respond: bool,
}

impl ReplayOptions {
    pub fn new(url: &str, token: &str) -> Self {
        ReplayOptions {
            url: url.to_owned(),
            token: token.to_owned(),
            speed: Speed::Max,
            batch_size: 100,
            max_attempts: 8,
            base_backoff: Duration::from_millis(100),
            max_backoff: Duration::from_secs(2),
            request_timeout: Duration::from_secs(30),
            provision: true,
            respond: false,
        }
    }

    fn api(&self, path: &str) -> String {
        let base = self.url.trim_end_matches('/');
        let base = base.strip_suffix("/v1").unwrap_or(base);
        format!("{base}/v1{path}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub index: usize,
    /// Trace line of the first event.
    pub first: usize,
    pub len: usize,
    pub acked: usize,
    pub attempts: u32,
    /// Wall-clock time of the acknowledgement, Unix milliseconds.
    pub acked_at_ms: i64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub total: usize,
    pub sent: usize,
    /// Events the platform answered for without an item error.
    pub acked: usize,
    pub accepted: usize,
    pub dropped: usize,
    pub duplicates: usize,
    pub errors: usize,
    pub batches: usize,
    pub feedback_sent: usize,
    pub wall_time_s: f64,
    pub per_sensor_acked: BTreeMap<String, usize>,
    pub failure: Option<String>,
    pub batch_log: Vec<BatchRecord>,
}

impl ReplayReport {
    pub fn succeeded(&self) -> bool {
        self.failure.is_none() && self.acked == self.total
    }

    /// 0 when every event was acknowledged, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.succeeded() {
            0
        } else {
            1
        }
    }
}

#[derive(Deserialize)]
struct ItemReport {
    status: String,
}

#[derive(Deserialize)]
struct IngestReport {
    items: Vec<ItemReport>,
}

enum Failure {
    /// Connection failures and 5xx after the last attempt.
    Exhausted(String),
    /// 4xx: retrying cannot help.
    Rejected(StatusCode, String),
}

impl Failure {
    fn describe(self) -> String {
        match self {
            Failure::Exhausted(m) => format!("gave up after retries: {m}"),
            Failure::Rejected(s, m) => format!("rejected with {s}: {m}"),
        }
    }
}

struct Session<'a> {
    client: Client,
    opts: &'a ReplayOptions,
}

impl Session<'_> {
    fn send(&self, method: reqwest::Method, path: &str, body: Option<&Value>, key: Option<&str>) -> Result<(Value, u32), Failure> {
        let mut backoff = self.opts.base_backoff;
        let mut last = String::new();
        for attempt in 1..=self.opts.max_attempts.max(1) {
            let mut req = self.client.request(method.clone(), self.opts.api(path)).bearer_auth(&self.opts.token);
            if let Some(b) = body {
                req = req.json(b);
            }
            if let Some(k) = key {
                req = req.header("Idempotency-Key", k);
            }
            match req.send() {
                Ok(resp) if resp.status().is_success() => {
                    let v = resp.json::<Value>().unwrap_or(Value::Null);
                    return Ok((v, attempt));
                }
                Ok(resp) if resp.status().is_client_error() => {
                    let status = resp.status();
                    return Err(Failure::Rejected(status, resp.text().unwrap_or_default()));
                }
                Ok(resp) => last = format!("{} from {path}", resp.status()),
                Err(e) => last = e.to_string(),
            }
            tracing::debug!(path, attempt, error = %last, "retrying");
            if attempt < self.opts.max_attempts {
                thread::sleep(backoff);
                backoff = (backoff * 2).min(self.opts.max_backoff);
            }
        }
        Err(Failure::Exhausted(last))
    }

    fn post(&self, path: &str, body: &Value, key: Option<&str>) -> Result<(Value, u32), Failure> {
        self.send(reqwest::Method::POST, path, Some(body), key)
    }
}

fn now_ms() -> i64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as i64)
}

struct Responder {
    rng: ChaCha8Rng,
    answered: BTreeSet<String>,
}

impl Responder {
    fn run(&mut self, s: &Session<'_>, bundle: &Bundle, report: &mut ReplayReport) -> Result<(), Failure> {
        for user in &bundle.provision.users {
            let path = format!("/users/{}/recommendations?state=Delivered", user.user_id);
            let (recs, _) = s.send(reqwest::Method::GET, &path, None, None)?;
            let p = user.gamer_type.and_then(|g| bundle.spec.acceptance.get(&g).copied()).unwrap_or(0.5);
            for rec in recs.as_array().into_iter().flatten() {
                let Some(id) = rec.get("id").and_then(Value::as_str) else { continue };
                if !self.answered.insert(id.to_owned()) {
                    continue;
                }
                let response = if self.rng.random_bool(p) { "accept" } else { "reject" };
                s.post(&format!("/recommendations/{id}/feedback"), &json!({ "response": response }), None)?;
                report.feedback_sent += 1;
            }
        }
        Ok(())
    }
}

/// Replays `bundle`. A request that keeps failing ends the run; the report
/// then carries the failure and the totals reached so far.
pub fn replay(bundle: &Bundle, opts: &ReplayOptions) -> ReplayReport {
    let started = Instant::now();
    let mut report = ReplayReport { total: bundle.trace.len(), ..Default::default() };
    let client = match Client::builder().timeout(opts.request_timeout).build() {
        Ok(c) => c,
        Err(e) => {
            report.failure = Some(e.to_string());
            return report;
        }
    };
    let session = Session { client, opts };
    if let Err(f) = run(&session, bundle, opts, &mut report, started) {
        report.failure = Some(f.describe());
    }
    report.wall_time_s = started.elapsed().as_secs_f64();
    report
}

fn run(s: &Session<'_>, bundle: &Bundle, opts: &ReplayOptions, report: &mut ReplayReport, started: Instant) -> Result<(), Failure> {
    if opts.provision {
        for e in &bundle.provision.entities {
            s.post("/entities", &serde_json::to_value(e).expect("entity serializes"), None)?;
        }
        for u in &bundle.provision.users {
            s.post("/users", &serde_json::to_value(u).expect("profile serializes"), None)?;
        }
    }
    let digest = bundle.digest();
    let mut responder = Responder { rng: ChaCha8Rng::seed_from_u64(bundle.spec.seed ^ 0x5eed_feed), answered: BTreeSet::new() };
    let Some(first) = bundle.trace.first() else { return Ok(()) };
    let origin = first.observed_at;
    for (index, chunk) in bundle.trace.chunks(opts.batch_size.max(1)).enumerate() {
        if let Speed::Factor(f) = opts.speed {
            let due = Duration::from_secs_f64((chunk[0].observed_at - origin).as_secs_f64() / f);
            if let Some(wait) = due.checked_sub(started.elapsed()) {
                thread::sleep(wait);
            }
        }
        let first_line = index * opts.batch_size.max(1);
        report.sent += chunk.len();
        report.batches += 1;
        let key = format!("{}-{index}", &digest[..16]);
        let body = serde_json::to_value(chunk).expect("measurements serialize");
        let (resp, attempts) = s.post("/ingest", &body, Some(&key))?;
        let parsed: IngestReport = serde_json::from_value(resp).map_err(|e| Failure::Exhausted(format!("unreadable ingest report: {e}")))?;
        let mut acked = 0;
        for (item, m) in parsed.items.iter().zip(chunk) {
            match item.status.as_str() {
                "accepted" => report.accepted += 1,
                "dropped-as-outlier" => report.dropped += 1,
                "duplicate" => report.duplicates += 1,
                _ => {
                    report.errors += 1;
                    continue;
                }
            }
            acked += 1;
            *report.per_sensor_acked.entry(series_label(&m.sensor_id, &m.attribute)).or_insert(0) += 1;
        }
        report.acked += acked;
        report.batch_log.push(BatchRecord { index, first: first_line, len: chunk.len(), acked, attempts, acked_at_ms: now_ms() });
        if opts.respond {
            responder.run(s, bundle, report)?;
        }
    }
    Ok(())
}
