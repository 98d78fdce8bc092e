use std::collections::{BTreeMap, BTreeSet};
use std::net::TcpListener;
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use entropy_core::timeseries::Measurement;
use entropy_core::Timestamp;
use entropy_simulator::{generate, replay, ReplayOptions, Speed};
use reqwest::blocking::Client;

use crate::outliers::fleet;
use crate::Verdict;

const TOKEN: &str = "acceptance";
const FLUSH_WINDOW_MS: i64 = 1000;
const BATCH: usize = 50;
const REPLAY_SECS: f64 = 6.0;
const KILL_AFTER: Duration = Duration::from_millis(2500);

fn now_ms() -> i64 {
    SystemTime::now().duration_since(UNIX_EPOCH).expect("clock after epoch").as_millis() as i64
}

fn spawn(port: u16, dir: &Path, start: Timestamp) -> std::io::Result<Child> {
    Command::new(env!("CARGO_BIN_EXE_entropy-server"))
        .env("ENTROPY_BIND", format!("127.0.0.1:{port}"))
        .env("ENTROPY_TOKEN", TOKEN)
        .env("ENTROPY_DATA_DIR", dir)
        .env("ENTROPY_CLOCK", "simulated")
        .env("ENTROPY_SIM_START", start.to_string())
        .env("ENTROPY_FLUSH_WINDOW", "1s")
        .env("ENTROPY_LOG", "warn")
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
}

fn wait_healthy(client: &Client, base: &str) -> bool {
    let deadline = Instant::now() + Duration::from_secs(20);
    while Instant::now() < deadline {
        if client.get(format!("{base}/health")).send().is_ok_and(|r| r.status().is_success()) {
            return true;
        }
        thread::sleep(Duration::from_millis(50));
    }
    false
}

pub fn criterion() -> Verdict {
    match run() {
        Ok(v) => v,
        Err(e) => Verdict::fail(e),
    }
}

fn run() -> Result<Verdict, String> {
    let spec = fleet(77, 0.01, "1day");
    let bundle = generate(&spec).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let port = TcpListener::bind("127.0.0.1:0").and_then(|l| l.local_addr()).map_err(|e| e.to_string())?.port();
    let base = format!("http://127.0.0.1:{port}/v1");
    let client = Client::builder().timeout(Duration::from_secs(30)).build().map_err(|e| e.to_string())?;

    let mut server = spawn(port, dir.path(), spec.start).map_err(|e| format!("server did not start: {e}"))?;
    if !wait_healthy(&client, &base) {
        let _ = server.kill();
        return Err("server never became healthy".into());
    }
    let sim_span = (bundle.ground_truth.end - bundle.ground_truth.start).as_secs_f64();
    let mut opts = ReplayOptions::new(&base, TOKEN);
    opts.speed = Speed::Factor(sim_span / REPLAY_SECS);
    opts.batch_size = BATCH;
    opts.max_attempts = 40;
    opts.base_backoff = Duration::from_millis(50);
    opts.max_backoff = Duration::from_millis(500);
    let replaying = {
        let bundle = bundle.clone();
        thread::spawn(move || replay(&bundle, &opts))
    };

    thread::sleep(KILL_AFTER);
    let kill_ms = now_ms();
    server.kill().map_err(|e| e.to_string())?;
    let _ = server.wait();
    let mut server = spawn(port, dir.path(), spec.start).map_err(|e| format!("server did not restart: {e}"))?;
    let report = replaying.join().map_err(|_| "replay thread panicked".to_owned())?;
    let healthy = wait_healthy(&client, &base);

    let mut stored: BTreeMap<String, BTreeSet<Timestamp>> = BTreeMap::new();
    let mut fetch_errors = Vec::new();
    for label in bundle.ground_truth.counts.keys() {
        let (sensor, attr) = label.split_once('/').expect("label is sensor/attribute");
        let got = client
            .get(format!("{base}/series/raw?sensor_id={sensor}&attribute={attr}"))
            .bearer_auth(TOKEN)
            .send()
            .and_then(|r| r.error_for_status())
            .and_then(|r| r.json::<Vec<Measurement>>());
        match got {
            Ok(ms) => {
                let set = stored.entry(label.clone()).or_default();
                for m in ms {
                    if !set.insert(m.observed_at) {
                        fetch_errors.push(format!("{label} stores {} twice", m.observed_at));
                    }
                }
            }
            Err(e) => fetch_errors.push(format!("{label}: {e}")),
        }
    }
    let _ = server.kill();
    let _ = server.wait();

    let batch_ack: BTreeMap<usize, i64> = report.batch_log.iter().map(|b| (b.index, b.acked_at_ms)).collect();
    let mut lost: BTreeMap<String, usize> = BTreeMap::new();
    let mut early_losses = Vec::new();
    let mut latest_ack_lost = i64::MIN;
    for (line, m) in bundle.trace.iter().enumerate() {
        let label = format!("{}/{}", m.sensor_id, m.attribute);
        if stored.get(&label).is_some_and(|s| s.contains(&m.observed_at)) {
            continue;
        }
        *lost.entry(label).or_default() += 1;
        match batch_ack.get(&(line / BATCH)) {
            Some(at) if (kill_ms - FLUSH_WINDOW_MS..=kill_ms).contains(at) => latest_ack_lost = latest_ack_lost.max(kill_ms - at),
            Some(at) => early_losses.push(format!("line {line} acked {}ms before the kill", kill_ms - at)),
            None => early_losses.push(format!("line {line} was never acknowledged")),
        }
    }
    let trace_keys: BTreeMap<String, BTreeSet<Timestamp>> = bundle.trace.iter().fold(BTreeMap::new(), |mut acc, m| {
        acc.entry(format!("{}/{}", m.sensor_id, m.attribute)).or_insert_with(BTreeSet::new).insert(m.observed_at);
        acc
    });
    let foreign: usize = stored.iter().map(|(l, s)| s.difference(trace_keys.get(l).unwrap_or(&BTreeSet::new())).count()).sum();
    let mut unreconciled = Vec::new();
    for (label, expected) in &bundle.ground_truth.counts {
        let kept = stored.get(label).map_or(0, BTreeSet::len);
        let missing = lost.get(label).copied().unwrap_or(0);
        let acked = report.per_sensor_acked.get(label).copied().unwrap_or(0);
        if kept + missing != *expected || acked != *expected {
            unreconciled.push(format!("{label}: {kept} stored + {missing} lost, {acked} acked, {expected} generated"));
        }
    }
    let retried = report.batch_log.iter().filter(|b| b.attempts > 1).count();
    let total_lost: usize = lost.values().sum();
    let pass = healthy && report.succeeded() && fetch_errors.is_empty() && foreign == 0 && early_losses.is_empty() && unreconciled.is_empty();
    let mut detail = format!(
        "{} events in {} batches, {retried} retried across the restart, {} stored after restart, {total_lost} lost{}; {} series reconciled against the replay report",
        bundle.trace.len(),
        report.batches,
        stored.values().map(BTreeSet::len).sum::<usize>(),
        if total_lost > 0 { format!(" (oldest lost ack {latest_ack_lost}ms before the kill, window {FLUSH_WINDOW_MS}ms)") } else { String::new() },
        bundle.ground_truth.counts.len() - unreconciled.len(),
    );
    if !report.succeeded() {
        detail.push_str(&format!("; replay failed: {:?}", report.failure));
    }
    for problem in [fetch_errors.first(), early_losses.first(), unreconciled.first()].into_iter().flatten() {
        detail.push_str(&format!("; {problem}"));
    }
    if foreign > 0 {
        detail.push_str(&format!("; {foreign} stored samples not in the trace"));
    }
    if !healthy {
        detail.push_str("; restarted server never became healthy");
    }
    Ok(Verdict::check(pass, detail))
}
