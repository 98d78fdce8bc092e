//! Synthetic sensor fleets for the ENTROPY platform: deterministic traces
//! with ground-truth outlier labels and expected threshold firings, and a
//! replay driver that posts them to `/v1/ingest`.

pub mod generate;
pub mod model;
pub mod replay;
pub mod spec;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use entropy_core::timeseries::Measurement;
use sha2::{Digest, Sha256};

pub use generate::{generate, Bundle, GroundTruth, Provision};
pub use replay::{replay, ReplayOptions, ReplayReport};
pub use spec::{ScenarioSpec, Speed};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("invalid bundle: {0}")]
    InvalidBundle(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SimError {
    pub fn code(&self) -> &'static str {
        match self {
            SimError::InvalidSpec(_) => "invalid-spec",
            SimError::InvalidBundle(_) => "invalid-bundle",
            SimError::Io(_) => "io-error",
        }
    }
}

pub const SPEC_FILE: &str = "spec.json";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";
pub const PROVISION_FILE: &str = "provision.json";

pub fn read_spec(path: &Path) -> Result<ScenarioSpec, SimError> {
    let text = fs::read_to_string(path)?;
    let spec: ScenarioSpec = serde_json::from_str(&text).map_err(|e| SimError::InvalidSpec(e.to_string()))?;
    spec.validate()?;
    Ok(spec)
}

fn pretty<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("bundle parts serialize");
    s.push('\n');
    s
}

impl Bundle {
    pub fn trace_jsonl(&self) -> String {
        let mut out = String::new();
        for m in &self.trace {
            out.push_str(&serde_json::to_string(m).expect("measurement serializes"));
            out.push('\n');
        }
        out
    }

    /// SHA-256 of the trace file, hex.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.trace_jsonl().as_bytes()))
    }

    pub fn write(&self, dir: &Path) -> Result<(), SimError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(SPEC_FILE), pretty(&self.spec))?;
        fs::write(dir.join(GROUND_TRUTH_FILE), pretty(&self.ground_truth))?;
        fs::write(dir.join(PROVISION_FILE), pretty(&self.provision))?;
        let mut f = fs::File::create(dir.join(TRACE_FILE))?;
        f.write_all(self.trace_jsonl().as_bytes())?;
        f.sync_all()?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self, SimError> {
        let load = |name: &str| -> Result<String, SimError> {
            fs::read_to_string(dir.join(name)).map_err(|e| SimError::InvalidBundle(format!("{name}: {e}")))
        };
        let parse_err = |name: &str, e: serde_json::Error| SimError::InvalidBundle(format!("{name}: {e}"));
        let spec: ScenarioSpec = serde_json::from_str(&load(SPEC_FILE)?).map_err(|e| parse_err(SPEC_FILE, e))?;
        let ground_truth: GroundTruth = serde_json::from_str(&load(GROUND_TRUTH_FILE)?).map_err(|e| parse_err(GROUND_TRUTH_FILE, e))?;
        let provision: Provision = serde_json::from_str(&load(PROVISION_FILE)?).map_err(|e| parse_err(PROVISION_FILE, e))?;
        let file = fs::File::open(dir.join(TRACE_FILE)).map_err(|e| SimError::InvalidBundle(format!("{TRACE_FILE}: {e}")))?;
        let mut trace = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let m: Measurement = serde_json::from_str(&line).map_err(|e| SimError::InvalidBundle(format!("{TRACE_FILE}:{}: {e}", i + 1)))?;
            trace.push(m);
        }
        if trace.len() != ground_truth.total_events {
            return Err(SimError::InvalidBundle(format!(
                "trace holds {} events, ground truth expects {}",
                trace.len(),
                ground_truth.total_events
            )));
        }
        if trace.windows(2).any(|w| w[1].observed_at < w[0].observed_at) {
            return Err(SimError::InvalidBundle("trace is not in timestamp order".into()));
        }
        Ok(Bundle { spec, trace, ground_truth, provision })
    }
}
