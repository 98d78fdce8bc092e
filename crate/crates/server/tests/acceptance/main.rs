//! Acceptance suite. Prints one line per criterion and exits non-zero when
//! any of them fails.

mod aggregation;
mod clustering;
mod co2;
mod composites;
mod documents;
mod durability;
mod outliers;
mod reasoner;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use entropy_core::fusion::JsonLdDocument;

pub struct Verdict {
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    pub fn check(pass: bool, detail: impl Into<String>) -> Self {
        Verdict { pass, detail: detail.into() }
    }

    pub fn fail(detail: impl Into<String>) -> Self {
        Self::check(false, detail)
    }
}

fn run(f: impl FnOnce() -> Verdict) -> Verdict {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(v) => v,
        Err(e) => {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default();
            Verdict::fail(format!("panicked: {msg}"))
        }
    }
}

type Criterion = Box<dyn FnOnce(&mut Vec<JsonLdDocument>, &mut Vec<String>) -> Verdict>;

fn main() -> ExitCode {
    let mut docs: Vec<JsonLdDocument> = Vec::new();
    let mut sources = Vec::new();
    let criteria: Vec<(&str, Criterion)> = vec![
        ("outlier oracle equivalence", Box::new(|d, s| tagged(d, s, "outliers", outliers::criterion))),
        ("aggregation consistency", Box::new(|_, _| aggregation::criterion())),
        ("co2 scenario end to end", Box::new(|d, s| tagged(d, s, "co2 scenario", co2::criterion))),
        ("reasoner membership", Box::new(|d, s| tagged(d, s, "reasoner", reasoner::criterion))),
        ("json-ld round trip and vocabulary closure", Box::new(|d, s| documents::criterion(d, s))),
        ("k-means brute-force equivalence", Box::new(|_, _| clustering::criterion())),
        ("composite quiescence", Box::new(|_, _| composites::criterion())),
        ("durability across kill and restart", Box::new(|_, _| durability::criterion())),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.into_iter().enumerate() {
        let started = Instant::now();
        let v = run(|| f(&mut docs, &mut sources));
        if !v.pass {
            failed += 1;
        }
        println!(
            "criterion {}: {} {name} ({:.1}s): {}",
            i + 1,
            if v.pass { "PASS" } else { "FAIL" },
            started.elapsed().as_secs_f64(),
            v.detail
        );
    }
    println!("acceptance: {} of 8 criteria passed", 8 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

/// Runs a criterion that emits documents and remembers where they came from.
fn tagged(
    docs: &mut Vec<JsonLdDocument>,
    sources: &mut Vec<String>,
    label: &str,
    f: fn(&mut Vec<JsonLdDocument>) -> Verdict,
) -> Verdict {
    let before = docs.len();
    let v = f(docs);
    sources.push(format!("{} from {label}", docs.len() - before));
    v
}
