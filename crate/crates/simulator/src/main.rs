use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use entropy_simulator::{generate, read_spec, replay, Bundle, ReplayOptions, SimError, Speed};
use serde_json::json;

#[derive(Parser)]
#[command(name = "simulate", version, about = "Generate and replay synthetic sensor fleets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a trace bundle for a scenario spec.
    Generate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Post a bundle to a running platform.
    Replay {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, default_value = "http://127.0.0.1:8080")]
        url: String,
        /// `max` or a positive time-compression factor.
        #[arg(long, default_value = "max")]
        speed: Speed,
        #[arg(long, env = "ENTROPY_TOKEN", default_value = "change-me")]
        token: String,
        #[arg(long, default_value_t = 100)]
        batch_size: usize,
        #[arg(long, default_value_t = 8)]
        max_attempts: u32,
        /// Skip upserting entities and users.
        #[arg(long)]
        no_provision: bool,
        /// Answer delivered recommendations using the scenario's acceptance rates.
        #[arg(long)]
        respond: bool,
    },
}

fn fail(e: SimError) -> ExitCode {
    eprintln!("{}", json!({ "error": { "code": e.code(), "message": e.to_string() } }));
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Generate { spec, out } => {
            let bundle = match read_spec(&spec).and_then(|s| generate(&s)) {
                Ok(b) => b,
                Err(e) => return fail(e),
            };
            if let Err(e) = bundle.write(&out) {
                return fail(e);
            }
            let gt = &bundle.ground_truth;
            let summary = json!({
                "out": out,
                "events": gt.total_events,
                "outliers": gt.outliers.len(),
                "crossings": gt.crossings.len(),
                "expected_firings": gt.expected_firings.len(),
                "digest": bundle.digest(),
            });
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            ExitCode::SUCCESS
        }
        Command::Replay { bundle, url, speed, token, batch_size, max_attempts, no_provision, respond } => {
            if batch_size == 0 {
                return fail(SimError::InvalidSpec("batch size must be positive".into()));
            }
            let bundle = match Bundle::read(&bundle) {
                Ok(b) => b,
                Err(e) => return fail(e),
            };
            let mut opts = ReplayOptions::new(&url, &token);
            opts.speed = speed;
            opts.batch_size = batch_size;
            opts.max_attempts = max_attempts;
            opts.provision = !no_provision;
            opts.respond = respond;
            let report = replay(&bundle, &opts);
            let mut summary = serde_json::to_value(&report).expect("report serializes");
            summary.as_object_mut().expect("object").remove("batch_log");
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            ExitCode::from(report.exit_code() as u8)
        }
    }
}
