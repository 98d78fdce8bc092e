use std::path::PathBuf;

use clap::Parser;
use entropy_server::ServerConfig;

/// ENTROPY platform HTTP server.
#[derive(Parser)]
#[command(version, about)]
struct Args {
    /// TOML configuration file; `ENTROPY_*` variables override it.
    #[arg(long, short, env = "ENTROPY_CONFIG")]
    config: Option<PathBuf>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    print_config: bool,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    let config = ServerConfig::load(args.config.as_deref(), |k| std::env::var(k).ok())?;
    if args.print_config {
        print!("{}", toml::to_string(&config)?);
        return Ok(());
    }
    tracing_subscriber::fmt()
        .json()
        .with_env_filter(tracing_subscriber::EnvFilter::try_new(&config.log.level)?)
        .with_current_span(false)
        .init();
    entropy_server::serve(config).await
}
