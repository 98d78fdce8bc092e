//! HTTP `/v1` JSON surface of the ENTROPY platform.

pub mod api;
pub mod config;
pub mod error;

use std::sync::Arc;
use std::time::Duration;

use entropy_core::platform::{OutboundMessage, Platform};
use tokio::net::TcpListener;

pub use api::{router, AppState};
pub use config::ServerConfig;
pub use error::ApiError;

const WEBHOOK_ATTEMPTS: u32 = 3;

/// Opens the platform described by `config`.
pub fn build_state(config: &ServerConfig) -> anyhow::Result<AppState> {
    let platform = Platform::open(config.platform_config())?;
    Ok(AppState { platform: Arc::new(platform), token: config.server.token.as_str().into() })
}

/// Drives stream ticks from the system clock. Simulated deployments move
/// time through ingestion and `POST /v1/admin/clock` instead.
pub fn spawn_ticker(platform: Arc<Platform>, every: Duration) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let mut interval = tokio::time::interval(every);
        interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
        loop {
            interval.tick().await;
            let p = platform.clone();
            let report = tokio::task::spawn_blocking(move || p.advance_to(p.now())).await;
            if let Ok(r) = report {
                if !r.recommendations.is_empty() {
                    tracing::info!(count = r.recommendations.len(), "recommendations delivered");
                }
            }
        }
    })
}

async fn deliver(client: &reqwest::Client, msg: &OutboundMessage) -> bool {
    let mut backoff = Duration::from_millis(200);
    for attempt in 1..=WEBHOOK_ATTEMPTS {
        match client.post(&msg.url).json(&msg.body).send().await {
            Ok(r) if r.status().is_success() => return true,
            Ok(r) => tracing::warn!(url = %msg.url, status = %r.status(), attempt, "webhook rejected"),
            Err(e) => tracing::warn!(url = %msg.url, error = %e, attempt, "webhook unreachable"),
        }
        if attempt < WEBHOOK_ATTEMPTS {
            tokio::time::sleep(backoff).await;
            backoff *= 2;
        }
    }
    false
}

/// Pushes queued notifications and recommendations to their webhooks.
pub fn spawn_webhook_delivery(platform: Arc<Platform>, every: Duration) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let client = reqwest::Client::builder().timeout(Duration::from_secs(5)).build().expect("http client");
        let mut interval = tokio::time::interval(every);
        loop {
            interval.tick().await;
            for msg in platform.drain_outbox() {
                if !deliver(&client, &msg).await {
                    tracing::error!(url = %msg.url, "webhook message dropped after retries");
                }
            }
        }
    })
}

/// Serves until ctrl-c, then flushes the measurement log.
pub async fn serve(config: ServerConfig) -> anyhow::Result<()> {
    let state = build_state(&config)?;
    let platform = state.platform.clone();
    if !platform.is_simulated() {
        spawn_ticker(platform.clone(), config.clock.tick_interval.to_std());
    }
    spawn_webhook_delivery(platform.clone(), Duration::from_millis(500));
    let listener = TcpListener::bind(config.server.bind).await?;
    tracing::info!(addr = %listener.local_addr()?, simulated = platform.is_simulated(), "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    platform.flush()?;
    tracing::info!("stopped");
    Ok(())
}
