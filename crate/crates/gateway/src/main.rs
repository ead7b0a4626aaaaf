use std::path::PathBuf;

use anyhow::Context;
use clap::Parser;
use leisa_gateway::{serve, Gateway, GatewayConfig};

#[derive(Debug, Parser)]
#[command(name = "leisa-gateway", version, about = "HTTP gateway for the livestock event broker")]
struct Args {
    /// TOML configuration file. `LEISA_*` environment variables override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_env("LEISA_LOG").unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let args = Args::parse();
    let config = GatewayConfig::load(args.config.as_deref())?;
    let gw = tokio::task::spawn_blocking(move || Gateway::open(&config).map(|gw| (gw, config))).await??;
    let (gw, config) = gw;
    let listener =
        tokio::net::TcpListener::bind(config.listen).await.with_context(|| format!("binding {}", config.listen))?;
    // Printed on stdout so supervisors and tests can find an ephemeral port.
    println!("listening on {}", listener.local_addr()?);
    log::info!("storage at {}", config.storage_root.display());
    serve(listener, gw, shutdown_signal()).await?;
    Ok(())
}
