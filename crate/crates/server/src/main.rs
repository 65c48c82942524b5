use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::Parser;
use dabih_server::{serve, Dabih, ServerConfig};
use tracing_subscriber::EnvFilter;

/// dabih storage server.
#[derive(Parser)]
#[command(version)]
struct Args {
    /// TOML configuration file. DABIH_* environment variables override it.
    #[arg(short, long, env = "DABIH_CONFIG")]
    config: Option<PathBuf>,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .init();
    let args = Args::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            tracing::error!("{e}");
            ExitCode::FAILURE
        }
    }
}

fn run(args: Args) -> Result<(), Box<dyn std::error::Error>> {
    let config = ServerConfig::load(args.config.as_deref())?;
    let listen = config.listen;
    let service = Arc::new(Dabih::open(config)?);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(listen).await?;
        tracing::info!("listening on {}", listener.local_addr()?);
        serve(service, listener, async {
            let _ = tokio::signal::ctrl_c().await;
            tracing::info!("shutting down");
        })
        .await
    })?;
    Ok(())
}
