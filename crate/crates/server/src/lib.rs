//! The dabih HTTP API server.
//!
//! [`Dabih`] implements the operations; [`routes::router`] exposes them under
//! `/api/v1`; [`RunningServer`] runs both on a background thread, which is
//! what the integration tests and the CLI test-suite use.

pub mod auth;
pub mod config;
pub mod db;
pub mod error;
pub mod routes;
pub mod service;

use std::future::Future;
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

pub use config::ServerConfig;
pub use error::{ServiceError, ServiceResult};
pub use service::Dabih;

/// Serves `service` on `listener` until `shutdown` resolves.
pub async fn serve(
    service: Arc<Dabih>,
    listener: tokio::net::TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let idle = service.config().upload_idle_timeout();
    let sweeper = {
        let service = Arc::clone(&service);
        let period = (idle / 4).clamp(Duration::from_secs(1), Duration::from_secs(60));
        tokio::spawn(async move {
            let mut ticker = tokio::time::interval(period);
            loop {
                ticker.tick().await;
                let s = Arc::clone(&service);
                match tokio::task::spawn_blocking(move || s.evict_idle(idle)).await {
                    Ok(Ok(evicted)) if !evicted.is_empty() => {
                        tracing::info!(?evicted, "evicted idle upload sessions")
                    }
                    Ok(Err(e)) => tracing::warn!(error = %e, "evicting idle uploads failed"),
                    _ => {}
                }
            }
        })
    };
    let result = axum::serve(listener, routes::router(service))
        .with_graceful_shutdown(shutdown)
        .await;
    sweeper.abort();
    result
}

#[derive(Debug, thiserror::Error)]
pub enum StartError {
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error("binding listener: {0}")]
    Io(#[from] std::io::Error),
}

/// A server running on its own thread and runtime. Stops on drop.
pub struct RunningServer {
    addr: SocketAddr,
    service: Arc<Dabih>,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<JoinHandle<std::io::Result<()>>>,
}

impl RunningServer {
    pub fn start(config: ServerConfig) -> Result<Self, StartError> {
        let listener = std::net::TcpListener::bind(config.listen)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let service = Arc::new(Dabih::open(config)?);
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let svc = Arc::clone(&service);
        let thread = std::thread::Builder::new()
            .name("dabih-server".into())
            .spawn(move || {
                let runtime = tokio::runtime::Builder::new_multi_thread()
                    .worker_threads(2)
                    .enable_all()
                    .build()?;
                runtime.block_on(async move {
                    let listener = tokio::net::TcpListener::from_std(listener)?;
                    serve(svc, listener, async {
                        let _ = rx.await;
                    })
                    .await
                })
            })?;
        Ok(Self {
            addr,
            service,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Base URL without the API prefix, e.g. `http://127.0.0.1:41234`.
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn service(&self) -> &Arc<Dabih> {
        &self.service
    }

    /// Stops accepting requests and waits for the server thread.
    pub fn stop(mut self) -> std::io::Result<()> {
        self.shutdown_inner()
    }

    fn shutdown_inner(&mut self) -> std::io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t
                .join()
                .unwrap_or_else(|_| Err(std::io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for RunningServer {
    fn drop(&mut self) {
        let _ = self.shutdown_inner();
    }
}
