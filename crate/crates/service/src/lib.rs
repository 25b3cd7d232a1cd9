//! HTTP service and command line front end for the `metacq-core` engine.

pub mod api;
pub mod app;
pub mod cli;
pub mod config;

use std::future::Future;
use std::sync::Arc;
use std::time::Duration;

pub use api::router;
pub use app::App;
pub use config::ServiceConfig;

/// Serves `app` on `listener` until `shutdown` resolves. Idle sessions are
/// swept in the background.
pub async fn serve_on(
    listener: tokio::net::TcpListener,
    app: Arc<App>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let period = Duration::from_secs(app.config.session_ttl_secs.clamp(1, 60));
    let sweeper = {
        let app = app.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(period);
            loop {
                tick.tick().await;
                let dropped = app.sweep(app::now_ms());
                if dropped > 0 {
                    tracing::debug!(dropped, "swept idle sessions");
                }
            }
        })
    };
    let result = axum::serve(listener, router(app))
        .with_graceful_shutdown(shutdown)
        .await;
    sweeper.abort();
    let _ = sweeper.await;
    result
}

pub async fn serve(config: ServiceConfig) -> anyhow::Result<()> {
    let key = cli::key_from_env(&config.digest_key_env)?;
    let listen = config.listen.clone();
    let app = App::new(config, key)?;
    let listener = tokio::net::TcpListener::bind(&listen).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    serve_on(listener, app, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await?;
    Ok(())
}
