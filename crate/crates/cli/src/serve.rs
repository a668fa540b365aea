use std::net::SocketAddr;
use std::sync::Arc;

use led_serve::{ServeConfig, Service};

use crate::config::PipelineConfig;
use crate::error::{CliError, Result};

/// Loads the index stage's artifacts (or `serve.dir`) and serves them until
/// interrupted.
pub fn run(cfg: &PipelineConfig) -> Result<()> {
    let dir = cfg.serve.dir.clone().unwrap_or_else(|| cfg.paths.workdir.join("index"));
    let addr: SocketAddr = format!("{}:{}", cfg.serve.host, cfg.serve.port)
        .parse()
        .map_err(|e| CliError::Config(format!("serve.host/serve.port: {e}")))?;
    let svc = Arc::new(Service::new(ServeConfig { max_ef: cfg.serve.max_ef, ef_search: Some(cfg.ann.ef_search) }));
    if !dir.is_dir() {
        return Err(CliError::MissingArtifact { path: dir, stage: "index" });
    }
    let version = svc.reload(&dir)?;
    tracing::info!(dir = %dir.display(), version, "loaded serving state");
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::io("tokio runtime", e))?;
    rt.block_on(led_serve::http::serve(
        svc,
        addr,
        |bound| tracing::info!(%bound, "serving"),
        async {
            let _ = tokio::signal::ctrl_c().await;
            tracing::info!("shutting down");
        },
    ))
    .map_err(|e| CliError::io(addr.to_string(), e))
}
