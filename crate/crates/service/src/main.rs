use std::collections::HashMap;
use std::process::ExitCode;

use dragedit_service::{router, AppState, ServiceConfig};

/// Usage: `dragedit-service [config.toml]`. `DRAGEDIT_CONFIG` also names the
/// file; `DRAGEDIT_*` variables override its keys.
#[tokio::main]
async fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let path = std::env::args().nth(1).or_else(|| std::env::var("DRAGEDIT_CONFIG").ok());
    let env: HashMap<String, String> = std::env::vars().collect();
    let config = match path {
        Some(p) => std::fs::read_to_string(&p)
            .map_err(dragedit_core::Error::from)
            .and_then(|t| ServiceConfig::from_toml(&t)),
        None => Ok(ServiceConfig::default()),
    }
    .and_then(|c| c.with_env(&env));
    let config = match config {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let addr = format!("{}:{}", config.bind, config.port);
    let state = match AppState::start(config) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    let listener = match tokio::net::TcpListener::bind(&addr).await {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: cannot bind {addr}: {e}");
            return ExitCode::FAILURE;
        }
    };
    log::info!("listening on {addr}");
    let shutdown = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    if let Err(e) = axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await {
        eprintln!("error: {e}");
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}
