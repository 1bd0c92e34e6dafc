//! HTTP endpoint for the reader study.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use tokio::sync::Mutex;

use crate::error::{Error, Result};
use crate::stats::turing::{accept_submission, append_responses, StudyConfig, Submission};

const PLACEHOLDER_INDEX: &str = "<!doctype html><title>reader study</title>\
<p>No client assets configured. The study is served at <code>/study</code>.</p>";

pub struct ServerState {
    pub study: StudyConfig,
    pub responses: PathBuf,
    /// Directory holding the built browser client.
    pub assets: Option<PathBuf>,
    write_lock: Mutex<()>,
}

impl ServerState {
    pub fn new(study: StudyConfig, responses: PathBuf, assets: Option<PathBuf>) -> Result<Self> {
        study.validate()?;
        for (id, p) in &study.volumes {
            if !p.is_file() {
                return Err(Error::Validation(format!("volume {id}: {} does not exist", p.display())));
            }
        }
        Ok(ServerState {
            study,
            responses,
            assets,
            write_lock: Mutex::new(()),
        })
    }
}

pub fn router(state: Arc<ServerState>) -> Router {
    Router::new()
        .route("/", get(index))
        .route("/assets/*file", get(asset))
        .route("/study", get(study))
        .route("/volumes/:id", get(volume))
        .route("/responses", post(responses))
        .with_state(state)
}

fn reject(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, msg.into()).into_response()
}

async fn index(State(s): State<Arc<ServerState>>) -> Response {
    if let Some(dir) = &s.assets {
        if let Ok(text) = tokio::fs::read_to_string(dir.join("index.html")).await {
            return Html(text).into_response();
        }
    }
    Html(PLACEHOLDER_INDEX).into_response()
}

async fn asset(State(s): State<Arc<ServerState>>, Path(file): Path<String>) -> Response {
    let Some(dir) = &s.assets else {
        return reject(StatusCode::NOT_FOUND, "no assets configured");
    };
    if file.split('/').any(|c| c == ".." || c.is_empty()) {
        return reject(StatusCode::BAD_REQUEST, "bad asset path");
    }
    match tokio::fs::read(dir.join(&file)).await {
        Ok(bytes) => {
            let mime = match file.rsplit('.').next() {
                Some("js") => "text/javascript",
                Some("css") => "text/css",
                Some("html") => "text/html",
                Some("json") => "application/json",
                _ => "application/octet-stream",
            };
            ([(header::CONTENT_TYPE, mime)], bytes).into_response()
        }
        Err(_) => reject(StatusCode::NOT_FOUND, "no such asset"),
    }
}

async fn study(State(s): State<Arc<ServerState>>) -> Response {
    Json(s.study.client_view()).into_response()
}

async fn volume(State(s): State<Arc<ServerState>>, Path(id): Path<String>) -> Response {
    let Some(path) = s.study.volumes.get(&id) else {
        return reject(StatusCode::NOT_FOUND, format!("unknown volume {id}"));
    };
    match tokio::fs::read(path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response(),
        Err(e) => reject(StatusCode::INTERNAL_SERVER_ERROR, format!("cannot read volume {id}: {e}")),
    }
}

async fn responses(State(s): State<Arc<ServerState>>, body: Bytes) -> Response {
    let sub: Submission = match serde_json::from_slice(&body) {
        Ok(v) => v,
        Err(e) => return reject(StatusCode::BAD_REQUEST, format!("malformed body: {e}")),
    };
    let now = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true);
    let row = match accept_submission(&s.study, &sub, &now) {
        Ok(r) => r,
        Err(e) => return reject(StatusCode::BAD_REQUEST, e.to_string()),
    };
    let _guard = s.write_lock.lock().await;
    let path = s.responses.clone();
    let written = tokio::task::spawn_blocking(move || append_responses(&path, &[row])).await;
    match written {
        Ok(Ok(())) => StatusCode::NO_CONTENT.into_response(),
        Ok(Err(e)) => reject(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => reject(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(state: Arc<ServerState>, addr: SocketAddr) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::Configuration(format!("cannot listen on {addr}: {e}")))?;
    log::info!("reader study listening on {addr}");
    axum::serve(listener, router(state)).await.map_err(Error::Io)
}
