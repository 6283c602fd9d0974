//! Read-only HTTP render service.
//!
//! * `GET /info` — model and dataset summary as JSON.
//! * `POST /render` — JSON [`RenderRequest`]; one output comes back as
//!   `image/png`, several as `multipart/mixed` with one PNG part each.
//!
//! Both answer 503 until the checkpoint has loaded. Malformed requests get
//! 400 with a JSON `{"error": ...}` body.

use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use axum::body::{Body, Bytes};
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use log::{error, info};
use tokio::sync::Semaphore;

use crate::avatar::{Avatar, OutputKind, RenderError, RenderRequest};

pub const MULTIPART_BOUNDARY: &str = "dynfield-render-part";

pub struct ServiceState {
    avatar: OnceLock<Arc<Avatar>>,
    /// Bounds concurrent renders; waiting requests queue on the semaphore.
    permits: Semaphore,
}

impl ServiceState {
    pub fn loading(max_concurrent: usize) -> Arc<Self> {
        Arc::new(Self {
            avatar: OnceLock::new(),
            permits: Semaphore::new(max_concurrent.max(1)),
        })
    }

    pub fn ready(avatar: Avatar, max_concurrent: usize) -> Arc<Self> {
        let state = Self::loading(max_concurrent);
        state.set_avatar(avatar);
        state
    }

    pub fn set_avatar(&self, avatar: Avatar) {
        if self.avatar.set(Arc::new(avatar)).is_err() {
            error!("service avatar set twice; keeping the first");
        }
    }

    fn avatar(&self) -> Option<Arc<Avatar>> {
        self.avatar.get().cloned()
    }
}

fn error_response(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(serde_json::json!({ "error": message.into() }))).into_response()
}

fn unavailable() -> Response {
    error_response(StatusCode::SERVICE_UNAVAILABLE, "checkpoint is still loading")
}

async fn info_handler(State(state): State<Arc<ServiceState>>) -> Response {
    match state.avatar() {
        Some(avatar) => Json(avatar.info()).into_response(),
        None => unavailable(),
    }
}

/// Joins PNG parts into a `multipart/mixed` body.
pub fn multipart_body(parts: &[(OutputKind, Vec<u8>)]) -> Vec<u8> {
    let mut body = Vec::new();
    for (kind, bytes) in parts {
        body.extend_from_slice(
            format!(
                "--{MULTIPART_BOUNDARY}\r\nContent-Type: image/png\r\nContent-Disposition: inline; name=\"{}\"\r\n\r\n",
                kind.name()
            )
            .as_bytes(),
        );
        body.extend_from_slice(bytes);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{MULTIPART_BOUNDARY}--\r\n").as_bytes());
    body
}

async fn render_handler(State(state): State<Arc<ServiceState>>, body: Bytes) -> Response {
    let Some(avatar) = state.avatar() else {
        return unavailable();
    };
    let request: RenderRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, format!("malformed request: {e}")),
    };
    let Ok(_permit) = state.permits.acquire().await else {
        return unavailable();
    };
    let rendered = tokio::task::spawn_blocking(move || avatar.render(&request)).await;
    match rendered {
        Ok(Ok(parts)) if parts.len() == 1 => {
            let (_, bytes) = parts.into_iter().next().expect("one part");
            ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
        }
        Ok(Ok(parts)) => (
            [(
                header::CONTENT_TYPE,
                format!("multipart/mixed; boundary={MULTIPART_BOUNDARY}"),
            )],
            Body::from(multipart_body(&parts)),
        )
            .into_response(),
        Ok(Err(RenderError::Invalid(msg))) => error_response(StatusCode::BAD_REQUEST, msg),
        Ok(Err(RenderError::Engine(e))) => error_response(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, format!("render task failed: {e}")),
    }
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/info", get(info_handler))
        .route("/render", post(render_handler))
        .with_state(state)
}

/// Binds, starts loading the checkpoint in the background, and serves until
/// the process ends. Requests arriving before the load finishes get 503.
pub async fn serve(bind: &str, checkpoint: PathBuf, data: PathBuf, max_concurrent: usize) -> anyhow::Result<()> {
    let state = ServiceState::loading(max_concurrent);
    let listener = tokio::net::TcpListener::bind(bind).await?;
    info!("listening on {}", listener.local_addr()?);
    let loader = state.clone();
    let load = tokio::task::spawn_blocking(move || -> dynfield::Result<()> {
        let avatar = Avatar::load(&checkpoint, &data)?;
        info!("checkpoint loaded ({} frames)", avatar.dataset.frames.len());
        loader.set_avatar(avatar);
        Ok(())
    });
    let server = tokio::spawn(async move { axum::serve(listener, router(state)).await });
    // a failed load ends the process; a successful one keeps serving
    load.await??;
    server.await??;
    Ok(())
}
