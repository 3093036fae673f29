//! HTTP API over [`SessionStore`]. Every JSON response is an envelope
//! `{"ok": true, "data": ...}` or `{"ok": false, "error": {...}}`.
//!
//! | method | path                               | body / result                  |
//! |--------|------------------------------------|--------------------------------|
//! | POST   | /sessions                          | `{"frames": [b64 PNG]}` or `{"frames_dir": path}` |
//! | GET    | /sessions                          | all sessions                   |
//! | GET    | /sessions/{id}                     | session metadata               |
//! | PUT    | /sessions/{id}/masks/{frame}       | PNG mask                       |
//! | GET    | /sessions/{id}/masks/{frame}.png   | PNG mask                       |
//! | POST   | /sessions/{id}/propagate           | 202, runs in the background    |
//! | POST   | /sessions/{id}/corrections/{frame} | 202, re-propagates from frame  |
//! | GET    | /sessions/{id}/status              | state and progress             |

use crate::error::ServiceError;
use crate::session::{SessionStore, StoreConfig};
use axum::body::Bytes;
use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use memflow_core::{io, Frame, Model};
use serde::Deserialize;
use serde_json::json;
use std::sync::Arc;

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<SessionStore>,
    pub model: Arc<Model>,
}

impl AppState {
    pub fn new(data_dir: &std::path::Path, model: Model, config: StoreConfig) -> memflow_core::Result<Self> {
        Ok(Self {
            store: Arc::new(SessionStore::open(data_dir, config)?),
            model: Arc::new(model),
        })
    }
}

type ApiResult = Result<Response, ServiceError>;

fn ok(status: StatusCode, data: impl serde::Serialize) -> ApiResult {
    Ok((status, Json(json!({ "ok": true, "data": data }))).into_response())
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/:id", get(get_session))
        .route("/sessions/:id/status", get(get_status))
        .route("/sessions/:id/masks/:frame", get(get_mask).put(put_mask))
        .route("/sessions/:id/propagate", post(start_propagation))
        .route("/sessions/:id/corrections/:frame", post(start_correction))
        .fallback(|| async { ServiceError::not_found("no such endpoint") })
        .layer(DefaultBodyLimit::max(512 * 1024 * 1024))
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateRequest {
    #[serde(default)]
    frames: Option<Vec<String>>,
    #[serde(default)]
    frames_dir: Option<String>,
}

async fn create_session(State(st): State<AppState>, body: Result<Json<CreateRequest>, JsonRejection>) -> ApiResult {
    let Json(req) = body.map_err(|e| ServiceError::bad_request(e.body_text()))?;
    let store = st.store.clone();
    let meta = tokio::task::spawn_blocking(move || {
        let frames = match (req.frames, req.frames_dir) {
            (Some(b64), None) => decode_frames(&b64)?,
            (None, Some(dir)) => io::read_frame_dir(std::path::Path::new(&dir)).map_err(|e| match e {
                memflow_core::Error::Input(msg) => ServiceError::unprocessable(msg),
                other => other.into(),
            })?,
            _ => return Err(ServiceError::bad_request("give exactly one of frames or frames_dir")),
        };
        store.create(frames)
    })
    .await
    .map_err(|e| ServiceError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    ok(StatusCode::CREATED, meta)
}

fn decode_frames(b64: &[String]) -> Result<Vec<Frame>, ServiceError> {
    let engine = base64::engine::general_purpose::STANDARD;
    b64.iter()
        .enumerate()
        .map(|(i, s)| {
            let bytes = engine
                .decode(s)
                .map_err(|e| ServiceError::unprocessable(format!("frame {i}: invalid base64: {e}")))?;
            io::decode_frame_png(&bytes)
                .map_err(|e| ServiceError::unprocessable(format!("frame {i}: {e}")))
        })
        .collect()
}

async fn list_sessions(State(st): State<AppState>) -> ApiResult {
    ok(StatusCode::OK, st.store.list())
}

async fn get_session(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult {
    ok(StatusCode::OK, st.store.get(&id)?.meta())
}

async fn get_status(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult {
    ok(StatusCode::OK, st.store.get(&id)?.status())
}

fn frame_index(raw: &str) -> Result<usize, ServiceError> {
    raw.strip_suffix(".png")
        .unwrap_or(raw)
        .parse()
        .map_err(|_| ServiceError::bad_request(format!("bad frame index {raw:?}")))
}

async fn put_mask(State(st): State<AppState>, Path((id, frame)): Path<(String, String)>, body: Bytes) -> ApiResult {
    let frame = frame_index(&frame)?;
    let session = st.store.get(&id)?;
    let meta = tokio::task::spawn_blocking(move || session.submit_mask(frame, &body))
        .await
        .map_err(|e| ServiceError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    ok(StatusCode::OK, meta)
}

async fn get_mask(State(st): State<AppState>, Path((id, frame)): Path<(String, String)>) -> ApiResult {
    let frame = frame_index(&frame)?;
    let png = st.store.get(&id)?.mask_png(frame)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

fn launch(st: AppState, id: &str, correction: Option<usize>) -> ApiResult {
    let session = st.store.get(id)?;
    let job = session.begin(correction)?;
    let status = session.status();
    let model = st.model.clone();
    tokio::task::spawn_blocking(move || session.run(job, &model));
    ok(StatusCode::ACCEPTED, status)
}

async fn start_propagation(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult {
    launch(st, &id, None)
}

async fn start_correction(State(st): State<AppState>, Path((id, frame)): Path<(String, String)>) -> ApiResult {
    let frame = frame_index(&frame)?;
    launch(st, &id, Some(frame))
}
