//! Session service: upload frames, set reference masks, propagate with
//! streamed progress, fetch results.
//!
//! | Method | Path | |
//! |---|---|---|
//! | POST | `/sessions` | create; optional JSON `{inference, seed}` |
//! | GET, DELETE | `/sessions/{id}` | status / close |
//! | POST | `/sessions/{id}/frames` | append one PNG or JPEG frame |
//! | GET | `/sessions/{id}/frames/{index}` | the uploaded bytes |
//! | PUT | `/sessions/{id}/masks/{frame}?permanent=` | set a reference mask (PNG or PGM) |
//! | GET | `/sessions/{id}/masks/{frame}` | indexed PNG (`?format=pgm` for PGM) |
//! | POST | `/sessions/{id}/propagate` | JSON `{from}`; progress on the event channel |
//! | GET | `/sessions/{id}/events` | WebSocket of [`Event`]s; send `{"type":"cancel"}` to stop |

mod error;
mod rle;
mod state;

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;

use qtvos_core::io::{decode_frame, decode_mask, encode_mask_pgm, encode_mask_png, FrameNormalization};
use qtvos_core::runner::Reference;
use qtvos_core::{InferenceConfig, ObjectId};

pub use error::ApiError;
pub use rle::RlePreview;
pub use state::{AppState, Event, JobInfo, SessionHandle, Status};

type Shared = Arc<AppState>;
type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(session_info).delete(delete_session))
        .route("/sessions/{id}/frames", post(upload_frame))
        .route("/sessions/{id}/frames/{index}", get(get_frame))
        .route("/sessions/{id}/masks/{frame}", put(set_mask).get(get_mask))
        .route("/sessions/{id}/propagate", post(start_propagation))
        .route("/sessions/{id}/events", get(events))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateRequest {
    /// Fields override the server's inference settings.
    #[serde(default)]
    inference: Option<serde_json::Map<String, serde_json::Value>>,
    /// Use a randomly initialized network with this seed.
    #[serde(default)]
    seed: Option<u64>,
}

#[derive(Debug, Serialize)]
struct SessionSummary {
    id: String,
    status: Status,
    frames: usize,
    height: Option<usize>,
    width: Option<usize>,
    job: u64,
    progress: usize,
    references: Vec<ReferenceInfo>,
    computed: Vec<usize>,
    objects: Vec<ObjectId>,
    config: InferenceConfig,
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

#[derive(Debug, Serialize)]
struct ReferenceInfo {
    frame: usize,
    permanent: bool,
}

fn summary(handle: &SessionHandle) -> SessionSummary {
    let data = handle.data();
    let mut objects: Vec<ObjectId> = data.references.values().flat_map(|r| r.mask.object_ids()).collect();
    objects.sort_unstable();
    objects.dedup();
    SessionSummary {
        id: handle.id.clone(),
        status: data.status,
        frames: data.frames.len(),
        height: data.dims.map(|d| d.0),
        width: data.dims.map(|d| d.1),
        job: data.job,
        progress: data.progress,
        references: data
            .references
            .iter()
            .map(|(&frame, r)| ReferenceInfo {
                frame,
                permanent: r.permanent,
            })
            .collect(),
        computed: data.masks.keys().copied().collect(),
        objects,
        config: handle.config.clone(),
        seed: handle.seed,
        error: data.last_error.clone(),
    }
}

fn merged_config(base: &InferenceConfig, overrides: serde_json::Map<String, serde_json::Value>) -> ApiResult<InferenceConfig> {
    let mut value = serde_json::to_value(base).map_err(|e| ApiError::internal(e.to_string()))?;
    let obj = value.as_object_mut().expect("config serializes to an object");
    for (k, v) in overrides {
        if !obj.contains_key(&k) {
            return Err(ApiError::bad_request(format!("unknown inference setting `{k}`")));
        }
        obj.insert(k, v);
    }
    serde_json::from_value(value).map_err(|e| ApiError::bad_request(format!("invalid inference settings: {e}")))
}

async fn create_session(State(app): State<Shared>, body: Bytes) -> ApiResult<(StatusCode, Json<SessionSummary>)> {
    let req: CreateRequest = if body.iter().all(u8::is_ascii_whitespace) {
        CreateRequest::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("invalid request: {e}")))?
    };
    let config = match req.inference {
        Some(o) => merged_config(app.default_inference(), o)?,
        None => app.default_inference().clone(),
    };
    let seed = req.seed;
    let handle = {
        let app = Arc::clone(&app);
        // Building a seeded network can take a moment.
        tokio::task::spawn_blocking(move || app.create(config, seed))
            .await
            .map_err(|e| ApiError::internal(e.to_string()))??
    };
    tracing::info!(session = %handle.id, "created");
    Ok((StatusCode::CREATED, Json(summary(&handle))))
}

async fn session_info(State(app): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<SessionSummary>> {
    let handle = app.get(&id)?;
    Ok(Json(summary(&handle)))
}

async fn delete_session(State(app): State<Shared>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    app.remove(&id)?;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Debug, Serialize)]
struct FrameAdded {
    index: usize,
    count: usize,
}

async fn upload_frame(State(app): State<Shared>, Path(id): Path<String>, body: Bytes) -> ApiResult<(StatusCode, Json<FrameAdded>)> {
    let handle = app.get(&id)?;
    handle.data().ensure_idle()?;
    let bytes = body.to_vec();
    let tensor = tokio::task::spawn_blocking(move || decode_frame(&bytes, &FrameNormalization::default()).map(|t| (t, bytes)))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    let (tensor, bytes) = tensor;
    let dims = (tensor.dim(1), tensor.dim(2));
    let mut data = handle.data();
    data.ensure_idle()?;
    match data.dims {
        Some(d) if d != dims => {
            return Err(ApiError::bad_request(format!(
                "frame is {}×{} but the session's frames are {}×{}",
                dims.0, dims.1, d.0, d.1
            )))
        }
        _ => data.dims = Some(dims),
    }
    data.frames.push(Arc::new(state::Frame { bytes, tensor }));
    let count = data.frames.len();
    Ok((StatusCode::CREATED, Json(FrameAdded { index: count - 1, count })))
}

async fn get_frame(State(app): State<Shared>, Path((id, index)): Path<(String, usize)>) -> ApiResult<Response> {
    let handle = app.get(&id)?;
    let frame = handle
        .data()
        .frames
        .get(index)
        .cloned()
        .ok_or_else(|| ApiError::not_found(format!("no frame {index}")))?;
    let mime = if frame.bytes.starts_with(b"\x89PNG") { "image/png" } else { "image/jpeg" };
    Ok(([(header::CONTENT_TYPE, mime)], frame.bytes.clone()).into_response())
}

#[derive(Debug, Deserialize)]
struct MaskQuery {
    #[serde(default)]
    permanent: bool,
}

#[derive(Debug, Serialize)]
struct MaskSet {
    frame: usize,
    permanent: bool,
    objects: Vec<ObjectId>,
}

async fn set_mask(
    State(app): State<Shared>,
    Path((id, frame)): Path<(String, usize)>,
    Query(q): Query<MaskQuery>,
    body: Bytes,
) -> ApiResult<Json<MaskSet>> {
    let handle = app.get(&id)?;
    let mask = decode_mask(&body)?;
    let mut data = handle.data();
    data.ensure_idle()?;
    if frame >= data.frames.len() {
        return Err(ApiError::not_found(format!("no frame {frame}")));
    }
    if data.dims != Some(mask.dims()) {
        let (h, w) = data.dims.unwrap_or_default();
        return Err(ApiError::bad_request(format!(
            "mask is {}×{} but frames are {h}×{w}",
            mask.height(),
            mask.width()
        )));
    }
    let objects = mask.object_ids();
    data.masks.insert(frame, mask.clone());
    data.references.insert(
        frame,
        Reference {
            mask,
            permanent: q.permanent,
        },
    );
    Ok(Json(MaskSet {
        frame,
        permanent: q.permanent,
        objects,
    }))
}

#[derive(Debug, Deserialize)]
struct FormatQuery {
    #[serde(default)]
    format: Option<String>,
}

async fn get_mask(
    State(app): State<Shared>,
    Path((id, frame)): Path<(String, usize)>,
    Query(q): Query<FormatQuery>,
) -> ApiResult<Response> {
    let handle = app.get(&id)?;
    let mask = handle
        .data()
        .masks
        .get(&frame)
        .cloned()
        .ok_or_else(|| ApiError::not_found(format!("no mask computed for frame {frame}")))?;
    match q.format.as_deref() {
        None | Some("png") => Ok(([(header::CONTENT_TYPE, "image/png")], encode_mask_png(&mask)?).into_response()),
        Some("pgm") => Ok(([(header::CONTENT_TYPE, "image/x-portable-graymap")], encode_mask_pgm(&mask)).into_response()),
        Some(other) => Err(ApiError::bad_request(format!("unknown mask format `{other}`"))),
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PropagateRequest {
    /// First frame to recompute; defaults to the earliest reference.
    #[serde(default)]
    from: Option<usize>,
}

async fn start_propagation(
    State(app): State<Shared>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<JobInfo>)> {
    let handle = app.get(&id)?;
    let req: PropagateRequest = if body.iter().all(u8::is_ascii_whitespace) {
        PropagateRequest::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("invalid request: {e}")))?
    };
    let from = match req.from {
        Some(f) => f,
        None => *handle
            .data()
            .references
            .keys()
            .next()
            .ok_or_else(|| ApiError::conflict("no reference mask set"))?,
    };
    let info = handle.start_job(from)?;
    tracing::info!(session = %handle.id, job = info.job, from, "propagating");
    tokio::task::spawn_blocking(move || handle.run_job(info));
    Ok((StatusCode::ACCEPTED, Json(info)))
}

#[derive(Debug, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum ClientMessage {
    Cancel,
    Status,
}

async fn events(State(app): State<Shared>, Path(id): Path<String>, ws: WebSocketUpgrade) -> ApiResult<Response> {
    let handle = app.get(&id)?;
    Ok(ws.on_upgrade(move |socket| event_loop(socket, handle)))
}

async fn send_event(socket: &mut WebSocket, event: &Event) -> bool {
    let text = serde_json::to_string(event).expect("events serialize");
    socket.send(Message::Text(text.into())).await.is_ok()
}

async fn event_loop(mut socket: WebSocket, handle: Arc<SessionHandle>) {
    let mut rx = handle.events.subscribe();
    if !send_event(&mut socket, &handle.status_event()).await {
        return;
    }
    loop {
        tokio::select! {
            event = rx.recv() => match event {
                Ok(e) => {
                    if !send_event(&mut socket, &e).await {
                        break;
                    }
                }
                Err(tokio::sync::broadcast::error::RecvError::Lagged(n)) => {
                    tracing::warn!(session = %handle.id, skipped = n, "event subscriber lagged");
                }
                Err(tokio::sync::broadcast::error::RecvError::Closed) => break,
            },
            msg = socket.recv() => match msg {
                Some(Ok(Message::Text(text))) => match serde_json::from_str::<ClientMessage>(&text) {
                    Ok(ClientMessage::Cancel) => handle.request_cancel(),
                    Ok(ClientMessage::Status) => {
                        if !send_event(&mut socket, &handle.status_event()).await {
                            break;
                        }
                    }
                    Err(e) => tracing::debug!(error = %e, "ignoring client message"),
                },
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                Some(Ok(_)) => {}
            },
        }
    }
}
