//! HTTP surface of the service.
//!
//! | route                               | result                                   |
//! |-------------------------------------|------------------------------------------|
//! | `POST /runs`                        | 201 `{run_id}`, pipeline starts          |
//! | `GET /runs`                         | run summaries                            |
//! | `GET /runs/{id}`                    | run snapshot, images as URLs             |
//! | `GET /runs/{id}/events?since=<seq>` | NDJSON progress events                   |
//! | `GET /runs/{id}/reference`          | reference image bytes                    |
//! | `GET /runs/{id}/panels/{i}`         | current bytes of panel `i` (1-based)     |
//! | `GET /runs/{id}/images/{hash}`      | any stored image by content hash         |
//! | `GET /runs/{id}/report`             | latest report, as written to disk        |
//! | `POST /runs/{id}/corrections`       | 202, correction round starts             |
//!
//! Errors are `{"error": "..."}` with 401 (bad token), 404 (unknown run or
//! resource), 409 (run busy or not reviewable) or 422 (invalid body).

use std::convert::Infallible;
use std::sync::Arc;
use std::time::Duration;

use axum::body::{Body, Bytes};
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::{mpsc, oneshot};
use tokio_stream::wrappers::UnboundedReceiverStream;
use tokio_stream::StreamExt;

use storyloom_core::backend::wire::ErrorBody;
use storyloom_core::director::{Director, DirectorError, UserCorrection};
use storyloom_core::image::{ContentHash, ImageData, ImageRef};
use storyloom_core::memory::{JournalEntry, MemoryError, ProgressEvent, RunHandle, RunState, RunStatus, WriterClaim};

use crate::runs::{NewRun, RunManager, ServiceError};

pub const NDJSON: &str = "application/x-ndjson";

const RELEASE_TRIES: u32 = 100;

#[derive(Clone)]
struct AppState {
    runs: Arc<RunManager>,
    token: Option<Arc<str>>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let status = match &e {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::unprocessable(e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: self.message })).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// The service router. With a token, every request must carry
/// `Authorization: Bearer <token>`.
pub fn router(runs: Arc<RunManager>, token: Option<String>) -> Router {
    let state = AppState {
        runs,
        token: token.map(Arc::from),
    };
    Router::new()
        .route("/runs", post(create_run).get(list_runs))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/events", get(events))
        .route("/runs/{id}/reference", get(reference))
        .route("/runs/{id}/panels/{index}", get(panel))
        .route("/runs/{id}/images/{hash}", get(image_by_hash))
        .route("/runs/{id}/report", get(report))
        .route("/runs/{id}/corrections", post(corrections))
        .fallback(|| async { ApiError::not_found("no such route") })
        .layer(middleware::from_fn_with_state(state.clone(), authorize))
        .with_state(state)
}

/// Resumes unsettled runs found on disk, each on its own blocking task.
pub fn resume_pending(runs: &Arc<RunManager>) -> usize {
    let pending = runs.open_existing();
    let n = pending.len();
    for handle in pending {
        let runs = runs.clone();
        tokio::task::spawn_blocking(move || {
            if let Err(e) = runs.drive(&handle) {
                tracing::warn!(run_id = handle.run_id(), error = %e, "resumed run stopped");
            }
        });
    }
    n
}

async fn authorize(State(st): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &st.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == &**token);
        if !ok {
            return ApiError::new(StatusCode::UNAUTHORIZED, "missing or wrong bearer token").into_response();
        }
    }
    next.run(req).await
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
}

async fn create_run(State(st): State<AppState>, body: Result<Json<NewRun>, JsonRejection>) -> ApiResult<Response> {
    let Json(req) = body?;
    let runs = st.runs.clone();
    let (handle, director) = blocking(move || runs.create(req)).await??;
    // Held from here on, so corrections cannot slip in before the drive.
    let claim = handle.claim().map_err(ServiceError::from)?;
    let run_id = handle.run_id().to_owned();
    tokio::task::spawn_blocking(move || {
        if let Err(e) = director.drive(&claim) {
            tracing::warn!(run_id = claim.handle().run_id(), error = %e, "run stopped");
        }
    });
    let location = HeaderValue::from_str(&format!("/runs/{run_id}")).expect("run ids are plain names");
    Ok((
        StatusCode::CREATED,
        [(header::LOCATION, location)],
        Json(json!({ "run_id": run_id })),
    )
        .into_response())
}

async fn list_runs(State(st): State<AppState>) -> Json<Value> {
    Json(serde_json::to_value(st.runs.memory().list()).expect("summaries serialize"))
}

fn handle(st: &AppState, id: &str) -> ApiResult<Arc<RunHandle>> {
    Ok(st.runs.get(id)?)
}

/// Adds a `url` next to every image reference of the snapshot.
pub fn snapshot_json(state: &RunState) -> Value {
    let id = &state.run_id;
    let image_url = |r: &ImageRef| format!("/runs/{id}/images/{}", r.content_hash.to_hex());
    let mut v = serde_json::to_value(state).expect("state serializes");
    if let Some(r) = &state.reference {
        v["reference"]["url"] = json!(image_url(r));
    }
    for (k, p) in state.panels.iter().enumerate() {
        v["panels"][k]["url"] = json!(format!("/runs/{id}/panels/{}", p.index));
        v["panels"][k]["image"]["url"] = json!(image_url(&p.image));
    }
    for (k, e) in state.edit_log.iter().enumerate() {
        v["edit_log"][k]["before"]["url"] = json!(image_url(&e.before));
        v["edit_log"][k]["after"]["url"] = json!(image_url(&e.after));
    }
    v["digest"] = json!(state.digest().to_hex());
    v
}

async fn get_run(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    Ok(Json(snapshot_json(&handle(&st, &id)?.snapshot())))
}

fn image_response(image: ImageData) -> Response {
    let media = HeaderValue::from_str(&image.media_type).unwrap_or(HeaderValue::from_static("application/octet-stream"));
    (
        [(header::CONTENT_TYPE, media)],
        Bytes::from(image.bytes.to_vec()),
    )
        .into_response()
}

fn stored(h: &RunHandle, r: &ImageRef) -> ApiResult<Response> {
    h.image(r)
        .map(image_response)
        .ok_or_else(|| ApiError::not_found(format!("image {} is not stored", r.id)))
}

async fn reference(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let h = handle(&st, &id)?;
    match h.snapshot().reference {
        Some(r) => stored(&h, &r),
        None => Err(ApiError::not_found("no reference image yet")),
    }
}

async fn panel(State(st): State<AppState>, Path((id, index)): Path<(String, usize)>) -> ApiResult<Response> {
    let h = handle(&st, &id)?;
    let state = h.snapshot();
    let p = state
        .panel(index)
        .ok_or_else(|| ApiError::not_found(format!("run `{id}` has no panel {index}")))?;
    stored(&h, &p.image)
}

async fn image_by_hash(State(st): State<AppState>, Path((id, hash)): Path<(String, String)>) -> ApiResult<Response> {
    let h = handle(&st, &id)?;
    let hash = ContentHash::from_hex(&hash).ok_or_else(|| ApiError::not_found("not a content hash"))?;
    let state = h.snapshot();
    let r = state
        .reference
        .iter()
        .chain(state.panels.iter().map(|p| &p.image))
        .chain(state.edit_log.iter().flat_map(|e| [&e.before, &e.after]))
        .find(|r| r.content_hash == hash)
        .ok_or_else(|| ApiError::not_found("image not referenced by this run"))?
        .clone();
    stored(&h, &r)
}

async fn report(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let h = handle(&st, &id)?;
    let r = h
        .snapshot()
        .latest_report
        .ok_or_else(|| ApiError::not_found("no audit recorded yet"))?;
    Ok(([(header::CONTENT_TYPE, "application/json")], r.to_json_bytes()).into_response())
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    since: Option<u64>,
}

/// Whether nothing follows this status until someone posts corrections.
fn at_rest(status: RunStatus, await_user: bool) -> bool {
    match status {
        RunStatus::Done => !await_user,
        RunStatus::AwaitingUser | RunStatus::Failed => true,
        _ => false,
    }
}

fn ndjson_line(e: &ProgressEvent) -> Bytes {
    let mut line = serde_json::to_vec(e).expect("events serialize");
    line.push(b'\n');
    Bytes::from(line)
}

/// Replays events after `since`, then follows the run live. The response
/// ends once the run comes to rest.
async fn events(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
) -> ApiResult<Response> {
    let h = handle(&st, &id)?;
    let await_user = h.snapshot().config.director.await_user;
    let since = q.since.unwrap_or(0);
    let (tx, rx) = mpsc::unbounded_channel();
    // Dropping the sink closes the channel, which ends the response.
    let (past, status) = h.subscribe_with(Box::new(move |e| {
        let rests = matches!(e.event, JournalEntry::StatusChanged { .. }) && at_rest(e.status, await_user);
        let sent = e.seq <= since || tx.send(ndjson_line(e)).is_ok();
        sent && !rests
    }));
    let replay: Vec<Bytes> = past.iter().filter(|e| e.seq > since).map(ndjson_line).collect();
    let head = tokio_stream::iter(replay);
    let body = if at_rest(status, await_user) {
        drop(rx);
        Body::from_stream(head.map(Ok::<_, Infallible>))
    } else {
        Body::from_stream(head.chain(UnboundedReceiverStream::new(rx)).map(Ok::<_, Infallible>))
    };
    Ok(([(header::CONTENT_TYPE, NDJSON)], body).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorrectionsBody {
    corrections: Vec<UserCorrection>,
}

async fn corrections(
    State(st): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<CorrectionsBody>, JsonRejection>,
) -> ApiResult<Response> {
    let h = handle(&st, &id)?;
    let Json(body) = body?;
    if body.corrections.is_empty() {
        return Err(ApiError::unprocessable("corrections must not be empty"));
    }
    if let Some(c) = body.corrections.iter().find(|c| c.instruction.trim().is_empty()) {
        return Err(ApiError::unprocessable(format!("instruction for panel {} is empty", c.panel_index)));
    }
    let director = {
        let runs = st.runs.clone();
        let h = h.clone();
        blocking(move || runs.director(&h)).await??
    };
    let (ready_tx, ready_rx) = oneshot::channel();
    let list = body.corrections;
    let n = list.len();
    tokio::task::spawn_blocking(move || {
        let claim = match prepare_when_released(&director, &h, &list) {
            Ok(Some(claim)) => claim,
            Ok(None) => unreachable!("list is non-empty"),
            Err(e) => {
                let _ = ready_tx.send(Err(e));
                return;
            }
        };
        let _ = ready_tx.send(Ok(()));
        if let Err(e) = director.apply_corrections(&claim, &list) {
            tracing::warn!(run_id = h.run_id(), error = %e, "correction round stopped");
        }
    });
    match ready_rx.await {
        Ok(Ok(())) => Ok((
            StatusCode::ACCEPTED,
            Json(json!({ "run_id": id, "corrections": n, "status": RunStatus::Repairing })),
        )
            .into_response()),
        Ok(Err(e)) => Err(ServiceError::from(e).into()),
        Err(_) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "correction task vanished")),
    }
}

/// A settled run's driver publishes its last event just before releasing
/// the writer slot; a correction racing that release waits for it.
fn prepare_when_released(
    director: &Director,
    h: &Arc<RunHandle>,
    list: &[UserCorrection],
) -> Result<Option<WriterClaim>, DirectorError> {
    let mut tries = 0;
    loop {
        match director.prepare_corrections(h, list) {
            Err(DirectorError::Memory(MemoryError::Busy)) if h.status().is_settled() && tries < RELEASE_TRIES => {
                tries += 1;
                std::thread::sleep(Duration::from_millis(10));
            }
            other => return other,
        }
    }
}
