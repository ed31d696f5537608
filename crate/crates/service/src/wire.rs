//! Serves a [`BackendSuite`] over the backend wire contract, so the HTTP
//! clients can be exercised against the mock world (or any other suite).

use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use serde::Serialize;

use storyloom_core::backend::wire::{
    ChatRequest, ChatResponse, DistanceBody, DistanceResult, EditBody, EmbedBody, EmbeddingBody, ErrorBody,
    GenerateBody, ImageBody, MaskBody, SegmentBody, WireImage, CHAT_PATH, DISTANCE_PATH, EDIT_PATH, EMBED_PATH,
    GENERATE_PATH, SEGMENT_PATH,
};
use storyloom_core::backend::{BackendError, BackendSuite, GenerateRequest, PerceptualMetric};

#[derive(Clone)]
struct Backends {
    suite: BackendSuite,
    perceptual: Option<Arc<dyn PerceptualMetric>>,
}

struct WireError(StatusCode, String);

impl From<BackendError> for WireError {
    fn from(e: BackendError) -> Self {
        let status = match &e {
            BackendError::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            BackendError::Timeout => StatusCode::GATEWAY_TIMEOUT,
            BackendError::InvalidRequest(_)
            | BackendError::InvalidScale(_)
            | BackendError::Rejected(_)
            | BackendError::UnparseableAnswer { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        WireError(status, e.to_string())
    }
}

impl From<JsonRejection> for WireError {
    fn from(e: JsonRejection) -> Self {
        WireError(StatusCode::UNPROCESSABLE_ENTITY, e.body_text())
    }
}

impl IntoResponse for WireError {
    fn into_response(self) -> Response {
        (self.0, Json(ErrorBody { error: self.1 })).into_response()
    }
}

type WireResult<T> = Result<Json<T>, WireError>;

/// Router with the six `/v1` routes. `/v1/distance` answers 404 without a
/// perceptual metric.
pub fn wire_router(suite: BackendSuite, perceptual: Option<Arc<dyn PerceptualMetric>>) -> Router {
    Router::new()
        .route(CHAT_PATH, post(chat))
        .route(GENERATE_PATH, post(generate))
        .route(EDIT_PATH, post(edit))
        .route(EMBED_PATH, post(embed))
        .route(SEGMENT_PATH, post(segment))
        .route(DISTANCE_PATH, post(distance))
        .with_state(Backends { suite, perceptual })
}

async fn run<T: Serialize + Send + 'static>(
    f: impl FnOnce() -> Result<T, BackendError> + Send + 'static,
) -> WireResult<T> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => Ok(Json(r?)),
        Err(e) => Err(WireError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())),
    }
}

async fn chat(State(b): State<Backends>, body: Result<Json<ChatRequest>, JsonRejection>) -> WireResult<ChatResponse> {
    let query = body?.0.to_query()?;
    run(move || b.suite.vlm.complete(&query).map(ChatResponse::assistant)).await
}

async fn generate(State(b): State<Backends>, body: Result<Json<GenerateBody>, JsonRejection>) -> WireResult<ImageBody> {
    let body = body?.0;
    let request = GenerateRequest {
        prompt: body.prompt,
        reference: body.reference_image.map(|i| i.to_image()).transpose()?,
        seed: body.seed,
        panel_index: body.panel_index,
    };
    run(move || {
        b.suite.generator.generate(&request).map(|image| ImageBody {
            image: WireImage::from_image(&image),
        })
    })
    .await
}

async fn edit(State(b): State<Backends>, body: Result<Json<EditBody>, JsonRejection>) -> WireResult<ImageBody> {
    let body = body?.0;
    let image = body.image.to_image()?;
    run(move || {
        b.suite
            .edit(&image, &body.prompt, body.conditioning_scale, body.seed)
            .map(|image| ImageBody {
                image: WireImage::from_image(&image),
            })
    })
    .await
}

async fn embed(State(b): State<Backends>, body: Result<Json<EmbedBody>, JsonRejection>) -> WireResult<EmbeddingBody> {
    let image = body?.0.image.to_image()?;
    run(move || b.suite.embedder.backend.embed(&image).map(|embedding| EmbeddingBody { embedding })).await
}

async fn segment(State(b): State<Backends>, body: Result<Json<SegmentBody>, JsonRejection>) -> WireResult<MaskBody> {
    let body = body?.0;
    let image = body.image.to_image()?;
    run(move || b.suite.segment(&image, &body.label).map(|mask| MaskBody { mask })).await
}

async fn distance(
    State(b): State<Backends>,
    body: Result<Json<DistanceBody>, JsonRejection>,
) -> WireResult<DistanceResult> {
    let body = body?.0;
    let Some(metric) = b.perceptual.clone() else {
        return Err(WireError(StatusCode::NOT_FOUND, "no perceptual metric configured".into()));
    };
    let (a, c) = (body.a.to_image()?, body.b.to_image()?);
    run(move || metric.distance(&a, &c).map(|distance| DistanceResult { distance })).await
}
