//! Blocking HTTP clients for the wire contract in [`super::wire`].

use std::sync::Arc;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::wire::{self, WireImage};
use super::{
    BackendError, BackendSuite, EditRequest, EmbedderHandle, EndpointConfig, GenerateRequest,
    ImageEditor, ImageEmbedder, ImageGenerator, ImageSegmenter, PerceptualMetric,
    VisionLanguageModel, VlmQuery,
};
use crate::image::{ImageData, Mask};

/// Response bodies carry base64 images; ureq's default cap is 10 MB.
const BODY_LIMIT: u64 = 512 * 1024 * 1024;

/// One endpoint plus retry handling. Transient failures (connection
/// errors, timeouts, 429 and 5xx) are retried exactly `retry.retries`
/// times; other 4xx responses fail immediately.
pub struct HttpTransport {
    endpoint: EndpointConfig,
    token: Option<String>,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(endpoint: EndpointConfig) -> Result<Self, BackendError> {
        let token = match &endpoint.token_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                BackendError::InvalidRequest(format!("environment variable `{var}` is not set"))
            })?),
            None => None,
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(endpoint.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            endpoint,
            token,
            agent,
        })
    }

    pub fn endpoint(&self) -> &EndpointConfig {
        &self.endpoint
    }

    pub fn post<B: Serialize, R: DeserializeOwned>(&self, path: &str, body: &B) -> Result<R, BackendError> {
        let url = format!("{}{}", self.endpoint.base_url.trim_end_matches('/'), path);
        let payload = serde_json::to_vec(body).map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
        let mut retry = 0;
        loop {
            match self.attempt(&url, &payload) {
                Ok(text) => {
                    return serde_json::from_str(&text)
                        .map_err(|e| BackendError::Protocol(format!("{url}: {e}")))
                }
                Err(e) if e.is_transient() && retry < self.endpoint.retry.retries => {
                    tracing::debug!(%url, retry, error = %e, "retrying backend call");
                    std::thread::sleep(self.endpoint.retry.delay(retry));
                    retry += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn attempt(&self, url: &str, payload: &[u8]) -> Result<String, BackendError> {
        let mut req = self.agent.post(url).header("content-type", "application/json");
        if let Some(token) = &self.token {
            req = req.header("authorization", format!("Bearer {token}"));
        }
        let mut resp = req.send(payload).map_err(map_transport_error)?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .with_config()
            .limit(BODY_LIMIT)
            .read_to_string()
            .map_err(map_transport_error)?;
        match status {
            200..=299 => Ok(text),
            429 | 500..=599 => Err(BackendError::Unavailable(format!("{url}: HTTP {status}"))),
            _ => {
                let msg = serde_json::from_str::<wire::ErrorBody>(&text)
                    .map(|b| b.error)
                    .unwrap_or(text);
                Err(BackendError::Rejected(format!("HTTP {status}: {msg}")))
            }
        }
    }
}

fn map_transport_error(e: ureq::Error) -> BackendError {
    match e {
        ureq::Error::Timeout(_) => BackendError::Timeout,
        ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::TimedOut => BackendError::Timeout,
        ureq::Error::BodyExceedsLimit(n) => BackendError::Protocol(format!("response exceeds {n} bytes")),
        other => BackendError::Unavailable(other.to_string()),
    }
}

pub struct HttpVlm(pub HttpTransport);

impl VisionLanguageModel for HttpVlm {
    fn complete(&self, query: &VlmQuery) -> Result<String, BackendError> {
        let body = wire::ChatRequest::from_query(query, self.0.endpoint().model.clone());
        self.0
            .post::<_, wire::ChatResponse>(wire::CHAT_PATH, &body)?
            .into_content()
    }
}

pub struct HttpGenerator(pub HttpTransport);

impl ImageGenerator for HttpGenerator {
    fn generate(&self, req: &GenerateRequest) -> Result<ImageData, BackendError> {
        let body = wire::GenerateBody {
            prompt: req.prompt.clone(),
            seed: req.seed,
            reference_image: req.reference.as_ref().map(WireImage::from_image),
            panel_index: req.panel_index,
        };
        self.0
            .post::<_, wire::ImageBody>(wire::GENERATE_PATH, &body)?
            .image
            .to_image()
    }
}

pub struct HttpEditor(pub HttpTransport);

impl ImageEditor for HttpEditor {
    fn edit(&self, req: &EditRequest) -> Result<ImageData, BackendError> {
        let body = wire::EditBody {
            image: WireImage::from_image(&req.image),
            prompt: req.prompt.clone(),
            conditioning_scale: req.conditioning_scale,
            seed: req.seed,
        };
        self.0
            .post::<_, wire::ImageBody>(wire::EDIT_PATH, &body)?
            .image
            .to_image()
    }
}

pub struct HttpEmbedder(pub HttpTransport);

impl ImageEmbedder for HttpEmbedder {
    fn embed(&self, image: &ImageData) -> Result<Vec<f64>, BackendError> {
        let body = wire::EmbedBody {
            image: WireImage::from_image(image),
        };
        Ok(self
            .0
            .post::<_, wire::EmbeddingBody>(wire::EMBED_PATH, &body)?
            .embedding)
    }
}

pub struct HttpSegmenter(pub HttpTransport);

impl ImageSegmenter for HttpSegmenter {
    fn segment(&self, image: &ImageData, label: &str) -> Result<Mask, BackendError> {
        let body = wire::SegmentBody {
            image: WireImage::from_image(image),
            label: label.to_owned(),
        };
        Ok(self.0.post::<_, wire::MaskBody>(wire::SEGMENT_PATH, &body)?.mask)
    }
}

pub struct HttpPerceptual(pub HttpTransport);

impl PerceptualMetric for HttpPerceptual {
    fn distance(&self, a: &ImageData, b: &ImageData) -> Result<f64, BackendError> {
        let body = wire::DistanceBody {
            a: WireImage::from_image(a),
            b: WireImage::from_image(b),
        };
        Ok(self
            .0
            .post::<_, wire::DistanceResult>(wire::DISTANCE_PATH, &body)?
            .distance)
    }
}

/// Endpoints for a network-backed suite.
#[derive(Debug, Clone)]
pub struct SuiteEndpoints {
    pub vlm: EndpointConfig,
    pub generator: EndpointConfig,
    pub editor: EndpointConfig,
    pub embedder: EndpointConfig,
    pub embedding_dim: usize,
    pub segmenter: EndpointConfig,
}

impl SuiteEndpoints {
    /// Every service on one server.
    pub fn single(endpoint: EndpointConfig, embedding_dim: usize) -> Self {
        Self {
            vlm: endpoint.clone(),
            generator: endpoint.clone(),
            editor: endpoint.clone(),
            embedder: endpoint.clone(),
            embedding_dim,
            segmenter: endpoint,
        }
    }

    pub fn build(&self) -> Result<BackendSuite, BackendError> {
        Ok(BackendSuite {
            vlm: Arc::new(HttpVlm(HttpTransport::new(self.vlm.clone())?)),
            generator: Arc::new(HttpGenerator(HttpTransport::new(self.generator.clone())?)),
            editor: Arc::new(HttpEditor(HttpTransport::new(self.editor.clone())?)),
            embedder: EmbedderHandle::new(
                Arc::new(HttpEmbedder(HttpTransport::new(self.embedder.clone())?)),
                self.embedding_dim,
            ),
            segmenter: Arc::new(HttpSegmenter(HttpTransport::new(self.segmenter.clone())?)),
        })
    }
}
