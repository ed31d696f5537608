//! Model-service interfaces consumed by the agents.
//!
//! Five services back every run: a vision-language model, an image
//! generator, an image editor, an image embedder and a segmenter. Each is a
//! trait object so scripted mocks and HTTP clients are interchangeable. The
//! [`BackendSuite`] wrapper enforces the request/response contracts that do
//! not depend on the implementation (scale range, embedding dimension,
//! answer schemas).

pub mod answers;
pub mod http;
pub mod mock;
pub mod wire;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::image::{ImageData, Mask};

pub use answers::ResponseSchema;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("backend rejected request: {0}")]
    Rejected(String),
    #[error("backend timed out")]
    Timeout,
    #[error("conditioning scale {0} outside (0, 1]")]
    InvalidScale(f64),
    #[error("embedding has dimension {actual}, expected {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("embedding contains non-finite components")]
    NonFiniteEmbedding,
    #[error("answer does not match schema `{schema}`: {reason}")]
    UnparseableAnswer {
        schema: String,
        reason: String,
        raw: String,
    },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

impl BackendError {
    /// Whether a client should retry the call.
    pub fn is_transient(&self) -> bool {
        matches!(self, BackendError::Unavailable(_) | BackendError::Timeout)
    }
}

#[derive(Debug, Clone)]
pub struct GenerateRequest {
    pub prompt: String,
    pub reference: Option<ImageData>,
    pub seed: u64,
    /// 1-based panel position, when the image is a story panel.
    pub panel_index: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct EditRequest {
    pub image: ImageData,
    pub prompt: String,
    pub conditioning_scale: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone)]
pub struct VlmMessage {
    pub role: Role,
    pub text: String,
    pub images: Vec<ImageData>,
}

impl VlmMessage {
    pub fn system(text: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            text: text.into(),
            images: Vec::new(),
        }
    }

    pub fn user(text: impl Into<String>, images: Vec<ImageData>) -> Self {
        Self {
            role: Role::User,
            text: text.into(),
            images,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VlmQuery {
    pub messages: Vec<VlmMessage>,
    pub schema: ResponseSchema,
    /// Structured context forwarded alongside the messages (panel index,
    /// candidate mismatches, ...). Scripted backends key on it.
    pub metadata: Map<String, Value>,
}

impl VlmQuery {
    pub fn images(&self) -> impl Iterator<Item = &ImageData> {
        self.messages.iter().flat_map(|m| m.images.iter())
    }

    pub fn panel_index(&self) -> Option<usize> {
        self.metadata
            .get("panel_index")
            .and_then(Value::as_u64)
            .map(|v| v as usize)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VlmAnswer {
    pub json: Value,
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVec {
    values: Vec<f64>,
}

impl EmbeddingVec {
    pub fn new(values: Vec<f64>) -> Result<Self, BackendError> {
        if values.is_empty() {
            return Err(BackendError::DimensionMismatch {
                expected: 1,
                actual: 0,
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(BackendError::NonFiniteEmbedding);
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub trait VisionLanguageModel: Send + Sync {
    /// Returns the model's raw text answer.
    fn complete(&self, query: &VlmQuery) -> Result<String, BackendError>;
}

pub trait ImageGenerator: Send + Sync {
    fn generate(&self, request: &GenerateRequest) -> Result<ImageData, BackendError>;
}

pub trait ImageEditor: Send + Sync {
    fn edit(&self, request: &EditRequest) -> Result<ImageData, BackendError>;
}

pub trait ImageEmbedder: Send + Sync {
    fn embed(&self, image: &ImageData) -> Result<Vec<f64>, BackendError>;
}

pub trait ImageSegmenter: Send + Sync {
    fn segment(&self, image: &ImageData, label: &str) -> Result<Mask, BackendError>;
}

/// Learned perceptual distance between two images (LPIPS-style).
pub trait PerceptualMetric: Send + Sync {
    fn distance(&self, a: &ImageData, b: &ImageData) -> Result<f64, BackendError>;
}

/// Embedder handle with its declared output dimension.
#[derive(Clone)]
pub struct EmbedderHandle {
    pub backend: Arc<dyn ImageEmbedder>,
    pub dim: usize,
}

impl EmbedderHandle {
    pub fn new(backend: Arc<dyn ImageEmbedder>, dim: usize) -> Self {
        Self { backend, dim }
    }

    pub fn embed(&self, image: &ImageData) -> Result<EmbeddingVec, BackendError> {
        let values = self.backend.embed(image)?;
        if values.len() != self.dim {
            return Err(BackendError::DimensionMismatch {
                expected: self.dim,
                actual: values.len(),
            });
        }
        EmbeddingVec::new(values)
    }
}

/// The five services every run needs.
#[derive(Clone)]
pub struct BackendSuite {
    pub vlm: Arc<dyn VisionLanguageModel>,
    pub generator: Arc<dyn ImageGenerator>,
    pub editor: Arc<dyn ImageEditor>,
    pub embedder: EmbedderHandle,
    pub segmenter: Arc<dyn ImageSegmenter>,
}

impl BackendSuite {
    pub fn generate(&self, prompt: &str, seed: u64) -> Result<ImageData, BackendError> {
        if prompt.trim().is_empty() {
            return Err(BackendError::InvalidRequest("prompt is empty".into()));
        }
        self.generator.generate(&GenerateRequest {
            prompt: prompt.to_owned(),
            reference: None,
            seed,
            panel_index: None,
        })
    }

    pub fn generate_conditioned(
        &self,
        reference: &ImageData,
        prompt: &str,
        seed: u64,
        panel_index: usize,
    ) -> Result<ImageData, BackendError> {
        if prompt.trim().is_empty() {
            return Err(BackendError::InvalidRequest("prompt is empty".into()));
        }
        self.generator.generate(&GenerateRequest {
            prompt: prompt.to_owned(),
            reference: Some(reference.clone()),
            seed,
            panel_index: Some(panel_index),
        })
    }

    pub fn edit(
        &self,
        image: &ImageData,
        prompt: &str,
        conditioning_scale: f64,
        seed: u64,
    ) -> Result<ImageData, BackendError> {
        if !(conditioning_scale > 0.0 && conditioning_scale <= 1.0) {
            return Err(BackendError::InvalidScale(conditioning_scale));
        }
        self.editor.edit(&EditRequest {
            image: image.clone(),
            prompt: prompt.to_owned(),
            conditioning_scale,
            seed,
        })
    }

    pub fn embed(&self, image: &ImageData) -> Result<EmbeddingVec, BackendError> {
        self.embedder.embed(image)
    }

    pub fn segment(&self, image: &ImageData, label: &str) -> Result<Mask, BackendError> {
        if label.trim().is_empty() {
            return Err(BackendError::InvalidRequest("segment label is empty".into()));
        }
        let mask = self.segmenter.segment(image, label)?;
        if let Some((w, h)) = image.dimensions() {
            if (mask.width, mask.height) != (w, h) {
                return Err(BackendError::Protocol(format!(
                    "mask is {}x{} for a {w}x{h} image",
                    mask.width, mask.height
                )));
            }
        }
        Ok(mask)
    }

    /// Sends a query and validates the answer against its declared schema.
    pub fn ask(&self, query: &VlmQuery) -> Result<VlmAnswer, BackendError> {
        if query.messages.is_empty() {
            return Err(BackendError::InvalidRequest("query has no messages".into()));
        }
        let raw = self.vlm.complete(query)?;
        let json = query.schema.validate(&raw)?;
        Ok(VlmAnswer { json, raw })
    }
}

/// Retry behaviour of a network client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    #[serde(default = "RetryPolicy::default_retries")]
    pub retries: u32,
    #[serde(default = "RetryPolicy::default_backoff_ms")]
    pub backoff_ms: u64,
    /// Multiplier applied to the backoff after each retry.
    #[serde(default = "RetryPolicy::default_factor")]
    pub backoff_factor: f64,
}

impl RetryPolicy {
    fn default_retries() -> u32 {
        2
    }
    fn default_backoff_ms() -> u64 {
        500
    }
    fn default_factor() -> f64 {
        2.0
    }

    /// Delay before retry number `retry` (0-based).
    pub fn delay(&self, retry: u32) -> std::time::Duration {
        let ms = self.backoff_ms as f64 * self.backoff_factor.powi(retry as i32);
        std::time::Duration::from_millis(ms.max(0.0) as u64)
    }
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retries: Self::default_retries(),
            backoff_ms: Self::default_backoff_ms(),
            backoff_factor: Self::default_factor(),
        }
    }
}

/// Where a network backend lives and how to talk to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub base_url: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub token_env: Option<String>,
    #[serde(default = "EndpointConfig::default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
    /// Model name forwarded to chat-completion style servers.
    #[serde(default)]
    pub model: Option<String>,
}

impl EndpointConfig {
    fn default_timeout_ms() -> u64 {
        120_000
    }

    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            token_env: None,
            timeout_ms: Self::default_timeout_ms(),
            retry: RetryPolicy::default(),
            model: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::mock::{MockBackends, Scenario};

    fn suite() -> BackendSuite {
        MockBackends::new(Scenario::default()).suite()
    }

    #[test]
    fn edit_rejects_out_of_range_scale() {
        let s = suite();
        let img = s.generate("a boy", 1).unwrap();
        assert_eq!(s.edit(&img, "x", 0.0, 0), Err(BackendError::InvalidScale(0.0)));
        assert_eq!(s.edit(&img, "x", 1.5, 0), Err(BackendError::InvalidScale(1.5)));
        assert!(matches!(s.edit(&img, "x", f64::NAN, 0), Err(BackendError::InvalidScale(_))));
        assert!(s.edit(&img, "x", 1.0, 0).is_ok());
    }

    #[test]
    fn empty_prompt_and_label_rejected() {
        let s = suite();
        assert!(matches!(s.generate("  ", 1), Err(BackendError::InvalidRequest(_))));
        let img = s.generate("a boy", 1).unwrap();
        assert!(matches!(s.segment(&img, ""), Err(BackendError::InvalidRequest(_))));
    }

    #[test]
    fn ask_requires_messages() {
        let q = VlmQuery {
            messages: vec![],
            schema: ResponseSchema::EntityMatch,
            metadata: Map::new(),
        };
        assert!(matches!(suite().ask(&q), Err(BackendError::InvalidRequest(_))));
    }

    struct Fixed(Vec<f64>);
    impl ImageEmbedder for Fixed {
        fn embed(&self, _: &ImageData) -> Result<Vec<f64>, BackendError> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn embed_dimension_contract() {
        let img = ImageData::new("image/png", vec![0]);
        let h = EmbedderHandle::new(Arc::new(Fixed(vec![0.1; 512])), 768);
        assert_eq!(
            h.embed(&img),
            Err(BackendError::DimensionMismatch {
                expected: 768,
                actual: 512
            })
        );
        let h = EmbedderHandle::new(Arc::new(Fixed(vec![f64::NAN, 1.0])), 2);
        assert_eq!(h.embed(&img), Err(BackendError::NonFiniteEmbedding));
    }

    #[test]
    fn retry_delay_grows() {
        let p = RetryPolicy {
            retries: 3,
            backoff_ms: 10,
            backoff_factor: 2.0,
        };
        assert_eq!(p.delay(0).as_millis(), 10);
        assert_eq!(p.delay(2).as_millis(), 40);
    }
}
