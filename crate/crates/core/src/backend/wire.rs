//! JSON bodies of the backend wire contract.
//!
//! | route                       | request                 | response                |
//! |-----------------------------|-------------------------|-------------------------|
//! | `POST /v1/chat/completions` | [`ChatRequest`]         | [`ChatResponse`]        |
//! | `POST /v1/generate`         | [`GenerateBody`]        | [`ImageBody`]           |
//! | `POST /v1/edit`             | [`EditBody`]            | [`ImageBody`]           |
//! | `POST /v1/embed`            | [`EmbedBody`]           | [`EmbeddingBody`]       |
//! | `POST /v1/segment`          | [`SegmentBody`]         | [`MaskBody`]            |
//! | `POST /v1/distance`         | [`DistanceBody`]        | [`DistanceResult`]      |
//!
//! Images travel as `{media_type, data}` with base64 data. Errors are any
//! non-2xx status with an optional `{"error": "..."}` body.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{BackendError, ResponseSchema, Role, VlmMessage, VlmQuery};
use crate::image::{ImageData, Mask};

pub const CHAT_PATH: &str = "/v1/chat/completions";
pub const GENERATE_PATH: &str = "/v1/generate";
pub const EDIT_PATH: &str = "/v1/edit";
pub const EMBED_PATH: &str = "/v1/embed";
pub const SEGMENT_PATH: &str = "/v1/segment";
pub const DISTANCE_PATH: &str = "/v1/distance";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireImage {
    pub media_type: String,
    pub data: String,
}

impl WireImage {
    pub fn from_image(image: &ImageData) -> Self {
        Self {
            media_type: image.media_type.clone(),
            data: image.to_base64(),
        }
    }

    pub fn to_image(&self) -> Result<ImageData, BackendError> {
        ImageData::from_base64(self.media_type.clone(), &self.data)
            .map_err(|e| BackendError::Protocol(format!("bad base64 image: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text { text: String },
    ImageUrl { image_url: ImageUrl },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageUrl {
    pub url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: Vec<ContentPart>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseFormat {
    #[serde(rename = "type")]
    pub kind: String,
    pub json_schema: NamedSchema,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedSchema {
    pub name: String,
    pub schema: Value,
    pub strict: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub messages: Vec<ChatMessage>,
    pub response_format: ResponseFormat,
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    pub metadata: Map<String, Value>,
}

impl ChatRequest {
    pub fn from_query(query: &VlmQuery, model: Option<String>) -> Self {
        let messages = query
            .messages
            .iter()
            .map(|m| {
                let mut content = vec![ContentPart::Text {
                    text: m.text.clone(),
                }];
                content.extend(m.images.iter().map(|img| ContentPart::ImageUrl {
                    image_url: ImageUrl {
                        url: img.data_url(),
                    },
                }));
                ChatMessage {
                    role: m.role,
                    content,
                }
            })
            .collect();
        Self {
            model,
            messages,
            response_format: ResponseFormat {
                kind: "json_schema".into(),
                json_schema: NamedSchema {
                    name: query.schema.tag().into(),
                    schema: query.schema.json_schema(),
                    strict: true,
                },
            },
            metadata: query.metadata.clone(),
        }
    }

    /// Rebuilds the engine-side query, decoding data-URL images.
    pub fn to_query(&self) -> Result<VlmQuery, BackendError> {
        let schema = ResponseSchema::from_tag(&self.response_format.json_schema.name).ok_or_else(|| {
            BackendError::InvalidRequest(format!(
                "unknown response schema `{}`",
                self.response_format.json_schema.name
            ))
        })?;
        let mut messages = Vec::with_capacity(self.messages.len());
        for m in &self.messages {
            let mut text = Vec::new();
            let mut images = Vec::new();
            for part in &m.content {
                match part {
                    ContentPart::Text { text: t } => text.push(t.as_str()),
                    ContentPart::ImageUrl { image_url } => images.push(parse_data_url(&image_url.url)?),
                }
            }
            messages.push(VlmMessage {
                role: m.role,
                text: text.join("\n"),
                images,
            });
        }
        Ok(VlmQuery {
            messages,
            schema,
            metadata: self.metadata.clone(),
        })
    }
}

pub fn parse_data_url(url: &str) -> Result<ImageData, BackendError> {
    let bad = || BackendError::InvalidRequest("image_url must be a base64 data URL".into());
    let rest = url.strip_prefix("data:").ok_or_else(bad)?;
    let (media_type, data) = rest.split_once(";base64,").ok_or_else(bad)?;
    ImageData::from_base64(media_type, data).map_err(|_| bad())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub choices: Vec<ChatChoice>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatChoice {
    pub message: ChatAnswer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatAnswer {
    pub role: Role,
    pub content: String,
}

impl ChatResponse {
    pub fn assistant(content: String) -> Self {
        Self {
            choices: vec![ChatChoice {
                message: ChatAnswer {
                    role: Role::Assistant,
                    content,
                },
            }],
        }
    }

    pub fn into_content(self) -> Result<String, BackendError> {
        self.choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| BackendError::Protocol("chat response has no choices".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateBody {
    pub prompt: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_image: Option<WireImage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub panel_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditBody {
    pub image: WireImage,
    pub prompt: String,
    pub conditioning_scale: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageBody {
    pub image: WireImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedBody {
    pub image: WireImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingBody {
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentBody {
    pub image: WireImage,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskBody {
    pub mask: Mask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceBody {
    pub a: WireImage,
    pub b: WireImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceResult {
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn chat_request_round_trip() {
        let img = ImageData::new("image/png", vec![1, 2, 3]);
        let mut md = Map::new();
        md.insert("panel_index".into(), json!(2));
        let q = VlmQuery {
            messages: vec![
                VlmMessage::system("be terse"),
                VlmMessage::user("compare", vec![img.clone()]),
            ],
            schema: ResponseSchema::Verify,
            metadata: md,
        };
        let body = serde_json::to_value(ChatRequest::from_query(&q, Some("m".into()))).unwrap();
        assert_eq!(body["messages"][1]["content"][1]["type"], "image_url");
        assert_eq!(body["response_format"]["json_schema"]["name"], "verify");
        let back: ChatRequest = serde_json::from_value(body).unwrap();
        let q2 = back.to_query().unwrap();
        assert_eq!(q2.schema, ResponseSchema::Verify);
        assert_eq!(q2.messages[1].images, vec![img]);
        assert_eq!(q2.panel_index(), Some(2));
    }

    #[test]
    fn data_url_rejects_plain_urls() {
        assert!(parse_data_url("https://example.com/a.png").is_err());
    }
}
