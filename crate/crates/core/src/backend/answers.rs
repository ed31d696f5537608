//! Response schemas for the vision-language model sub-calls.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::BackendError;

/// Metadata keys attached to VLM queries.
pub mod meta {
    pub const PANEL_INDEX: &str = "panel_index";
    pub const AUDIT_ITERATION: &str = "audit_iteration";
    /// `[{name, description, category}]` for every script character.
    pub const CHARACTERS: &str = "characters";
    /// The panel's original prompt.
    pub const PROMPT: &str = "prompt";
    /// Names of entities matched in the panel.
    pub const ENTITIES: &str = "entities";
    /// `[{entity, attribute, observed, expected}]` awaiting verification.
    pub const CANDIDATES: &str = "candidates";
    pub const INSTRUCTION: &str = "instruction";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ResponseSchema {
    #[serde(rename = "entity-match")]
    EntityMatch,
    #[serde(rename = "mismatch-detect")]
    MismatchDetect,
    #[serde(rename = "verify")]
    Verify,
    #[serde(rename = "correction")]
    Correction,
}

impl ResponseSchema {
    pub const ALL: [ResponseSchema; 4] = [
        ResponseSchema::EntityMatch,
        ResponseSchema::MismatchDetect,
        ResponseSchema::Verify,
        ResponseSchema::Correction,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            ResponseSchema::EntityMatch => "entity-match",
            ResponseSchema::MismatchDetect => "mismatch-detect",
            ResponseSchema::Verify => "verify",
            ResponseSchema::Correction => "correction",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.tag() == tag)
    }

    /// JSON schema sent to servers that support constrained decoding.
    pub fn json_schema(self) -> Value {
        let s = json!({"type": "string"});
        let b = json!({"type": "boolean"});
        match self {
            ResponseSchema::EntityMatch => json!({
                "type": "object",
                "required": ["matches"],
                "properties": {"matches": {"type": "array", "items": {
                    "type": "object",
                    "required": ["entity", "matched", "basis"],
                    "properties": {"entity": s, "matched": b, "basis": {"type": "array", "items": s}}
                }}}
            }),
            ResponseSchema::MismatchDetect => json!({
                "type": "object",
                "required": ["mismatches"],
                "properties": {"mismatches": {"type": "array", "items": {
                    "type": "object",
                    "required": ["entity", "attribute", "observed", "expected", "intentional"],
                    "properties": {"entity": s, "attribute": s, "observed": s, "expected": s, "intentional": b}
                }}}
            }),
            ResponseSchema::Verify => json!({
                "type": "object",
                "required": ["verdicts"],
                "properties": {"verdicts": {"type": "array", "items": {
                    "type": "object",
                    "required": ["index", "contextually_appropriate", "visible"],
                    "properties": {"index": {"type": "integer", "minimum": 0}, "contextually_appropriate": b, "visible": b}
                }}}
            }),
            ResponseSchema::Correction => json!({
                "type": "object",
                "required": ["edits"],
                "properties": {"edits": {"type": "array", "items": {
                    "type": "object",
                    "required": ["entity", "attribute", "value"],
                    "properties": {"entity": s, "attribute": s, "value": s}
                }}}
            }),
        }
    }

    /// Parses raw model text and checks it against this schema.
    pub fn validate(self, raw: &str) -> Result<Value, BackendError> {
        let fail = |reason: String| BackendError::UnparseableAnswer {
            schema: self.tag().to_owned(),
            reason,
            raw: raw.to_owned(),
        };
        let value: Value =
            serde_json::from_str(strip_fences(raw)).map_err(|e| fail(e.to_string()))?;
        let shape = match self {
            ResponseSchema::EntityMatch => check::<EntityMatchAnswer>(&value),
            ResponseSchema::MismatchDetect => check::<MismatchAnswer>(&value),
            ResponseSchema::Verify => check::<VerifyAnswer>(&value),
            ResponseSchema::Correction => check::<CorrectionAnswer>(&value),
        };
        shape.map_err(fail)?;
        Ok(value)
    }
}

fn check<T: DeserializeOwned>(value: &Value) -> Result<(), String> {
    T::deserialize(value).map(|_| ()).map_err(|e| e.to_string())
}

fn strip_fences(raw: &str) -> &str {
    let t = raw.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    let rest = rest.strip_prefix("json").unwrap_or(rest);
    rest.strip_suffix("```").unwrap_or(rest).trim()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityMatchAnswer {
    pub matches: Vec<EntityMatchItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityMatchItem {
    pub entity: String,
    pub matched: bool,
    pub basis: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MismatchAnswer {
    pub mismatches: Vec<MismatchItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MismatchItem {
    pub entity: String,
    pub attribute: String,
    pub observed: String,
    pub expected: String,
    pub intentional: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyAnswer {
    pub verdicts: Vec<VerifyItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyItem {
    pub index: usize,
    pub contextually_appropriate: bool,
    pub visible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionAnswer {
    pub edits: Vec<CorrectionEdit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionEdit {
    pub entity: String,
    pub attribute: String,
    pub value: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prose_is_unparseable() {
        let err = ResponseSchema::EntityMatch
            .validate("The girl looks the same in both images.")
            .unwrap_err();
        match err {
            BackendError::UnparseableAnswer { schema, raw, .. } => {
                assert_eq!(schema, "entity-match");
                assert!(raw.starts_with("The girl"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_shape_is_unparseable() {
        assert!(ResponseSchema::Verify.validate(r#"{"verdicts":[{"index":0}]}"#).is_err());
        assert!(ResponseSchema::Correction.validate(r#"{"edits":"none"}"#).is_err());
    }

    #[test]
    fn fenced_json_accepted() {
        let raw = "```json\n{\"matches\": []}\n```";
        assert_eq!(
            ResponseSchema::EntityMatch.validate(raw).unwrap(),
            json!({"matches": []})
        );
    }

    #[test]
    fn tags_round_trip() {
        for s in ResponseSchema::ALL {
            assert_eq!(ResponseSchema::from_tag(s.tag()), Some(s));
            assert_eq!(serde_json::to_value(s).unwrap(), json!(s.tag()));
        }
    }
}
