//! Story-script documents: character sheet plus ordered scene prompts.
//!
//! The on-disk format is a JSON object with a `"Main Characters"` array and a
//! `"Story"` array. Keys the engine does not understand are carried in an
//! `extra` map on every level so a parse/serialize cycle is lossless.

use std::collections::HashSet;

use serde_json::{Map, Value};
use thiserror::Error;

pub const KEY_CHARACTERS: &str = "Main Characters";
pub const KEY_NAME: &str = "Name";
pub const KEY_DESCRIPTION: &str = "Description";
pub const KEY_CATEGORY: &str = "Category";
pub const KEY_STORY: &str = "Story";
pub const KEY_IMAGE_PROMPT: &str = "Image_Prompt";
pub const KEY_LOCATION: &str = "Location_Description";

/// Separator used when merging character descriptions into one prompt.
pub const MERGE_JOIN: &str = " and ";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchemaError {
    #[error("malformed JSON: {0}")]
    MalformedJson(String),
    #[error("missing field `{0}`")]
    MissingField(String),
    #[error("story has no scenes")]
    EmptyStory,
    #[error("invalid script: {0}")]
    InvalidScript(String),
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CharacterSpec {
    pub name: String,
    pub description: String,
    pub category: String,
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SceneSpec {
    pub image_prompt: String,
    pub location_description: String,
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    pub extra: Map<String, Value>,
}

/// Serializes in the story-file format, so a script embedded in any other
/// document (run state, API bodies) reads like the file it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct StoryScript {
    pub characters: Vec<CharacterSpec>,
    pub scenes: Vec<SceneSpec>,
    pub extra: Map<String, Value>,
}

impl serde::Serialize for StoryScript {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_value().serialize(s)
    }
}

impl<'de> serde::Deserialize<'de> for StoryScript {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(d)?;
        StoryScript::from_value(&value).map_err(serde::de::Error::custom)
    }
}

/// How forgiving the parser is toward hand-edited near-JSON.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    #[default]
    Strict,
    /// Repairs trailing commas, missing commas between values and a doubled
    /// opening brace before handing the text to the JSON parser.
    Lenient,
}

impl StoryScript {
    pub fn panel_count(&self) -> usize {
        self.scenes.len()
    }

    /// Prompt for panel `index` (1-based).
    pub fn prompt(&self, index: usize) -> Option<&str> {
        index
            .checked_sub(1)
            .and_then(|i| self.scenes.get(i))
            .map(|s| s.image_prompt.as_str())
    }

    pub fn character(&self, name: &str) -> Option<&CharacterSpec> {
        self.characters.iter().find(|c| c.name == name)
    }

    pub fn validate(&self) -> Result<(), SchemaError> {
        if self.scenes.is_empty() {
            return Err(SchemaError::EmptyStory);
        }
        let mut seen = HashSet::new();
        for (i, c) in self.characters.iter().enumerate() {
            if c.name.trim().is_empty() {
                return Err(SchemaError::InvalidScript(format!(
                    "{KEY_CHARACTERS}[{i}].{KEY_NAME} is empty"
                )));
            }
            if !seen.insert(c.name.as_str()) {
                return Err(SchemaError::InvalidScript(format!(
                    "duplicate character name `{}`",
                    c.name
                )));
            }
            if c.description.trim().is_empty() {
                return Err(SchemaError::InvalidScript(format!(
                    "{KEY_CHARACTERS}[{i}].{KEY_DESCRIPTION} is empty"
                )));
            }
        }
        for (i, s) in self.scenes.iter().enumerate() {
            if s.image_prompt.trim().is_empty() {
                return Err(SchemaError::InvalidScript(format!(
                    "{KEY_STORY}[{i}].{KEY_IMAGE_PROMPT} is empty"
                )));
            }
        }
        Ok(())
    }

    pub fn to_value(&self) -> Value {
        let mut root = Map::new();
        root.insert(
            KEY_CHARACTERS.into(),
            Value::Array(
                self.characters
                    .iter()
                    .map(|c| {
                        let mut m = Map::new();
                        m.insert(KEY_NAME.into(), c.name.clone().into());
                        m.insert(KEY_DESCRIPTION.into(), c.description.clone().into());
                        m.insert(KEY_CATEGORY.into(), c.category.clone().into());
                        m.extend(c.extra.clone());
                        Value::Object(m)
                    })
                    .collect(),
            ),
        );
        root.insert(
            KEY_STORY.into(),
            Value::Array(
                self.scenes
                    .iter()
                    .map(|s| {
                        let mut m = Map::new();
                        m.insert(KEY_IMAGE_PROMPT.into(), s.image_prompt.clone().into());
                        m.insert(KEY_LOCATION.into(), s.location_description.clone().into());
                        m.extend(s.extra.clone());
                        Value::Object(m)
                    })
                    .collect(),
            ),
        );
        root.extend(self.extra.clone());
        Value::Object(root)
    }

    pub fn from_value(value: &Value) -> Result<Self, SchemaError> {
        let root = value
            .as_object()
            .ok_or_else(|| SchemaError::InvalidScript("document root must be an object".into()))?;
        let chars = array_field(root, KEY_CHARACTERS, "")?;
        let story = array_field(root, KEY_STORY, "")?;

        let mut characters = Vec::with_capacity(chars.len());
        for (i, c) in chars.iter().enumerate() {
            let path = format!("{KEY_CHARACTERS}[{i}]");
            let obj = c
                .as_object()
                .ok_or_else(|| SchemaError::InvalidScript(format!("{path} must be an object")))?;
            characters.push(CharacterSpec {
                name: string_field(obj, KEY_NAME, &path)?,
                description: string_field(obj, KEY_DESCRIPTION, &path)?,
                category: string_field(obj, KEY_CATEGORY, &path)?,
                extra: rest(obj, &[KEY_NAME, KEY_DESCRIPTION, KEY_CATEGORY]),
            });
        }

        let mut scenes = Vec::with_capacity(story.len());
        for (i, s) in story.iter().enumerate() {
            let path = format!("{KEY_STORY}[{i}]");
            let obj = s
                .as_object()
                .ok_or_else(|| SchemaError::InvalidScript(format!("{path} must be an object")))?;
            scenes.push(SceneSpec {
                image_prompt: string_field(obj, KEY_IMAGE_PROMPT, &path)?,
                location_description: string_field(obj, KEY_LOCATION, &path)?,
                extra: rest(obj, &[KEY_IMAGE_PROMPT, KEY_LOCATION]),
            });
        }

        let script = StoryScript {
            characters,
            scenes,
            extra: rest(root, &[KEY_CHARACTERS, KEY_STORY]),
        };
        script.validate()?;
        Ok(script)
    }
}

fn array_field<'a>(
    obj: &'a Map<String, Value>,
    key: &str,
    prefix: &str,
) -> Result<&'a Vec<Value>, SchemaError> {
    let path = format!("{prefix}{key}");
    obj.get(key)
        .ok_or_else(|| SchemaError::MissingField(path.clone()))?
        .as_array()
        .ok_or_else(|| SchemaError::InvalidScript(format!("{path} must be an array")))
}

fn string_field(obj: &Map<String, Value>, key: &str, prefix: &str) -> Result<String, SchemaError> {
    let path = format!("{prefix}.{key}");
    obj.get(key)
        .ok_or_else(|| SchemaError::MissingField(path.clone()))?
        .as_str()
        .map(str::to_owned)
        .ok_or_else(|| SchemaError::InvalidScript(format!("{path} must be a string")))
}

fn rest(obj: &Map<String, Value>, known: &[&str]) -> Map<String, Value> {
    obj.iter()
        .filter(|(k, _)| !known.contains(&k.as_str()))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}

pub fn parse_story_script(text: &str) -> Result<StoryScript, SchemaError> {
    parse_story_script_with(text, ParseMode::Strict)
}

pub fn parse_story_script_with(text: &str, mode: ParseMode) -> Result<StoryScript, SchemaError> {
    let value: Value = match mode {
        ParseMode::Strict => serde_json::from_str(text),
        ParseMode::Lenient => serde_json::from_str(&repair_near_json(text)),
    }
    .map_err(|e| SchemaError::MalformedJson(e.to_string()))?;
    StoryScript::from_value(&value)
}

/// Parses raw bytes; invalid UTF-8 is reported as malformed JSON.
pub fn parse_story_bytes(bytes: &[u8], mode: ParseMode) -> Result<StoryScript, SchemaError> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| SchemaError::MalformedJson(format!("invalid UTF-8: {e}")))?;
    parse_story_script_with(text, mode)
}

/// Canonical encoding: pretty-printed JSON, two-space indent, schema key order.
pub fn serialize_story_script(script: &StoryScript) -> String {
    serde_json::to_string_pretty(&script.to_value()).expect("script values always serialize")
}

/// All character descriptions in declaration order, joined with `" and "`.
pub fn merged_character_prompt(script: &StoryScript) -> Result<String, SchemaError> {
    if script.characters.is_empty() {
        return Err(SchemaError::InvalidScript(
            "cannot merge descriptions of a script without characters".into(),
        ));
    }
    Ok(script
        .characters
        .iter()
        .map(|c| c.description.trim())
        .collect::<Vec<_>>()
        .join(MERGE_JOIN))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tok<'a> {
    Punct(u8),
    Str(&'a str),
    Scalar(&'a str),
}

fn tokenize(text: &str) -> Vec<(usize, usize, Tok<'_>)> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        match b {
            b' ' | b'\t' | b'\n' | b'\r' => i += 1,
            b'{' | b'}' | b'[' | b']' | b':' | b',' => {
                out.push((i, i + 1, Tok::Punct(b)));
                i += 1;
            }
            b'"' => {
                let start = i;
                i += 1;
                while i < bytes.len() && bytes[i] != b'"' {
                    if bytes[i] == b'\\' {
                        i += 1;
                    }
                    i += 1;
                }
                let end = (i + 1).min(bytes.len());
                out.push((start, end, Tok::Str(&text[start..end])));
                i = end;
            }
            _ => {
                let start = i;
                while i < bytes.len()
                    && !matches!(
                        bytes[i],
                        b' ' | b'\t' | b'\n' | b'\r' | b'{' | b'}' | b'[' | b']' | b':' | b',' | b'"'
                    )
                {
                    i += 1;
                }
                out.push((start, i, Tok::Scalar(&text[start..i])));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Expect {
    KeyOrEnd,
    Key,
    Colon,
    Value,
    CommaOrEnd,
    ArrValueOrEnd,
}

/// Fixes the small irregularities found in hand-written story scripts:
/// trailing commas, a missing comma between two values, and a doubled `{`
/// where an object key is expected. Everything else passes through
/// untouched so the JSON parser still reports real errors.
pub fn repair_near_json(text: &str) -> String {
    let toks = tokenize(text);
    let mut out = String::with_capacity(text.len() + 8);
    let mut cursor = 0usize;
    // (is_object, state)
    let mut stack: Vec<(bool, Expect)> = Vec::new();

    let is_value_start = |t: &Tok<'_>| {
        matches!(t, Tok::Str(_) | Tok::Scalar(_) | Tok::Punct(b'{') | Tok::Punct(b'['))
    };

    for (k, &(start, end, tok)) in toks.iter().enumerate() {
        let top = stack.last().copied();
        let mut drop = false;
        let mut insert_comma = false;

        match (top, tok) {
            (_, Tok::Punct(b',')) => {
                let next = toks.get(k + 1).map(|t| t.2);
                if matches!(next, Some(Tok::Punct(b'}')) | Some(Tok::Punct(b']')) | None) {
                    drop = true;
                }
            }
            (Some((true, Expect::KeyOrEnd)), Tok::Punct(b'{'))
            | (Some((true, Expect::Key)), Tok::Punct(b'{')) => drop = true,
            (Some((true, Expect::CommaOrEnd)), Tok::Str(_)) => insert_comma = true,
            (Some((false, Expect::CommaOrEnd)), t) if is_value_start(&t) => insert_comma = true,
            _ => {}
        }

        out.push_str(&text[cursor..start]);
        cursor = end;
        if drop {
            continue;
        }
        if insert_comma {
            out.push(',');
            if let Some(top) = stack.last_mut() {
                top.1 = if top.0 { Expect::Key } else { Expect::Value };
            }
        }
        out.push_str(&text[start..end]);

        // Advance the container state machine.
        let value_done = |stack: &mut Vec<(bool, Expect)>| {
            if let Some(top) = stack.last_mut() {
                top.1 = Expect::CommaOrEnd;
            }
        };
        match tok {
            Tok::Punct(b'{') => stack.push((true, Expect::KeyOrEnd)),
            Tok::Punct(b'[') => stack.push((false, Expect::ArrValueOrEnd)),
            Tok::Punct(b'}') | Tok::Punct(b']') => {
                stack.pop();
                value_done(&mut stack);
            }
            Tok::Punct(b':') => {
                if let Some(top) = stack.last_mut() {
                    top.1 = Expect::Value;
                }
            }
            Tok::Punct(b',') => {
                if let Some(top) = stack.last_mut() {
                    top.1 = if top.0 { Expect::Key } else { Expect::Value };
                }
            }
            Tok::Punct(_) => {}
            Tok::Str(_) | Tok::Scalar(_) => match stack.last_mut() {
                Some((true, state @ (Expect::KeyOrEnd | Expect::Key))) => *state = Expect::Colon,
                _ => value_done(&mut stack),
            },
        }
    }
    out.push_str(&text[cursor..]);
    out
}
