use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::ResponseSchema;
use crate::schema::StoryScript;

/// A character as the mock renderer knows it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntitySpec {
    pub category: String,
    /// Extra words that make a prompt mention this entity. The entity's key
    /// and category always count.
    #[serde(default)]
    pub aliases: Vec<String>,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
    #[serde(default)]
    pub bbox: Option<[u32; 4]>,
}

impl EntitySpec {
    pub fn mention_words(&self, name: &str) -> Vec<String> {
        let mut words = vec![name.to_lowercase(), self.category.to_lowercase()];
        words.extend(self.aliases.iter().map(|a| a.to_lowercase()));
        words.retain(|w| !w.is_empty());
        words
    }
}

/// How the mock editor reacts to an edit request on one panel.
///
/// Lower conditioning scales mean stronger edits: the edit only lands when
/// `scale <= apply_max_scale`, and overshoots (scrambling unrelated
/// attributes) when `scale < over_edit_below`. A scale of 1.0 never changes
/// anything.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditPolicy {
    #[serde(default = "EditPolicy::default_apply_max")]
    pub apply_max_scale: f64,
    #[serde(default)]
    pub over_edit_below: f64,
    /// Apply at most this many instructions per call.
    #[serde(default)]
    pub max_changes: Option<usize>,
    #[serde(default = "EditPolicy::default_probability")]
    pub apply_probability: f64,
}

impl EditPolicy {
    fn default_apply_max() -> f64 {
        0.5
    }
    fn default_probability() -> f64 {
        1.0
    }
}

impl Default for EditPolicy {
    fn default() -> Self {
        Self {
            apply_max_scale: Self::default_apply_max(),
            over_edit_below: 0.0,
            max_changes: None,
            apply_probability: Self::default_probability(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PanelSpec {
    /// Attribute drift rendered into the initial panel: entity → attr → value.
    #[serde(default)]
    pub overrides: BTreeMap<String, BTreeMap<String, String>>,
    #[serde(default)]
    pub absent: BTreeSet<String>,
    /// `entity.attribute` pairs that are hidden in this panel.
    #[serde(default)]
    pub occluded: BTreeSet<String>,
    #[serde(default)]
    pub edit: Option<EditPolicy>,
}

/// Canned VLM answer, matched on schema and optionally panel / audit number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CannedAnswer {
    pub schema: ResponseSchema,
    #[serde(default)]
    pub panel: Option<usize>,
    #[serde(default)]
    pub iteration: Option<u64>,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureSpec {
    #[serde(default)]
    pub reference: bool,
    #[serde(default)]
    pub generate_panels: BTreeSet<usize>,
    #[serde(default)]
    pub edit_panels: BTreeSet<usize>,
    #[serde(default)]
    pub embed: bool,
    #[serde(default)]
    pub segment: bool,
    /// Every VLM call answers with prose.
    #[serde(default)]
    pub vlm_prose: bool,
}

/// Deterministic script for the mock backends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    #[serde(default = "Scenario::default_size")]
    pub width: u32,
    #[serde(default = "Scenario::default_size")]
    pub height: u32,
    #[serde(default = "Scenario::default_dim")]
    pub embedding_dim: usize,
    #[serde(default)]
    pub entities: BTreeMap<String, EntitySpec>,
    #[serde(default)]
    pub panels: BTreeMap<usize, PanelSpec>,
    #[serde(default)]
    pub edit_policy: EditPolicy,
    /// Explicit embeddings keyed by image tag; untagged images use the
    /// fact-hash rule.
    #[serde(default)]
    pub embeddings: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    pub vlm: Vec<CannedAnswer>,
    #[serde(default)]
    pub failures: FailureSpec,
    /// `entity.attribute` fixes the verifier deems contextually inappropriate.
    #[serde(default)]
    pub inappropriate: BTreeSet<String>,
}

impl Scenario {
    fn default_size() -> u32 {
        64
    }
    fn default_dim() -> usize {
        64
    }

    pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io(e.to_string()))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Scenario, ScenarioError> {
        let s: Scenario =
            serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        let problems = s.problems();
        if problems.is_empty() {
            Ok(s)
        } else {
            Err(ScenarioError::Invalid(problems))
        }
    }

    /// Fills in an entity for every script character the scenario does not
    /// already describe.
    pub fn with_script_defaults(mut self, script: &StoryScript) -> Scenario {
        for c in &script.characters {
            self.entities.entry(c.name.clone()).or_insert_with(|| EntitySpec {
                category: c.category.clone(),
                aliases: Vec::new(),
                attributes: BTreeMap::from([("look".to_string(), c.description.clone())]),
                bbox: None,
            });
        }
        self
    }

    pub fn edit_policy_for(&self, panel: Option<usize>) -> &EditPolicy {
        panel
            .and_then(|p| self.panels.get(&p))
            .and_then(|p| p.edit.as_ref())
            .unwrap_or(&self.edit_policy)
    }

    /// Everything wrong with the scenario, empty when valid.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.width == 0 || self.height == 0 {
            out.push("width and height must be positive".into());
        }
        if self.embedding_dim == 0 {
            out.push("embedding_dim must be positive".into());
        }
        for (name, e) in &self.entities {
            if let Some([x0, y0, x1, y1]) = e.bbox {
                if x0 >= x1 || y0 >= y1 || x1 > self.width || y1 > self.height {
                    out.push(format!("entity `{name}` has a bbox outside the frame"));
                }
            }
        }
        let mut policies = vec![("default".to_string(), &self.edit_policy)];
        for (i, p) in &self.panels {
            if *i == 0 {
                out.push("panel indices are 1-based".into());
            }
            for e in p.overrides.keys().chain(p.absent.iter()) {
                if !self.entities.is_empty() && !self.entities.contains_key(e) {
                    out.push(format!("panel {i} refers to unknown entity `{e}`"));
                }
            }
            for k in &p.occluded {
                if !k.contains('.') {
                    out.push(format!("panel {i} occlusion `{k}` must be `entity.attribute`"));
                }
            }
            if let Some(pol) = &p.edit {
                policies.push((format!("panel {i}"), pol));
            }
        }
        for (label, pol) in policies {
            if !(0.0..=1.0).contains(&pol.apply_max_scale) || !(0.0..=1.0).contains(&pol.over_edit_below) {
                out.push(format!("{label} edit policy scales must lie in [0, 1]"));
            }
            if !(0.0..=1.0).contains(&pol.apply_probability) {
                out.push(format!("{label} apply_probability must lie in [0, 1]"));
            }
        }
        for (tag, v) in &self.embeddings {
            if v.len() != self.embedding_dim {
                out.push(format!(
                    "embedding `{tag}` has {} components, embedding_dim is {}",
                    v.len(),
                    self.embedding_dim
                ));
            }
            if v.iter().any(|x| !x.is_finite()) {
                out.push(format!("embedding `{tag}` has non-finite components"));
            }
        }
        out
    }
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            name: String::new(),
            width: Self::default_size(),
            height: Self::default_size(),
            embedding_dim: Self::default_dim(),
            entities: BTreeMap::new(),
            panels: BTreeMap::new(),
            edit_policy: EditPolicy::default(),
            embeddings: BTreeMap::new(),
            vlm: Vec::new(),
            failures: FailureSpec::default(),
            inappropriate: BTreeSet::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot read scenario: {0}")]
    Io(String),
    #[error("cannot parse scenario: {0}")]
    Parse(String),
    #[error("invalid scenario: {}", .0.join("; "))]
    Invalid(Vec<String>),
}
