//! Deterministic, scenario-driven implementations of every backend.
//!
//! Images are [`MockImage`] containers, so "visual" properties (which
//! attributes a character has, what is occluded, where an entity sits) are
//! exact. The VLM mock answers either from canned scenario entries or by
//! reading the attached mock images; all other mocks are pure functions of
//! their request plus the scenario. Nothing depends on call order, which
//! keeps runs reproducible across restarts.

mod image;
mod scenario;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};

use regex::Regex;
use serde_json::Value;
use sha2::{Digest, Sha256};

pub use self::image::{fact_embedding, MockEntity, MockImage, MOCK_MEDIA_TYPE};
pub use self::scenario::{
    CannedAnswer, EditPolicy, EntitySpec, FailureSpec, PanelSpec, Scenario, ScenarioError,
};

use super::answers::{
    meta, CorrectionAnswer, CorrectionEdit, EntityMatchAnswer, EntityMatchItem, MismatchAnswer,
    MismatchItem, VerifyAnswer, VerifyItem,
};
use super::{
    BackendError, BackendSuite, EditRequest, EmbedderHandle, GenerateRequest, ImageEditor,
    ImageEmbedder, ImageGenerator, ImageSegmenter, PerceptualMetric, ResponseSchema,
    VisionLanguageModel, VlmQuery,
};
use crate::image::{ImageData, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Service {
    Vlm,
    Generator,
    Editor,
    Embedder,
    Segmenter,
    Perceptual,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordedCall {
    pub service: Service,
    pub panel: Option<usize>,
    /// Prompt, schema tag or label, depending on the service.
    pub detail: String,
    pub scale: Option<f64>,
}

/// Shared record of every call made to the mocks.
#[derive(Debug, Clone, Default)]
pub struct CallLog {
    calls: Arc<Mutex<Vec<RecordedCall>>>,
}

impl CallLog {
    fn push(&self, call: RecordedCall) {
        self.calls.lock().expect("call log poisoned").push(call);
    }

    pub fn calls(&self) -> Vec<RecordedCall> {
        self.calls.lock().expect("call log poisoned").clone()
    }

    pub fn count(&self, service: Service) -> usize {
        self.calls
            .lock()
            .expect("call log poisoned")
            .iter()
            .filter(|c| c.service == service)
            .count()
    }

    pub fn clear(&self) {
        self.calls.lock().expect("call log poisoned").clear();
    }
}

/// Factory for the full mock suite sharing one scenario and call log.
#[derive(Clone)]
pub struct MockBackends {
    world: Arc<World>,
    log: CallLog,
}

struct World {
    scenario: Scenario,
}

impl MockBackends {
    pub fn new(scenario: Scenario) -> Self {
        Self {
            world: Arc::new(World { scenario }),
            log: CallLog::default(),
        }
    }

    pub fn scenario(&self) -> &Scenario {
        &self.world.scenario
    }

    pub fn log(&self) -> &CallLog {
        &self.log
    }

    pub fn suite(&self) -> BackendSuite {
        let part = || MockPart {
            world: self.world.clone(),
            log: self.log.clone(),
        };
        BackendSuite {
            vlm: Arc::new(MockVlm(part())),
            generator: Arc::new(MockGenerator(part())),
            editor: Arc::new(MockEditor(part())),
            embedder: EmbedderHandle::new(
                Arc::new(MockEmbedder(part())),
                self.world.scenario.embedding_dim,
            ),
            segmenter: Arc::new(MockSegmenter(part())),
        }
    }

    pub fn perceptual(&self) -> Arc<dyn PerceptualMetric> {
        Arc::new(MockPerceptual(MockPart {
            world: self.world.clone(),
            log: self.log.clone(),
        }))
    }
}

#[derive(Clone)]
struct MockPart {
    world: Arc<World>,
    log: CallLog,
}

impl MockPart {
    fn scenario(&self) -> &Scenario {
        &self.world.scenario
    }

    fn record(&self, service: Service, panel: Option<usize>, detail: &str, scale: Option<f64>) {
        self.log.push(RecordedCall {
            service,
            panel,
            detail: detail.to_owned(),
            scale,
        });
    }

    fn blank(&self, tag: String, seed: u64) -> MockImage {
        MockImage {
            width: self.scenario().width,
            height: self.scenario().height,
            tag,
            seed,
            ..Default::default()
        }
    }

    /// Catalog entities mentioned in `prompt`, in their baseline look.
    fn mentioned(&self, prompt: &str) -> BTreeMap<String, MockEntity> {
        let mut out = BTreeMap::new();
        for (name, spec) in &self.scenario().entities {
            if spec.mention_words(name).iter().any(|w| contains_word(prompt, w)) {
                out.insert(name.clone(), self.baseline(name, spec));
            }
        }
        out
    }

    fn baseline(&self, _name: &str, spec: &EntitySpec) -> MockEntity {
        let mut attributes = spec.attributes.clone();
        attributes.insert("category".into(), spec.category.clone());
        MockEntity {
            attributes,
            bbox: spec.bbox,
        }
    }

    /// Entity in `img` that a free-text descriptor refers to.
    fn resolve(&self, img: &MockImage, descriptor: &str) -> Option<String> {
        let descriptor = descriptor.to_lowercase();
        img.entities.iter().find_map(|(name, e)| {
            let mut words = match self.scenario().entities.get(name) {
                Some(spec) => spec.mention_words(name),
                None => vec![name.to_lowercase()],
            };
            if let Some(cat) = e.attributes.get("category") {
                words.push(cat.to_lowercase());
            }
            words
                .iter()
                .any(|w| descriptor == *w || contains_word(&descriptor, w))
                .then(|| name.clone())
        })
    }
}

fn contains_word(text: &str, word: &str) -> bool {
    if word.is_empty() {
        return false;
    }
    let pattern = format!(r"(?i)\b{}\b", regex::escape(word));
    Regex::new(&pattern).map(|r| r.is_match(text)).unwrap_or(false)
}

/// Explicit `{entity.attribute=value}` tokens in a prompt.
pub fn prompt_tokens(prompt: &str) -> Vec<(String, String, String)> {
    let re = Regex::new(r"\{([^{}.=]+)\.([^{}=]+)=([^{}]+)\}").expect("static regex");
    re.captures_iter(prompt)
        .map(|c| (c[1].trim().to_owned(), c[2].trim().to_owned(), c[3].trim().to_owned()))
        .collect()
}

fn apply_tokens(img: &mut MockImage, prompt: &str) {
    for (e, k, v) in prompt_tokens(prompt) {
        img.entities.entry(e).or_default().attributes.insert(k, v);
    }
}

fn split_tag(tag: &str) -> (String, u32) {
    match tag.rsplit_once('.') {
        Some((base, v)) if v.chars().all(|c| c.is_ascii_digit()) && !v.is_empty() => {
            (base.to_owned(), v.parse().unwrap_or(0))
        }
        _ => (tag.to_owned(), 0),
    }
}

fn panel_of_tag(tag: &str) -> Option<usize> {
    split_tag(tag).0.strip_prefix('p')?.parse().ok()
}

fn unit_draw(parts: &[&[u8]]) -> f64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let d = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&d[..8]);
    (u64::from_le_bytes(b) >> 11) as f64 / (1u64 << 53) as f64
}

struct MockGenerator(MockPart);

impl ImageGenerator for MockGenerator {
    fn generate(&self, req: &GenerateRequest) -> Result<ImageData, BackendError> {
        let part = &self.0;
        part.record(Service::Generator, req.panel_index, &req.prompt, None);
        let scenario = part.scenario();

        let Some(index) = req.panel_index else {
            if scenario.failures.reference {
                return Err(BackendError::Unavailable("scripted reference failure".into()));
            }
            let mut img = part.blank("ref".into(), req.seed);
            img.entities = part.mentioned(&req.prompt);
            apply_tokens(&mut img, &req.prompt);
            return Ok(img.encode());
        };

        if scenario.failures.generate_panels.contains(&index) {
            return Err(BackendError::Unavailable(format!(
                "scripted generator failure for panel {index}"
            )));
        }
        let mut img = part.blank(format!("p{index}"), req.seed);
        let inherited = req.reference.as_ref().and_then(MockImage::decode);
        img.entities = match inherited {
            Some(r) => r.entities,
            None => BTreeMap::new(),
        };
        for (name, e) in part.mentioned(&req.prompt) {
            img.entities.entry(name).or_insert(e);
        }
        if let Some(spec) = scenario.panels.get(&index) {
            for name in &spec.absent {
                img.entities.remove(name);
            }
            for (name, attrs) in &spec.overrides {
                let e = img.entities.entry(name.clone()).or_insert_with(|| {
                    scenario
                        .entities
                        .get(name)
                        .map(|s| part.baseline(name, s))
                        .unwrap_or_default()
                });
                e.attributes.extend(attrs.clone());
            }
            img.occluded = spec.occluded.clone();
        }
        apply_tokens(&mut img, &req.prompt);
        img.background.insert("setting".into(), req.prompt.clone());
        Ok(img.encode())
    }
}

struct MockEditor(MockPart);

impl MockEditor {
    fn instructions(prompt: &str) -> Vec<(String, String, String)> {
        let re = Regex::new(r"(?i)change the (.+?) of the (.+?) to (.+?)\.(?:\s+|$)")
            .expect("static regex");
        re.captures_iter(prompt)
            .map(|c| (c[1].to_owned(), c[2].to_owned(), c[3].to_owned()))
            .collect()
    }
}

impl ImageEditor for MockEditor {
    fn edit(&self, req: &EditRequest) -> Result<ImageData, BackendError> {
        let part = &self.0;
        let decoded = MockImage::decode(&req.image);
        let panel = decoded.as_ref().and_then(|m| panel_of_tag(&m.tag));
        part.record(Service::Editor, panel, &req.prompt, Some(req.conditioning_scale));

        if panel.is_some_and(|p| part.scenario().failures.edit_panels.contains(&p)) {
            return Err(BackendError::Unavailable("scripted editor failure".into()));
        }
        let Some(src) = decoded else {
            return Ok(req.image.clone());
        };
        let policy = part.scenario().edit_policy_for(panel);
        if req.conditioning_scale >= 1.0 || req.conditioning_scale > policy.apply_max_scale {
            return Ok(req.image.clone());
        }
        if policy.apply_probability < 1.0 {
            let u = unit_draw(&[
                &req.seed.to_le_bytes(),
                req.image.hash().0.as_slice(),
                req.prompt.as_bytes(),
                &req.conditioning_scale.to_bits().to_le_bytes(),
            ]);
            if u >= policy.apply_probability {
                return Ok(req.image.clone());
            }
        }

        let mut out = src.clone();
        let mut touched: BTreeSet<(String, String)> = BTreeSet::new();
        let limit = policy.max_changes.unwrap_or(usize::MAX);
        for (attr, descriptor, value) in Self::instructions(&req.prompt).into_iter().take(limit) {
            let Some(name) = part.resolve(&out, &descriptor) else {
                continue;
            };
            let entity = out.entities.get_mut(&name).expect("resolved entity exists");
            entity.attributes.insert(attr.clone(), value);
            out.occluded.remove(&format!("{name}.{attr}"));
            touched.insert((name, attr));
        }
        if req.conditioning_scale < policy.over_edit_below {
            for (name, e) in out.entities.iter_mut() {
                for (k, v) in e.attributes.iter_mut() {
                    if !touched.contains(&(name.clone(), k.clone())) {
                        v.push_str(" (warped)");
                    }
                }
            }
            for v in out.background.values_mut() {
                v.push_str(" (warped)");
            }
            out.distorted = true;
        }
        if out == src {
            return Ok(req.image.clone());
        }
        let (base, version) = split_tag(&src.tag);
        out.tag = format!("{base}.{}", version + 1);
        Ok(out.encode())
    }
}

struct MockEmbedder(MockPart);

impl ImageEmbedder for MockEmbedder {
    fn embed(&self, image: &ImageData) -> Result<Vec<f64>, BackendError> {
        let part = &self.0;
        let decoded = MockImage::decode(image);
        part.record(
            Service::Embedder,
            decoded.as_ref().and_then(|m| panel_of_tag(&m.tag)),
            decoded.as_ref().map(|m| m.tag.as_str()).unwrap_or(""),
            None,
        );
        let scenario = part.scenario();
        if scenario.failures.embed {
            return Err(BackendError::Unavailable("scripted embedder failure".into()));
        }
        let dim = scenario.embedding_dim;
        Ok(match decoded {
            Some(m) if !m.composited => match scenario.embeddings.get(&m.tag) {
                Some(v) => v.clone(),
                None => fact_embedding(&m, dim),
            },
            Some(m) => fact_embedding(&m, dim),
            None => {
                let mut m = part.blank(String::new(), 0);
                m.background.insert("bytes".into(), image.hash().to_hex());
                fact_embedding(&m, dim)
            }
        })
    }
}

struct MockSegmenter(MockPart);

impl ImageSegmenter for MockSegmenter {
    fn segment(&self, image: &ImageData, label: &str) -> Result<Mask, BackendError> {
        let part = &self.0;
        part.record(Service::Segmenter, None, label, None);
        if part.scenario().failures.segment {
            return Err(BackendError::Unavailable("scripted segmenter failure".into()));
        }
        match MockImage::decode(image) {
            Some(m) => Ok(match part.resolve(&m, label) {
                Some(name) => m.entity_mask(&name),
                None => Mask::empty(m.width, m.height),
            }),
            None => {
                let (w, h) = image.dimensions().ok_or_else(|| {
                    BackendError::Rejected("segmenter cannot decode image".into())
                })?;
                Ok(Mask::full(w, h))
            }
        }
    }
}

struct MockPerceptual(MockPart);

impl PerceptualMetric for MockPerceptual {
    /// Jaccard distance between the two images' fact sets.
    fn distance(&self, a: &ImageData, b: &ImageData) -> Result<f64, BackendError> {
        self.0.record(Service::Perceptual, None, "", None);
        let facts = |img: &ImageData| -> BTreeSet<(String, String, String)> {
            match MockImage::decode(img) {
                Some(m) => m.facts().into_iter().collect(),
                None => BTreeSet::from([("@bytes".into(), String::new(), img.hash().to_hex())]),
            }
        };
        let (fa, fb) = (facts(a), facts(b));
        let union = fa.union(&fb).count();
        if union == 0 {
            return Ok(0.0);
        }
        Ok(1.0 - fa.intersection(&fb).count() as f64 / union as f64)
    }
}

struct MockVlm(MockPart);

const PROSE: &str = "I am not able to compare these images with confidence.";

#[derive(serde::Deserialize)]
struct CharacterMeta {
    name: String,
    #[serde(default)]
    category: String,
}

#[derive(serde::Deserialize)]
struct CandidateMeta {
    entity: String,
    attribute: String,
}

impl MockVlm {
    fn canned(&self, query: &VlmQuery) -> Option<String> {
        let panel = query.panel_index();
        let iteration = query.metadata.get(meta::AUDIT_ITERATION).and_then(Value::as_u64);
        self.0
            .scenario()
            .vlm
            .iter()
            .filter(|c| c.schema == query.schema)
            .filter(|c| c.panel.is_none() || c.panel == panel)
            .filter(|c| c.iteration.is_none() || c.iteration == iteration)
            .max_by_key(|c| (c.panel.is_some(), c.iteration.is_some()))
            .map(|c| c.answer.clone())
    }

    fn simulate(&self, query: &VlmQuery) -> Option<Value> {
        let mut images = query.images().filter_map(MockImage::decode);
        let panel = images.next()?;
        let reference = images.next().unwrap_or_default();
        let md = &query.metadata;
        let answer = match query.schema {
            ResponseSchema::EntityMatch => {
                let chars: Vec<CharacterMeta> =
                    serde_json::from_value(md.get(meta::CHARACTERS)?.clone()).ok()?;
                let matches = chars
                    .iter()
                    .map(|c| match panel.entities.get(&c.name) {
                        None => EntityMatchItem {
                            entity: c.name.clone(),
                            matched: false,
                            basis: vec![],
                        },
                        Some(pe) => {
                            let mut basis: Vec<String> = reference
                                .entities
                                .get(&c.name)
                                .map(|re| {
                                    re.attributes
                                        .iter()
                                        .filter(|(k, v)| pe.attributes.get(*k) == Some(v))
                                        .map(|(_, v)| v.clone())
                                        .collect()
                                })
                                .unwrap_or_default();
                            if basis.is_empty() {
                                basis.push(if c.category.is_empty() { c.name.clone() } else { c.category.clone() });
                            }
                            EntityMatchItem {
                                entity: c.name.clone(),
                                matched: true,
                                basis,
                            }
                        }
                    })
                    .collect();
                serde_json::to_value(EntityMatchAnswer { matches })
            }
            ResponseSchema::MismatchDetect => {
                let prompt = md.get(meta::PROMPT).and_then(Value::as_str).unwrap_or("");
                let entities: Vec<String> =
                    serde_json::from_value(md.get(meta::ENTITIES)?.clone()).ok()?;
                let mut mismatches = Vec::new();
                for name in &entities {
                    let (Some(re), Some(pe)) = (reference.entities.get(name), panel.entities.get(name)) else {
                        continue;
                    };
                    for (k, expected) in &re.attributes {
                        let observed = pe.attributes.get(k).cloned();
                        if observed.as_ref() == Some(expected) {
                            continue;
                        }
                        let intentional = observed
                            .as_ref()
                            .is_some_and(|o| prompt.to_lowercase().contains(&o.to_lowercase()));
                        mismatches.push(MismatchItem {
                            entity: name.clone(),
                            attribute: k.clone(),
                            observed: observed.unwrap_or_else(|| "absent".into()),
                            expected: expected.clone(),
                            intentional,
                        });
                    }
                }
                serde_json::to_value(MismatchAnswer { mismatches })
            }
            ResponseSchema::Verify => {
                let cands: Vec<CandidateMeta> =
                    serde_json::from_value(md.get(meta::CANDIDATES)?.clone()).ok()?;
                let verdicts = cands
                    .iter()
                    .enumerate()
                    .map(|(index, c)| {
                        let key = format!("{}.{}", c.entity, c.attribute);
                        VerifyItem {
                            index,
                            contextually_appropriate: !self.0.scenario().inappropriate.contains(&key),
                            visible: !panel.occluded.contains(&key),
                        }
                    })
                    .collect();
                serde_json::to_value(VerifyAnswer { verdicts })
            }
            ResponseSchema::Correction => {
                let instruction = md.get(meta::INSTRUCTION).and_then(Value::as_str)?;
                let chars: Vec<CharacterMeta> = md
                    .get(meta::CHARACTERS)
                    .and_then(|v| serde_json::from_value(v.clone()).ok())
                    .unwrap_or_default();
                serde_json::to_value(self.parse_correction(instruction, &chars, &panel))
            }
        };
        answer.ok()
    }

    fn parse_correction(
        &self,
        instruction: &str,
        chars: &[CharacterMeta],
        panel: &MockImage,
    ) -> CorrectionAnswer {
        let text = instruction.trim().trim_end_matches('.').to_lowercase();
        let entity_for = |descriptor: &str| -> String {
            self.0
                .resolve(panel, descriptor)
                .or_else(|| {
                    chars
                        .iter()
                        .find(|c| contains_word(descriptor, &c.category) || contains_word(descriptor, &c.name))
                        .map(|c| c.name.clone())
                })
                .unwrap_or_else(|| descriptor.to_owned())
        };
        let full = Regex::new(r"^change the (.+?) of the (.+?) to (.+)$").expect("static regex");
        let replace = Regex::new(r"^(?:turn|replace|morph|transform) the (.+?) (?:into|with) (?:an? )?(.+)$")
            .expect("static regex");
        let short = Regex::new(r"^(?:make|change|paint|color) the (.+?) (?:to |into )?(?:an? )?(\S+)$")
            .expect("static regex");

        let edits = if let Some(c) = full.captures(&text) {
            vec![CorrectionEdit {
                entity: entity_for(&c[2]),
                attribute: c[1].to_owned(),
                value: c[3].to_owned(),
            }]
        } else if let Some(c) = replace.captures(&text) {
            vec![CorrectionEdit {
                entity: entity_for(&c[1]),
                attribute: "category".into(),
                value: c[2].to_owned(),
            }]
        } else if let Some(c) = short.captures(&text) {
            let noun = c[1].to_owned();
            let value = c[2].to_owned();
            let hit = panel.entities.iter().find_map(|(name, e)| {
                e.attributes.iter().find_map(|(k, v)| {
                    if *k == noun {
                        Some((name.clone(), k.clone(), value.clone()))
                    } else if contains_word(v, &noun) {
                        Some((name.clone(), k.clone(), format!("{value} {noun}")))
                    } else {
                        None
                    }
                })
            });
            match hit {
                Some((entity, attribute, value)) => vec![CorrectionEdit {
                    entity,
                    attribute,
                    value,
                }],
                None => match chars.first() {
                    Some(first) => vec![CorrectionEdit {
                        entity: first.name.clone(),
                        attribute: noun,
                        value,
                    }],
                    None => vec![],
                },
            }
        } else {
            vec![]
        };
        CorrectionAnswer { edits }
    }
}

impl VisionLanguageModel for MockVlm {
    fn complete(&self, query: &VlmQuery) -> Result<String, BackendError> {
        self.0
            .record(Service::Vlm, query.panel_index(), query.schema.tag(), None);
        if self.0.scenario().failures.vlm_prose {
            return Ok(PROSE.into());
        }
        if let Some(answer) = self.canned(query) {
            return Ok(answer);
        }
        Ok(match self.simulate(query) {
            Some(v) => v.to_string(),
            None => PROSE.into(),
        })
    }
}

/// Canned answer matching every audit iteration.
pub fn canned(schema: ResponseSchema, panel: Option<usize>, answer: Value) -> CannedAnswer {
    CannedAnswer {
        schema,
        panel,
        iteration: None,
        answer: answer.to_string(),
    }
}
