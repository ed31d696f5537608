//! Audit agent: entity matching, mismatch detection, two-step
//! self-verification, the Consistency Index, and refined repair prompts.
//!
//! Each frame costs three VLM calls: entity match, mismatch detection, and
//! one batched verification of every non-intentional candidate.

use std::collections::BTreeSet;
use std::path::Path;

use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::backend::answers::{
    meta, CorrectionAnswer, EntityMatchAnswer, MismatchAnswer, VerifyAnswer,
};
use crate::backend::{BackendError, BackendSuite, EmbeddingVec, ResponseSchema, VlmMessage, VlmQuery};
use crate::image::ImageData;
use crate::memory::{MemoryError, RunState, RunStatus, WriterClaim};
use crate::report::{ConsistencyReport, EntityMatch, FrameFinding, Mismatch};
use crate::schema::StoryScript;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AuditError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    /// Cosine is undefined; index 0 is the reference, `i ≥ 1` panel `i`.
    #[error("embedding {0} is the zero vector")]
    ZeroVector(usize),
    #[error("nothing to audit")]
    NoPanels,
    #[error("no frame could be audited: {}", .0.join("; "))]
    AuditFailed(Vec<String>),
    #[error("run is {0:?}, not auditing")]
    NotAuditing(RunStatus),
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

/// Maps a mean cosine similarity onto the 0–100 Consistency Index.
pub fn ci_from_similarity(s_cons: f64) -> f64 {
    100.0 * (s_cons + 1.0) / 2.0
}

/// Cosine similarity clamped to `[-1, 1]`. `None` when either vector has
/// zero norm or the lengths differ.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() {
        return None;
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

/// Per-panel similarity to the reference, `s_cons` and CI.
#[derive(Debug, Clone, PartialEq)]
pub struct Consistency {
    pub panel_similarity: Vec<f64>,
    pub s_cons: f64,
    pub ci: f64,
}

/// `s_cons = mean_i cos(panel_i, reference)`, `ci = 100·(s_cons+1)/2`.
pub fn consistency_from_embeddings(panels: &[&[f64]], reference: &[f64]) -> Result<Consistency, AuditError> {
    if panels.is_empty() {
        return Err(AuditError::NoPanels);
    }
    if reference.iter().all(|v| *v == 0.0) {
        return Err(AuditError::ZeroVector(0));
    }
    let mut sims = Vec::with_capacity(panels.len());
    for (k, p) in panels.iter().enumerate() {
        if p.len() != reference.len() {
            return Err(AuditError::Backend(BackendError::DimensionMismatch {
                expected: reference.len(),
                actual: p.len(),
            }));
        }
        sims.push(cosine(p, reference).ok_or(AuditError::ZeroVector(k + 1))?);
    }
    let s_cons = (sims.iter().sum::<f64>() / sims.len() as f64).clamp(-1.0, 1.0);
    Ok(Consistency {
        ci: ci_from_similarity(s_cons),
        panel_similarity: sims,
        s_cons,
    })
}

/// Embeds the reference once and every panel once.
pub fn compute_consistency_index(
    suite: &BackendSuite,
    panels: &[ImageData],
    reference: &ImageData,
) -> Result<Consistency, AuditError> {
    if panels.is_empty() {
        return Err(AuditError::NoPanels);
    }
    let r = suite.embed(reference)?;
    let embedded: Vec<EmbeddingVec> = panels.iter().map(|p| suite.embed(p)).collect::<Result<_, _>>()?;
    let views: Vec<&[f64]> = embedded.iter().map(|e| e.values()).collect();
    consistency_from_embeddings(&views, r.values())
}

const DESCRIPTOR_BREAKS: [&str; 8] = ["with", "in", "wearing", "who", "that", "holding", "carrying", "dressed"];

/// Leading noun phrase of a character description: article dropped, cut
/// before the first clause word ("with", "wearing", ...), lower-cased.
///
/// "A girl with pigtails wearing a striped dress" → "girl".
pub fn entity_descriptor(description: &str) -> String {
    let mut words: Vec<&str> = description.split_whitespace().collect();
    if words
        .first()
        .is_some_and(|w| matches!(w.to_lowercase().as_str(), "a" | "an" | "the"))
    {
        words.remove(0);
    }
    let cut = words
        .iter()
        .position(|w| {
            let w = w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
            DESCRIPTOR_BREAKS.contains(&w.as_str())
        })
        .unwrap_or(words.len());
    let phrase = words[..cut]
        .join(" ")
        .trim_end_matches([',', '.', ';', ':'])
        .to_lowercase();
    if phrase.is_empty() {
        description.trim().to_lowercase()
    } else {
        phrase
    }
}

/// One imperative edit before rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct EditInstruction {
    pub attribute: String,
    pub descriptor: String,
    pub value: String,
}

/// `change the <attribute> of the <descriptor> to <value>.` per
/// instruction, in the given order, joined by single spaces.
pub fn compile_refined_prompt(items: &[EditInstruction]) -> String {
    items
        .iter()
        .map(|i| {
            format!(
                "change the {} of the {} to {}.",
                i.attribute.trim(),
                i.descriptor.trim(),
                i.value.trim().trim_end_matches('.')
            )
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Descriptor for an entity: the script character's leading noun phrase,
/// or the name itself for entities outside the cast.
pub fn descriptor_for(script: &StoryScript, entity: &str) -> String {
    script
        .character(entity)
        .map(|c| entity_descriptor(&c.description))
        .unwrap_or_else(|| entity.to_owned())
}

/// Refined prompt for a frame's validated mismatches, sorted by
/// `(entity, attribute)`; `None` when nothing is validated.
pub fn refined_prompt_for(script: &StoryScript, mismatches: &[Mismatch]) -> Option<String> {
    let mut validated: Vec<&Mismatch> = mismatches.iter().filter(|m| m.validated).collect();
    if validated.is_empty() {
        return None;
    }
    validated.sort_by(|a, b| (&a.entity_name, &a.attribute).cmp(&(&b.entity_name, &b.attribute)));
    let items: Vec<EditInstruction> = validated
        .iter()
        .map(|m| EditInstruction {
            attribute: m.attribute.clone(),
            descriptor: descriptor_for(script, &m.entity_name),
            value: m.expected.clone(),
        })
        .collect();
    Some(compile_refined_prompt(&items))
}

/// Prompt texts for the VLM sub-calls. Placeholders in braces
/// (`{panel_index}`, `{characters}`, `{prompt}`, `{entities}`,
/// `{candidates}`, `{instruction}`) are substituted verbatim.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplates {
    pub system: String,
    pub entity_match: String,
    pub mismatch_detect: String,
    pub verify: String,
    pub correction: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            system: include_str!("../assets/prompts/system.txt").into(),
            entity_match: include_str!("../assets/prompts/entity_match.txt").into(),
            mismatch_detect: include_str!("../assets/prompts/mismatch_detect.txt").into(),
            verify: include_str!("../assets/prompts/verify.txt").into(),
            correction: include_str!("../assets/prompts/correction.txt").into(),
        }
    }
}

impl PromptTemplates {
    /// Loads `<name>.txt` files from `dir`, keeping defaults for missing ones.
    pub fn from_dir(dir: &Path) -> std::io::Result<Self> {
        let mut t = Self::default();
        for (name, slot) in [
            ("system", &mut t.system),
            ("entity_match", &mut t.entity_match),
            ("mismatch_detect", &mut t.mismatch_detect),
            ("verify", &mut t.verify),
            ("correction", &mut t.correction),
        ] {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                *slot = std::fs::read_to_string(path)?;
            }
        }
        Ok(t)
    }
}

fn render(template: &str, vars: &[(&str, String)]) -> String {
    let mut out = template.to_owned();
    for (k, v) in vars {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

/// Everything a frame audit needs besides the images.
pub struct AuditContext<'a> {
    pub suite: &'a BackendSuite,
    pub script: &'a StoryScript,
    pub templates: &'a PromptTemplates,
    /// Director iteration `T`, forwarded as query metadata.
    pub iteration: u32,
}

impl AuditContext<'_> {
    fn characters_json(&self) -> Value {
        Value::Array(
            self.script
                .characters
                .iter()
                .map(|c| json!({"name": c.name, "description": c.description, "category": c.category}))
                .collect(),
        )
    }

    fn characters_text(&self) -> String {
        self.script
            .characters
            .iter()
            .map(|c| format!("- {} ({}): {}", c.name, c.category, c.description))
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn query(
        &self,
        schema: ResponseSchema,
        text: String,
        images: Vec<ImageData>,
        panel_index: usize,
        extra: Map<String, Value>,
    ) -> VlmQuery {
        let mut metadata = Map::new();
        metadata.insert(meta::PANEL_INDEX.into(), json!(panel_index));
        metadata.insert(meta::AUDIT_ITERATION.into(), json!(self.iteration));
        metadata.extend(extra);
        VlmQuery {
            messages: vec![
                VlmMessage::system(self.templates.system.trim()),
                VlmMessage::user(text, images),
            ],
            schema,
            metadata,
        }
    }

    /// One [`EntityMatch`] per script character, in cast order.
    pub fn match_entities(
        &self,
        panel_index: usize,
        panel: &ImageData,
        reference: &ImageData,
    ) -> Result<Vec<EntityMatch>, BackendError> {
        let text = render(
            &self.templates.entity_match,
            &[
                ("panel_index", panel_index.to_string()),
                ("characters", self.characters_text()),
            ],
        );
        let mut extra = Map::new();
        extra.insert(meta::CHARACTERS.into(), self.characters_json());
        let q = self.query(
            ResponseSchema::EntityMatch,
            text,
            vec![panel.clone(), reference.clone()],
            panel_index,
            extra,
        );
        let answer: EntityMatchAnswer = decode(ResponseSchema::EntityMatch, self.suite.ask(&q)?.json)?;
        Ok(self
            .script
            .characters
            .iter()
            .map(|c| {
                let item = answer.matches.iter().find(|m| m.entity == c.name);
                let matched = item.is_some_and(|m| m.matched);
                let mut basis: Vec<String> = item
                    .map(|m| m.basis.iter().filter(|b| !b.trim().is_empty()).cloned().collect())
                    .unwrap_or_default();
                if matched && basis.is_empty() {
                    basis.push(c.category.clone());
                }
                EntityMatch {
                    entity_name: c.name.clone(),
                    panel_index,
                    matched,
                    match_basis: if matched { basis } else { Vec::new() },
                }
            })
            .collect())
    }

    /// Candidate mismatches with `intentional` set, before verification.
    /// Deduplicated on `(entity, attribute)` and sorted by it.
    pub fn detect_mismatches(
        &self,
        panel_index: usize,
        panel: &ImageData,
        reference: &ImageData,
        matched: &[String],
        prompt: &str,
    ) -> Result<Vec<Mismatch>, BackendError> {
        if matched.is_empty() {
            return Ok(Vec::new());
        }
        let text = render(
            &self.templates.mismatch_detect,
            &[
                ("panel_index", panel_index.to_string()),
                ("prompt", prompt.to_owned()),
                ("entities", matched.join(", ")),
                ("characters", self.characters_text()),
            ],
        );
        let mut extra = Map::new();
        extra.insert(meta::CHARACTERS.into(), self.characters_json());
        extra.insert(meta::PROMPT.into(), json!(prompt));
        extra.insert(meta::ENTITIES.into(), json!(matched));
        let q = self.query(
            ResponseSchema::MismatchDetect,
            text,
            vec![panel.clone(), reference.clone()],
            panel_index,
            extra,
        );
        let answer: MismatchAnswer = decode(ResponseSchema::MismatchDetect, self.suite.ask(&q)?.json)?;
        let mut seen = BTreeSet::new();
        let mut out: Vec<Mismatch> = answer
            .mismatches
            .into_iter()
            .filter(|m| seen.insert((m.entity.clone(), m.attribute.clone())))
            .map(|m| Mismatch {
                entity_name: m.entity,
                attribute: m.attribute,
                observed: m.observed,
                expected: m.expected,
                intentional: m.intentional,
                visible: false,
                contextually_appropriate: false,
                validated: false,
            })
            .collect();
        out.sort_by(|a, b| (&a.entity_name, &a.attribute).cmp(&(&b.entity_name, &b.attribute)));
        Ok(out)
    }

    /// Verifies non-intentional candidates in one call. A failed or
    /// unparseable answer, or a missing verdict, leaves `validated = false`.
    pub fn self_verify_batch(
        &self,
        panel_index: usize,
        panel: &ImageData,
        reference: &ImageData,
        prompt: &str,
        candidates: Vec<Mismatch>,
    ) -> Vec<Mismatch> {
        let pending: Vec<usize> = candidates
            .iter()
            .enumerate()
            .filter(|(_, m)| !m.intentional)
            .map(|(k, _)| k)
            .collect();
        if pending.is_empty() {
            return candidates;
        }
        let listed: Vec<Value> = pending
            .iter()
            .map(|k| {
                let m = &candidates[*k];
                json!({"entity": m.entity_name, "attribute": m.attribute, "observed": m.observed, "expected": m.expected})
            })
            .collect();
        let text = render(
            &self.templates.verify,
            &[
                ("panel_index", panel_index.to_string()),
                ("prompt", prompt.to_owned()),
                (
                    "candidates",
                    pending
                        .iter()
                        .enumerate()
                        .map(|(n, k)| {
                            let m = &candidates[*k];
                            format!(
                                "{n}. {} {}: observed \"{}\", expected \"{}\"",
                                m.entity_name, m.attribute, m.observed, m.expected
                            )
                        })
                        .collect::<Vec<_>>()
                        .join("\n"),
                ),
            ],
        );
        let mut extra = Map::new();
        extra.insert(meta::PROMPT.into(), json!(prompt));
        extra.insert(meta::CANDIDATES.into(), Value::Array(listed));
        let q = self.query(
            ResponseSchema::Verify,
            text,
            vec![panel.clone(), reference.clone()],
            panel_index,
            extra,
        );
        let verdicts = self
            .suite
            .ask(&q)
            .and_then(|a| decode::<VerifyAnswer>(ResponseSchema::Verify, a.json))
            .map(|a| a.verdicts);
        let mut out = candidates;
        if let Ok(verdicts) = verdicts {
            for (n, k) in pending.iter().enumerate() {
                if let Some(v) = verdicts.iter().find(|v| v.index == n) {
                    out[*k] = out[*k].clone().verified(v.contextually_appropriate, v.visible);
                }
            }
        }
        out
    }

    /// Single-mismatch verification.
    pub fn self_verify(
        &self,
        panel_index: usize,
        panel: &ImageData,
        reference: &ImageData,
        prompt: &str,
        mismatch: Mismatch,
    ) -> Mismatch {
        self.self_verify_batch(panel_index, panel, reference, prompt, vec![mismatch])
            .remove(0)
    }

    /// Full audit of one frame. Backend or parse failures in the match or
    /// detect step yield a failed finding.
    pub fn audit_frame(&self, panel_index: usize, panel: &ImageData, reference: &ImageData) -> FrameFinding {
        let prompt = self.script.prompt(panel_index).unwrap_or_default().to_owned();
        let matches = match self.match_entities(panel_index, panel, reference) {
            Ok(m) => m,
            Err(e) => return FrameFinding::failed(panel_index, format!("entity match: {e}")),
        };
        let matched: Vec<String> = matches
            .iter()
            .filter(|m| m.matched)
            .map(|m| m.entity_name.clone())
            .collect();
        let candidates = match self.detect_mismatches(panel_index, panel, reference, &matched, &prompt) {
            Ok(c) => c,
            Err(e) => return FrameFinding::failed(panel_index, format!("mismatch detection: {e}")),
        };
        let mismatches = self.self_verify_batch(panel_index, panel, reference, &prompt, candidates);
        let refined_prompt = refined_prompt_for(self.script, &mismatches);
        FrameFinding {
            panel_index,
            matches,
            mismatches,
            refined_prompt,
            error: None,
        }
    }

    /// Converts a free-text user correction into a refined prompt.
    pub fn correction_prompt(
        &self,
        panel_index: usize,
        panel: &ImageData,
        instruction: &str,
    ) -> Result<String, BackendError> {
        let text = render(
            &self.templates.correction,
            &[
                ("panel_index", panel_index.to_string()),
                ("instruction", instruction.to_owned()),
                ("characters", self.characters_text()),
            ],
        );
        let mut extra = Map::new();
        extra.insert(meta::CHARACTERS.into(), self.characters_json());
        extra.insert(meta::INSTRUCTION.into(), json!(instruction));
        let q = self.query(ResponseSchema::Correction, text, vec![panel.clone()], panel_index, extra);
        let answer: CorrectionAnswer = decode(ResponseSchema::Correction, self.suite.ask(&q)?.json)?;
        if answer.edits.is_empty() {
            return Err(BackendError::UnparseableAnswer {
                schema: ResponseSchema::Correction.tag().into(),
                reason: "no edits derived from the instruction".into(),
                raw: instruction.to_owned(),
            });
        }
        let mut edits = answer.edits;
        edits.sort_by(|a, b| (&a.entity, &a.attribute).cmp(&(&b.entity, &b.attribute)));
        let items: Vec<EditInstruction> = edits
            .into_iter()
            .map(|e| EditInstruction {
                descriptor: descriptor_for(self.script, &e.entity),
                attribute: e.attribute,
                value: e.value,
            })
            .collect();
        Ok(compile_refined_prompt(&items))
    }
}

fn decode<T: serde::de::DeserializeOwned>(schema: ResponseSchema, v: Value) -> Result<T, BackendError> {
    serde_json::from_value(v).map_err(|e| BackendError::UnparseableAnswer {
        schema: schema.tag().into(),
        reason: e.to_string(),
        raw: String::new(),
    })
}

/// Images of the reference and panels held by the run.
pub(crate) fn run_images(
    state: &RunState,
    claim: &WriterClaim,
) -> Result<(ImageData, Vec<ImageData>), AuditError> {
    let missing = |id: &str| AuditError::Memory(MemoryError::UnknownImage(id.to_owned()));
    let r = state.reference.as_ref().ok_or(AuditError::NoPanels)?;
    let reference = claim.image(r).ok_or_else(|| missing(&r.id))?;
    let panels = state
        .panels
        .iter()
        .map(|p| claim.image(&p.image).ok_or_else(|| missing(&p.image.id)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((reference, panels))
}

/// Audits every frame and builds the report without recording it.
pub fn build_report(
    ctx: &AuditContext,
    reference: &ImageData,
    panels: &[ImageData],
    ordinal: u32,
) -> Result<ConsistencyReport, AuditError> {
    let consistency = compute_consistency_index(ctx.suite, panels, reference)?;
    let findings: Vec<FrameFinding> = std::thread::scope(|s| {
        let handles: Vec<_> = panels
            .iter()
            .enumerate()
            .map(|(k, p)| s.spawn(move || ctx.audit_frame(k + 1, p, reference)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("frame audit panicked"))
            .collect()
    });
    let failures: Vec<String> = findings
        .iter()
        .filter_map(|f| f.error.as_ref().map(|e| format!("panel {}: {e}", f.panel_index)))
        .collect();
    if failures.len() == findings.len() {
        return Err(AuditError::AuditFailed(failures));
    }
    let repairable = findings
        .iter()
        .filter(|f| f.is_repairable())
        .map(|f| f.panel_index)
        .collect();
    Ok(ConsistencyReport {
        audit_iteration: ctx.iteration,
        ordinal,
        findings,
        panel_similarity: consistency.panel_similarity,
        s_cons: consistency.s_cons,
        ci: consistency.ci,
        repairable,
    })
}

/// Audits the run and commits the report to shared memory.
pub fn run_audit(
    claim: &WriterClaim,
    suite: &BackendSuite,
    templates: &PromptTemplates,
) -> Result<ConsistencyReport, AuditError> {
    let state = claim.snapshot();
    if state.status != RunStatus::Auditing {
        return Err(AuditError::NotAuditing(state.status));
    }
    let (reference, panels) = run_images(&state, claim)?;
    let ctx = AuditContext {
        suite,
        script: &state.script,
        templates,
        iteration: state.iteration,
    };
    let report = build_report(&ctx, &reference, &panels, state.ci_history.len() as u32)?;
    claim.record_audit(&report)?;
    Ok(report)
}
