//! Repair agent: localized edits under the adaptive conditioning-scale
//! controller, outcome classification, skip on exhaustion.
//!
//! Lower scale permits stronger edits. An edit too close to its source
//! lowers the scale for the next attempt; an edit that drifts from the
//! reference raises it.

use thiserror::Error;

use crate::audit::{ci_from_similarity, cosine};
use crate::backend::{BackendError, BackendSuite, EmbeddingVec};
use crate::config::ControllerConfig;
use crate::image::{ContentHash, ImageData};
use crate::memory::{
    EditEvent, EditOutcome, FrameResult, FrameSummary, MemoryError, PassKind, PlannedFrame,
    RepairSummary, RunState, RunStatus, WriterClaim,
};
use crate::report::ConsistencyReport;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RepairError {
    #[error("panel {0} has no validated fix")]
    NotRepairable(usize),
    #[error("run is {0:?}, not repairing")]
    NotRepairing(RunStatus),
    #[error("no audit report to repair from")]
    NoReport,
    #[error("image for panel {0} is missing")]
    MissingImage(usize),
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

/// Per-panel conditioning-scale state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleController {
    pub scale: f64,
    pub step: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Minimum CI-scaled similarity of an edit to the reference.
    pub over_edit_threshold: f64,
    /// `cos(before, after)` above this is indistinguishable from no edit.
    pub subtle_threshold: f64,
    pub max_attempts: u32,
}

impl ScaleController {
    pub fn new(config: &ControllerConfig) -> Self {
        Self::at(config, config.initial_scale)
    }

    /// Controller resumed at a stored scale, clamped into range.
    pub fn at(config: &ControllerConfig, scale: f64) -> Self {
        Self {
            scale: scale.clamp(config.scale_min, config.scale_max),
            step: config.step,
            scale_min: config.scale_min,
            scale_max: config.scale_max,
            over_edit_threshold: config.over_edit_threshold,
            subtle_threshold: config.subtle_threshold,
            max_attempts: config.max_attempts,
        }
    }
}

/// Scale after an attempt. Accepted, skipped and failed attempts leave it
/// unchanged.
pub fn adjust_scale(c: &ScaleController, outcome: EditOutcome) -> ScaleController {
    let scale = match outcome {
        EditOutcome::TooSubtle => (c.scale - c.step).max(c.scale_min),
        EditOutcome::OverEdited => (c.scale + c.step).min(c.scale_max),
        _ => c.scale,
    };
    ScaleController { scale, ..*c }
}

/// Measurements behind an outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub outcome: EditOutcome,
    /// `cos(before, after)`; 1 for byte-identical images.
    pub change_cosine: f64,
    /// `100·(cos(after, R)+1)/2`.
    pub similarity_to_reference: f64,
}

/// Classifies an edit. Too-subtle takes precedence: an unchanged image is
/// never over-edited.
pub fn classify(c: &ScaleController, identical: bool, change_cosine: f64, similarity_to_reference: f64) -> EditOutcome {
    if identical || change_cosine > c.subtle_threshold {
        EditOutcome::TooSubtle
    } else if similarity_to_reference < c.over_edit_threshold {
        EditOutcome::OverEdited
    } else {
        EditOutcome::Accepted
    }
}

/// Embedding-based classification from precomputed vectors.
pub fn evaluate_embeddings(
    c: &ScaleController,
    identical: bool,
    before: &[f64],
    after: &[f64],
    reference: &[f64],
) -> Result<Evaluation, BackendError> {
    let zero = || BackendError::Protocol("zero embedding".into());
    let change_cosine = if identical { 1.0 } else { cosine(before, after).ok_or_else(zero)? };
    let similarity_to_reference = ci_from_similarity(cosine(after, reference).ok_or_else(zero)?);
    Ok(Evaluation {
        outcome: classify(c, identical, change_cosine, similarity_to_reference),
        change_cosine,
        similarity_to_reference,
    })
}

/// Embeds `after` and classifies the edit against `before` and `R`.
pub fn evaluate_edit(
    suite: &BackendSuite,
    c: &ScaleController,
    before: &ImageData,
    after: &ImageData,
    reference: &ImageData,
) -> Result<Evaluation, BackendError> {
    let identical = before.bytes == after.bytes;
    let b = suite.embed(before)?;
    let a = if identical { b.clone() } else { suite.embed(after)? };
    let r = suite.embed(reference)?;
    evaluate_embeddings(c, identical, b.values(), a.values(), r.values())
}

/// Edit seed for one attempt; stable across resumes.
pub fn attempt_seed(run_seed: u64, pass: u32, panel_index: usize, attempt: u32) -> u64 {
    let h = ContentHash::of(
        &[
            run_seed.to_le_bytes(),
            u64::from(pass).to_le_bytes(),
            (panel_index as u64).to_le_bytes(),
            u64::from(attempt).to_le_bytes(),
        ]
        .concat(),
    );
    u64::from_le_bytes(h.0[..8].try_into().expect("8 bytes"))
}

/// Frames with a validated fix, in panel order.
pub fn plan_from_report(report: &ConsistencyReport) -> Vec<PlannedFrame> {
    report
        .findings
        .iter()
        .filter(|f| f.is_repairable())
        .filter_map(|f| {
            f.refined_prompt.as_ref().map(|p| PlannedFrame {
                panel_index: f.panel_index,
                prompt: p.clone(),
            })
        })
        .collect()
}

/// Lazily embedded vectors reused across the attempts of one frame.
struct FrameCache {
    before: Option<EmbeddingVec>,
    reference: Option<EmbeddingVec>,
}

fn attempt_once(
    suite: &BackendSuite,
    c: &ScaleController,
    cache: &mut FrameCache,
    before: &ImageData,
    reference: &ImageData,
    prompt: &str,
    seed: u64,
) -> Result<(ImageData, Evaluation), BackendError> {
    let after = suite.edit(before, prompt, c.scale, seed)?;
    if cache.before.is_none() {
        cache.before = Some(suite.embed(before)?);
    }
    if cache.reference.is_none() {
        cache.reference = Some(suite.embed(reference)?);
    }
    let b = cache.before.as_ref().expect("cached");
    let identical = before.bytes == after.bytes;
    let a = if identical { b.clone() } else { suite.embed(&after)? };
    let r = cache.reference.as_ref().expect("cached");
    let eval = evaluate_embeddings(c, identical, b.values(), a.values(), r.values())?;
    Ok((after, eval))
}

/// Runs the attempt loop for one planned frame of the open pass and
/// records its summary. Resumes from attempts already in the edit log.
pub fn repair_frame(
    claim: &WriterClaim,
    suite: &BackendSuite,
    frame: &PlannedFrame,
) -> Result<FrameSummary, RepairError> {
    let state = claim.snapshot();
    let pass = state
        .current_pass
        .as_ref()
        .ok_or(RepairError::NotRepairing(state.status))?;
    if !pass.plan.iter().any(|p| p.panel_index == frame.panel_index) {
        return Err(RepairError::NotRepairable(frame.panel_index));
    }
    let ordinal = pass.ordinal;
    let i = frame.panel_index;
    let panel = state.panel(i).ok_or(RepairError::NotRepairable(i))?;
    let reference = state
        .reference
        .as_ref()
        .and_then(|r| claim.image(r))
        .ok_or(RepairError::MissingImage(0))?;
    let current = claim.image(&panel.image).ok_or(RepairError::MissingImage(i))?;
    let mut c = ScaleController::at(&state.config.controller, panel.conditioning_scale);
    let seed = state.config.director.seed;

    let prior = events_for(&state, ordinal, i);
    let mut scales: Vec<f64> = prior.iter().filter(|e| is_attempt(e)).map(|e| e.scale).collect();
    let mut failures = prior.iter().filter(|e| e.outcome == EditOutcome::Failed).count() as u32;
    let mut attempt = panel.attempt_count;
    let ended = prior
        .iter()
        .find(|e| matches!(e.outcome, EditOutcome::Accepted | EditOutcome::Skipped))
        .map(|e| e.outcome);

    let mut result = match ended {
        Some(EditOutcome::Accepted) => Some(FrameResult::Accepted),
        Some(_) => Some(exhausted_result(failures, attempt)),
        None => None,
    };
    let mut cache = FrameCache {
        before: None,
        reference: None,
    };
    while result.is_none() && attempt < c.max_attempts {
        attempt += 1;
        let used = c.scale;
        scales.push(used);
        let edit_seed = attempt_seed(seed, ordinal, i, attempt);
        let event = match attempt_once(suite, &c, &mut cache, &current, &reference, &frame.prompt, edit_seed) {
            Ok((after, eval)) => {
                let after_ref = claim.put_image(&after)?;
                c = adjust_scale(&c, eval.outcome);
                EditEvent {
                    panel_index: i,
                    pass: ordinal,
                    attempt,
                    before: panel.image.clone(),
                    after: after_ref,
                    prompt: frame.prompt.clone(),
                    scale: used,
                    next_scale: c.scale,
                    outcome: eval.outcome,
                    similarity_to_reference: Some(eval.similarity_to_reference),
                    change_cosine: Some(eval.change_cosine),
                    error: None,
                    timestamp: 0,
                }
            }
            Err(e) => {
                failures += 1;
                tracing::warn!(panel = i, attempt, error = %e, "edit attempt failed");
                EditEvent {
                    panel_index: i,
                    pass: ordinal,
                    attempt,
                    before: panel.image.clone(),
                    after: panel.image.clone(),
                    prompt: frame.prompt.clone(),
                    scale: used,
                    next_scale: used,
                    outcome: EditOutcome::Failed,
                    similarity_to_reference: None,
                    change_cosine: None,
                    error: Some(e.to_string()),
                    timestamp: 0,
                }
            }
        };
        let accepted = event.outcome == EditOutcome::Accepted;
        claim.apply_panel_update(event)?;
        if accepted {
            result = Some(FrameResult::Accepted);
        }
    }
    let result = match result {
        Some(r) => r,
        None => {
            claim.apply_panel_update(EditEvent {
                panel_index: i,
                pass: ordinal,
                attempt,
                before: panel.image.clone(),
                after: panel.image.clone(),
                prompt: frame.prompt.clone(),
                scale: c.scale,
                next_scale: c.scale,
                outcome: EditOutcome::Skipped,
                similarity_to_reference: None,
                change_cosine: None,
                error: None,
                timestamp: 0,
            })?;
            exhausted_result(failures, attempt)
        }
    };
    let summary = FrameSummary {
        panel_index: i,
        result,
        attempts: attempt,
        scales,
    };
    claim.finish_frame(summary.clone())?;
    Ok(summary)
}

fn is_attempt(e: &EditEvent) -> bool {
    e.outcome != EditOutcome::Skipped
}

fn exhausted_result(failures: u32, attempts: u32) -> FrameResult {
    if attempts > 0 && failures == attempts {
        FrameResult::Failed
    } else {
        FrameResult::Skipped
    }
}

fn events_for(state: &RunState, pass: u32, panel: usize) -> Vec<EditEvent> {
    state
        .edit_log
        .iter()
        .filter(|e| e.pass == pass && e.panel_index == panel)
        .cloned()
        .collect()
}

/// Processes every planned frame once, sequentially, then closes the pass.
/// Continues an open pass left by an interrupted process instead of
/// starting a new one; `plan` is ignored in that case.
pub fn repair_pass(
    claim: &WriterClaim,
    suite: &BackendSuite,
    kind: PassKind,
    plan: Vec<PlannedFrame>,
) -> Result<RepairSummary, RepairError> {
    let state = claim.snapshot();
    if state.status != RunStatus::Repairing {
        return Err(RepairError::NotRepairing(state.status));
    }
    if state.current_pass.is_none() {
        claim.begin_repair_pass(kind, plan)?;
    }
    let pass = claim.snapshot().current_pass.expect("pass is open");
    for frame in pass.remaining() {
        repair_frame(claim, suite, &frame)?;
    }
    let done = claim.snapshot().current_pass.expect("pass is open").completed;
    claim.complete_repair_pass()?;
    Ok(RepairSummary::from_frames(&done))
}

/// Repair pass over the latest report's repairable frames.
pub fn repair_from_report(claim: &WriterClaim, suite: &BackendSuite) -> Result<RepairSummary, RepairError> {
    let state = claim.snapshot();
    let plan = match (&state.current_pass, &state.latest_report) {
        (Some(_), _) => Vec::new(),
        (None, Some(r)) => plan_from_report(r),
        (None, None) => return Err(RepairError::NoReport),
    };
    repair_pass(claim, suite, PassKind::Audit, plan)
}
