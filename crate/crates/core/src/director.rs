//! Consistency director: init, then audit and repair until the
//! Consistency Index reaches `tau` or `t_max` repair passes have run.
//!
//! Every step is driven from the run's recorded status, so [`drive`]
//! continues an interrupted run from its journal.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::{run_audit, AuditContext, AuditError, PromptTemplates};
use crate::backend::BackendSuite;
use crate::config::EngineConfig;
use crate::image::ContentHash;
use crate::init::{initialize, InitError};
use crate::memory::{
    JournalEntry, MemoryError, PassKind, PlannedFrame, RepairSummary, RunHandle, RunState, RunStatus, SharedMemory,
    WriterClaim,
};
use crate::repair::{repair_from_report, repair_pass, RepairError};
use crate::schema::StoryScript;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DirectorError {
    #[error("initialization failed: {0}")]
    Init(#[from] InitError),
    #[error("audit failed: {0}")]
    Audit(#[from] AuditError),
    #[error("repair failed: {0}")]
    Repair(#[from] RepairError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error("panel {0} does not exist")]
    BadIndex(usize),
    #[error("corrections need a finished run, this one is {}", .0.as_str())]
    NotReviewable(RunStatus),
}

impl DirectorError {
    /// Shared-memory refusal to persist; the run stays resumable.
    pub fn is_crash(&self) -> bool {
        let m = match self {
            DirectorError::Memory(m) => m,
            DirectorError::Audit(AuditError::Memory(m)) => m,
            DirectorError::Repair(RepairError::Memory(m)) => m,
            DirectorError::Init(InitError::Memory(m)) => m,
            _ => return false,
        };
        matches!(m, MemoryError::Crashed(_) | MemoryError::Io { .. })
    }
}

/// A natural-language fix for one panel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserCorrection {
    pub panel_index: usize,
    pub instruction: String,
}

/// Result of a correction round.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CorrectionOutcome {
    /// Panel and the refined prompt it was repaired with.
    pub applied: Vec<PlannedFrame>,
    /// Panel and the reason its instruction was rejected.
    pub rejected: Vec<(usize, String)>,
    pub summary: RepairSummary,
    pub ci: Option<f64>,
}

/// Run id derived from the script and configuration: `run-<12 hex>`.
pub fn default_run_id(script: &StoryScript, config: &EngineConfig) -> String {
    let bytes = serde_json::to_vec(&(script.to_value(), config)).expect("inputs serialize");
    format!("run-{}", &ContentHash::of(&bytes).to_hex()[..12])
}

/// Backends plus prompt texts; everything the agents call out to.
#[derive(Clone)]
pub struct Director {
    pub suite: BackendSuite,
    pub templates: Arc<PromptTemplates>,
}

impl Director {
    pub fn new(suite: BackendSuite) -> Self {
        Self {
            suite,
            templates: Arc::new(PromptTemplates::default()),
        }
    }

    /// Creates the run and drives it to a terminal status.
    pub fn run_pipeline(
        &self,
        memory: &SharedMemory,
        run_id: &str,
        script: StoryScript,
        config: EngineConfig,
    ) -> Result<RunState, DirectorError> {
        let handle = memory.create_run(run_id, script, config)?;
        let claim = handle.claim()?;
        self.drive(&claim)
    }

    /// Advances the run from its recorded status until it settles. Errors
    /// other than persistence failures mark the run failed.
    pub fn drive(&self, claim: &WriterClaim) -> Result<RunState, DirectorError> {
        match self.step_loop(claim) {
            Ok(()) => Ok(claim.snapshot()),
            Err(e) => {
                if !e.is_crash() && claim.status() != RunStatus::Failed {
                    claim.set_status(RunStatus::Failed, Some(e.to_string()))?;
                }
                Err(e)
            }
        }
    }

    fn step_loop(&self, claim: &WriterClaim) -> Result<(), DirectorError> {
        loop {
            let state = claim.snapshot();
            match state.status {
                RunStatus::Initializing => {
                    initialize(claim, &self.suite)?;
                    claim.set_status(RunStatus::Auditing, None)?;
                }
                RunStatus::Auditing => {
                    // A report recorded before an interruption stands.
                    let audited = state.latest_report.is_some() && audited_after_last_pass(&state);
                    let ci = if audited {
                        state.latest_ci().expect("audited")
                    } else {
                        run_audit(claim, &self.suite, &self.templates)?.ci
                    };
                    let state = claim.snapshot();
                    let cfg = &state.config.director;
                    // Correction rounds end with their audit.
                    if state.last_pass_kind == Some(PassKind::UserCorrection)
                        || ci >= cfg.tau
                        || state.iteration >= cfg.t_max
                    {
                        self.settle(claim)?;
                    } else {
                        claim.set_status(RunStatus::Repairing, None)?;
                    }
                }
                RunStatus::Repairing => {
                    if state.current_pass.is_none() && state.ci_history.len() <= state.repair_passes as usize {
                        // The pass for the latest report already ran.
                    } else if state.current_pass.is_none() && settled_since_last_audit(claim) {
                        // A correction round died before its pass began; its
                        // instructions were never persisted.
                        claim.note("interrupted correction round closed without edits")?;
                        repair_pass(claim, &self.suite, PassKind::UserCorrection, Vec::new())?;
                    } else {
                        repair_from_report(claim, &self.suite)?;
                    }
                    claim.set_status(RunStatus::Auditing, None)?;
                }
                RunStatus::Done | RunStatus::AwaitingUser | RunStatus::Failed => return Ok(()),
            }
        }
    }

    fn settle(&self, claim: &WriterClaim) -> Result<(), DirectorError> {
        claim.set_status(RunStatus::Done, None)?;
        if claim.snapshot().config.director.await_user {
            claim.set_status(RunStatus::AwaitingUser, None)?;
        }
        Ok(())
    }

    /// Validates corrections and takes the run for them: status moves to
    /// repairing before any backend call. `None` for an empty list.
    pub fn prepare_corrections(
        &self,
        handle: &Arc<RunHandle>,
        corrections: &[UserCorrection],
    ) -> Result<Option<WriterClaim>, DirectorError> {
        if corrections.is_empty() {
            return Ok(None);
        }
        let state = handle.snapshot();
        if !matches!(state.status, RunStatus::Done | RunStatus::AwaitingUser) {
            return Err(DirectorError::NotReviewable(state.status));
        }
        if let Some(c) = corrections.iter().find(|c| state.panel(c.panel_index).is_none()) {
            return Err(DirectorError::BadIndex(c.panel_index));
        }
        let claim = handle.claim()?;
        let status = claim.status();
        if !matches!(status, RunStatus::Done | RunStatus::AwaitingUser) {
            return Err(DirectorError::NotReviewable(status));
        }
        claim.set_status(RunStatus::Repairing, Some(format!("{} user correction(s)", corrections.len())))?;
        Ok(Some(claim))
    }

    /// Turns each instruction into a refined prompt (one VLM call each),
    /// repairs exactly the named panels, audits once more and settles.
    /// Rejected instructions are noted and skipped.
    pub fn apply_corrections(
        &self,
        claim: &WriterClaim,
        corrections: &[UserCorrection],
    ) -> Result<CorrectionOutcome, DirectorError> {
        match self.apply_inner(claim, corrections) {
            Ok(o) => Ok(o),
            Err(e) => {
                if !e.is_crash() && claim.status() != RunStatus::Failed {
                    claim.set_status(RunStatus::Failed, Some(e.to_string()))?;
                }
                Err(e)
            }
        }
    }

    fn apply_inner(&self, claim: &WriterClaim, corrections: &[UserCorrection]) -> Result<CorrectionOutcome, DirectorError> {
        let state = claim.snapshot();
        let ctx = AuditContext {
            suite: &self.suite,
            script: &state.script,
            templates: &self.templates,
            iteration: state.iteration,
        };
        let mut outcome = CorrectionOutcome::default();
        let mut prompts: BTreeMap<usize, Vec<String>> = BTreeMap::new();
        for c in corrections {
            let panel = state.panel(c.panel_index).ok_or(DirectorError::BadIndex(c.panel_index))?;
            let image = claim
                .image(&panel.image)
                .ok_or_else(|| MemoryError::UnknownImage(panel.image.id.clone()))?;
            match ctx.correction_prompt(c.panel_index, &image, &c.instruction) {
                Ok(p) => prompts.entry(c.panel_index).or_default().push(p),
                Err(e) => {
                    let msg = format!("correction for panel {} rejected: {e}", c.panel_index);
                    claim.note(msg.clone())?;
                    outcome.rejected.push((c.panel_index, msg));
                }
            }
        }
        let plan: Vec<PlannedFrame> = prompts
            .into_iter()
            .map(|(panel_index, ps)| PlannedFrame {
                panel_index,
                prompt: ps.join(" "),
            })
            .collect();
        outcome.applied = plan.clone();
        outcome.summary = repair_pass(claim, &self.suite, PassKind::UserCorrection, plan)?;
        claim.set_status(RunStatus::Auditing, None)?;
        let report = run_audit(claim, &self.suite, &self.templates)?;
        outcome.ci = Some(report.ci);
        self.settle(claim)?;
        Ok(outcome)
    }

    /// [`Self::prepare_corrections`] then [`Self::apply_corrections`].
    pub fn ingest_user_corrections(
        &self,
        handle: &Arc<RunHandle>,
        corrections: &[UserCorrection],
    ) -> Result<CorrectionOutcome, DirectorError> {
        match self.prepare_corrections(handle, corrections)? {
            Some(claim) => self.apply_corrections(&claim, corrections),
            None => Ok(CorrectionOutcome::default()),
        }
    }
}

/// Whether the run reached `done` after its latest audit was recorded.
fn settled_since_last_audit(claim: &WriterClaim) -> bool {
    for e in claim.events().iter().rev() {
        match &e.event {
            JournalEntry::AuditRecorded { .. } => return false,
            JournalEntry::StatusChanged { to: RunStatus::Done, .. } => return true,
            _ => {}
        }
    }
    false
}

/// Every repair pass is followed by exactly one audit.
fn audited_after_last_pass(state: &RunState) -> bool {
    let audits_needed = state.repair_passes as usize + 1;
    state.ci_history.len() >= audits_needed
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_id_is_stable_and_config_sensitive() {
        let script = crate::schema::parse_story_script(
            r#"{"Main Characters": [{"Name": "A", "Description": "a fox", "Category": "fox"}],
                "Story": [{"Location_Description": "d", "Image_Prompt": "a fox runs"}]}"#,
        )
        .unwrap();
        let c = EngineConfig::default();
        assert_eq!(default_run_id(&script, &c), default_run_id(&script, &c));
        let mut c2 = c.clone();
        c2.director.seed = 1;
        assert_ne!(default_run_id(&script, &c), default_run_id(&script, &c2));
        assert!(default_run_id(&script, &c).starts_with("run-"));
    }
}
