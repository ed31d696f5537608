//! Shared run memory: the blackboard every agent reads and writes.
//!
//! Each run is a [`RunHandle`]. All mutations go through a [`WriterClaim`]
//! (at most one per run) and are expressed as [`JournalEntry`] values. A
//! mutation is first applied to a scratch copy of the state (validation),
//! then appended to `events.log`, and only then published. Loading a run
//! replays the journal, so `events.log` is the authority and `run.json` is a
//! readable checkpoint.
//!
//! Run directory:
//!
//! ```text
//! run.json            RunState checkpoint (image refs only)
//! events.log          one journal record per line
//! report_<k>.json     k-th audit report, 0-based
//! reference.<ext>     current reference image
//! panels/<i>.<ext>    current panel images, 1-based
//! objects/<sha256>    every image the run produced, content addressed
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc, Mutex, MutexGuard, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ClockMode, EngineConfig};
use crate::image::{ContentHash, ImageData, ImageRef, ImageStore};
use crate::report::ConsistencyReport;
use crate::schema::StoryScript;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Initializing,
    Auditing,
    Repairing,
    AwaitingUser,
    Done,
    Failed,
}

impl RunStatus {
    /// No pipeline work is pending in this status.
    pub fn is_settled(self) -> bool {
        matches!(self, RunStatus::Done | RunStatus::Failed | RunStatus::AwaitingUser)
    }

    pub fn can_transition_to(self, to: RunStatus) -> bool {
        use RunStatus::*;
        match (self, to) {
            (Failed, _) => false,
            (_, Failed) => true,
            (Initializing, Auditing)
            | (Auditing, Repairing)
            | (Auditing, Done)
            | (Repairing, Auditing)
            | (Done, AwaitingUser)
            | (Done, Repairing)
            | (AwaitingUser, Repairing) => true,
            _ => false,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Initializing => "initializing",
            RunStatus::Auditing => "auditing",
            RunStatus::Repairing => "repairing",
            RunStatus::AwaitingUser => "awaiting_user",
            RunStatus::Done => "done",
            RunStatus::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelState {
    pub index: usize,
    pub image: ImageRef,
    pub conditioning_scale: f64,
    /// Edit attempts in the current repair pass.
    pub attempt_count: u32,
    /// Attempts ran out in the current pass; the next audit revisits it.
    pub skipped: bool,
    pub last_refined_prompt: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditOutcome {
    Accepted,
    TooSubtle,
    OverEdited,
    Skipped,
    /// The editor or embedder returned an error; the attempt still counts.
    Failed,
}

impl EditOutcome {
    fn is_attempt(self) -> bool {
        !matches!(self, EditOutcome::Skipped)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditEvent {
    pub panel_index: usize,
    /// Ordinal of the repair pass (0-based, counted over all passes).
    pub pass: u32,
    /// 1-based attempt within the pass; for `skipped` the attempts used.
    pub attempt: u32,
    pub before: ImageRef,
    pub after: ImageRef,
    pub prompt: String,
    pub scale: f64,
    /// Panel scale after this event.
    pub next_scale: f64,
    pub outcome: EditOutcome,
    /// `100·(cos(after, R)+1)/2`, when measured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity_to_reference: Option<f64>,
    /// `cos(before, after)`, when measured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub change_cosine: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Stamped by shared memory on commit; equals the journal record's `at`.
    pub timestamp: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PassKind {
    /// Driven by an audit report; completing it advances `T`.
    Audit,
    /// Driven by user corrections; `T` is unchanged.
    UserCorrection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedFrame {
    pub panel_index: usize,
    pub prompt: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameResult {
    Accepted,
    Skipped,
    /// Every attempt ended in a backend error.
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSummary {
    pub panel_index: usize,
    pub result: FrameResult,
    pub attempts: u32,
    /// Conditioning scales of the attempts, in order.
    pub scales: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RepairSummary {
    pub attempted: Vec<usize>,
    pub accepted: Vec<usize>,
    pub skipped: Vec<usize>,
    pub failed: Vec<usize>,
}

impl RepairSummary {
    pub fn from_frames(frames: &[FrameSummary]) -> Self {
        let mut s = RepairSummary::default();
        for f in frames {
            s.attempted.push(f.panel_index);
            match f.result {
                FrameResult::Accepted => s.accepted.push(f.panel_index),
                FrameResult::Skipped => s.skipped.push(f.panel_index),
                FrameResult::Failed => s.failed.push(f.panel_index),
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassState {
    pub ordinal: u32,
    pub kind: PassKind,
    pub plan: Vec<PlannedFrame>,
    pub completed: Vec<FrameSummary>,
}

impl PassState {
    /// Planned frames without a completion record, in plan order.
    pub fn remaining(&self) -> Vec<PlannedFrame> {
        self.plan
            .iter()
            .filter(|p| !self.completed.iter().any(|c| c.panel_index == p.panel_index))
            .cloned()
            .collect()
    }
}

/// Point-in-time view of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub run_id: String,
    pub script: StoryScript,
    pub config: EngineConfig,
    pub status: RunStatus,
    pub reference: Option<ImageRef>,
    pub panels: Vec<PanelState>,
    /// Director iteration `T`.
    #[serde(rename = "T")]
    pub iteration: u32,
    pub ci_history: Vec<f64>,
    pub latest_report: Option<ConsistencyReport>,
    pub report_files: Vec<String>,
    pub edit_log: Vec<EditEvent>,
    pub repair_passes: u32,
    pub current_pass: Option<PassState>,
    /// Kind of the most recently completed pass.
    #[serde(default)]
    pub last_pass_kind: Option<PassKind>,
    pub diagnostics: Vec<String>,
    /// Sequence number of the last applied journal entry.
    pub seq: u64,
}

impl RunState {
    fn new(run_id: String, script: StoryScript, config: EngineConfig) -> Self {
        Self {
            run_id,
            script,
            config,
            status: RunStatus::Initializing,
            reference: None,
            panels: Vec::new(),
            iteration: 0,
            ci_history: Vec::new(),
            latest_report: None,
            report_files: Vec::new(),
            edit_log: Vec::new(),
            repair_passes: 0,
            current_pass: None,
            last_pass_kind: None,
            diagnostics: Vec::new(),
            seq: 0,
        }
    }

    pub fn panel(&self, index: usize) -> Option<&PanelState> {
        index.checked_sub(1).and_then(|k| self.panels.get(k))
    }

    pub fn latest_ci(&self) -> Option<f64> {
        self.ci_history.last().copied()
    }

    pub fn audits(&self) -> usize {
        self.ci_history.len()
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn digest(&self) -> ContentHash {
        ContentHash(Sha256::digest(serde_json::to_vec(self).expect("state serializes")).into())
    }

    /// Content hashes of the reference and panels, in order.
    pub fn image_hashes(&self) -> Vec<ContentHash> {
        self.reference
            .iter()
            .chain(self.panels.iter().map(|p| &p.image))
            .map(|r| r.content_hash)
            .collect()
    }

    fn pass_mut(&mut self) -> Result<&mut PassState, MemoryError> {
        self.current_pass
            .as_mut()
            .ok_or_else(|| MemoryError::Invalid("no repair pass in progress".into()))
    }

    /// Applies one journal entry, validating it against the current state.
    fn apply(&mut self, entry: &JournalEntry) -> Result<(), MemoryError> {
        let invalid = |m: String| Err(MemoryError::Invalid(m));
        match entry {
            JournalEntry::Created { .. } => return invalid("run already created".into()),
            JournalEntry::ReferenceGenerated { image } => {
                if self.status != RunStatus::Initializing || self.reference.is_some() {
                    return invalid("reference is immutable once set".into());
                }
                self.reference = Some(image.clone());
            }
            JournalEntry::PanelGenerated { index, image, scale } => {
                if self.status != RunStatus::Initializing || self.reference.is_none() {
                    return invalid("panels are generated during initialization, after the reference".into());
                }
                if *index != self.panels.len() + 1 || *index > self.script.panel_count() {
                    return Err(MemoryError::BadIndex(*index));
                }
                self.check_scale(*scale)?;
                self.panels.push(PanelState {
                    index: *index,
                    image: image.clone(),
                    conditioning_scale: *scale,
                    attempt_count: 0,
                    skipped: false,
                    last_refined_prompt: None,
                });
            }
            JournalEntry::StatusChanged { to, reason } => {
                if !self.status.can_transition_to(*to) {
                    return invalid(format!(
                        "status cannot move from {} to {}",
                        self.status.as_str(),
                        to.as_str()
                    ));
                }
                if *to == RunStatus::Auditing
                    && self.status == RunStatus::Initializing
                    && self.panels.len() != self.script.panel_count()
                {
                    return invalid("initialization incomplete".into());
                }
                if *to == RunStatus::Auditing && self.current_pass.is_some() {
                    return invalid("repair pass still open".into());
                }
                if let Some(r) = reason {
                    self.diagnostics.push(r.clone());
                }
                self.status = *to;
            }
            JournalEntry::AuditRecorded { report_file, ci, .. } => {
                if self.status != RunStatus::Auditing {
                    return invalid("audits are recorded while auditing".into());
                }
                if !(0.0..=100.0).contains(ci) {
                    return Err(MemoryError::OutOfRangeCi(*ci));
                }
                self.ci_history.push(*ci);
                self.report_files.push(report_file.clone());
            }
            JournalEntry::RepairPassStarted { ordinal, kind, plan } => {
                if self.status != RunStatus::Repairing || self.current_pass.is_some() {
                    return invalid("repair pass cannot start here".into());
                }
                if *ordinal != self.repair_passes {
                    return invalid(format!("pass ordinal {ordinal}, expected {}", self.repair_passes));
                }
                for p in plan {
                    if self.panel(p.panel_index).is_none() {
                        return Err(MemoryError::BadIndex(p.panel_index));
                    }
                }
                for p in &mut self.panels {
                    p.attempt_count = 0;
                    p.skipped = false;
                }
                for p in plan {
                    self.panels[p.panel_index - 1].last_refined_prompt = Some(p.prompt.clone());
                }
                self.current_pass = Some(PassState {
                    ordinal: *ordinal,
                    kind: *kind,
                    plan: plan.clone(),
                    completed: Vec::new(),
                });
            }
            JournalEntry::PanelEdited { event } => self.apply_edit(event)?,
            JournalEntry::FrameRepaired { summary } => {
                let pass = self.pass_mut()?;
                if !pass.plan.iter().any(|p| p.panel_index == summary.panel_index)
                    || pass.completed.iter().any(|c| c.panel_index == summary.panel_index)
                {
                    return Err(MemoryError::BadIndex(summary.panel_index));
                }
                pass.completed.push(summary.clone());
            }
            JournalEntry::RepairPassCompleted { ordinal } => {
                let pass = self.pass_mut()?;
                if pass.ordinal != *ordinal || !pass.remaining().is_empty() {
                    return invalid("repair pass has unfinished frames".into());
                }
                let kind = pass.kind;
                self.current_pass = None;
                self.last_pass_kind = Some(kind);
                self.repair_passes += 1;
                if kind == PassKind::Audit {
                    self.iteration += 1;
                }
            }
            JournalEntry::Note { message } => self.diagnostics.push(message.clone()),
        }
        Ok(())
    }

    fn check_scale(&self, scale: f64) -> Result<(), MemoryError> {
        let c = &self.config.controller;
        if !(c.scale_min..=c.scale_max).contains(&scale) {
            return Err(MemoryError::Invalid(format!(
                "scale {scale} outside [{}, {}]",
                c.scale_min, c.scale_max
            )));
        }
        Ok(())
    }

    fn apply_edit(&mut self, e: &EditEvent) -> Result<(), MemoryError> {
        let pass = self
            .current_pass
            .as_ref()
            .ok_or_else(|| MemoryError::Invalid("edits happen inside a repair pass".into()))?;
        if pass.ordinal != e.pass || !pass.plan.iter().any(|p| p.panel_index == e.panel_index) {
            return Err(MemoryError::BadIndex(e.panel_index));
        }
        if pass.completed.iter().any(|c| c.panel_index == e.panel_index) {
            return Err(MemoryError::Invalid(format!("panel {} already finished this pass", e.panel_index)));
        }
        self.check_scale(e.next_scale)?;
        let max_attempts = self.config.controller.max_attempts;
        let panel = self
            .panel(e.panel_index)
            .ok_or(MemoryError::BadIndex(e.panel_index))?;
        if e.before != panel.image {
            return Err(MemoryError::Invalid(format!(
                "edit of panel {} does not start from its current image",
                e.panel_index
            )));
        }
        let same = e.before == e.after;
        match e.outcome {
            EditOutcome::TooSubtle | EditOutcome::Skipped | EditOutcome::Failed => {}
            EditOutcome::Accepted | EditOutcome::OverEdited if same => {
                return Err(MemoryError::Invalid("an applied edit must change the image".into()))
            }
            _ => {}
        }
        if matches!(e.outcome, EditOutcome::Skipped | EditOutcome::Failed) && !same {
            return Err(MemoryError::Invalid("skipped and failed events keep the image".into()));
        }
        if e.outcome.is_attempt() && panel.attempt_count >= max_attempts {
            return Err(MemoryError::Invalid(format!(
                "panel {} exceeded {max_attempts} attempts",
                e.panel_index
            )));
        }
        let panel = &mut self.panels[e.panel_index - 1];
        if e.outcome.is_attempt() {
            panel.attempt_count += 1;
        }
        panel.conditioning_scale = e.next_scale;
        match e.outcome {
            EditOutcome::Accepted => {
                panel.image = e.after.clone();
                panel.skipped = false;
            }
            EditOutcome::Skipped => panel.skipped = true,
            _ => {}
        }
        self.edit_log.push(e.clone());
        Ok(())
    }
}

/// One mutation of a run, as written to `events.log`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum JournalEntry {
    Created {
        run_id: String,
        script: StoryScript,
        config: EngineConfig,
    },
    ReferenceGenerated {
        image: ImageRef,
    },
    PanelGenerated {
        index: usize,
        image: ImageRef,
        scale: f64,
    },
    StatusChanged {
        to: RunStatus,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reason: Option<String>,
    },
    AuditRecorded {
        report_file: String,
        report_hash: ContentHash,
        ci: f64,
        s_cons: f64,
        repairable: Vec<usize>,
    },
    RepairPassStarted {
        ordinal: u32,
        kind: PassKind,
        plan: Vec<PlannedFrame>,
    },
    PanelEdited {
        event: EditEvent,
    },
    FrameRepaired {
        summary: FrameSummary,
    },
    RepairPassCompleted {
        ordinal: u32,
    },
    Note {
        message: String,
    },
}

impl JournalEntry {
    pub fn kind(&self) -> &'static str {
        match self {
            JournalEntry::Created { .. } => "created",
            JournalEntry::ReferenceGenerated { .. } => "reference_generated",
            JournalEntry::PanelGenerated { .. } => "panel_generated",
            JournalEntry::StatusChanged { .. } => "status_changed",
            JournalEntry::AuditRecorded { .. } => "audit_recorded",
            JournalEntry::RepairPassStarted { .. } => "repair_pass_started",
            JournalEntry::PanelEdited { .. } => "panel_edited",
            JournalEntry::FrameRepaired { .. } => "frame_repaired",
            JournalEntry::RepairPassCompleted { .. } => "repair_pass_completed",
            JournalEntry::Note { .. } => "note",
        }
    }
}

/// A line of `events.log`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalRecord {
    pub seq: u64,
    pub at: u64,
    pub entry: JournalEntry,
}

/// What subscribers receive: the journal record plus the run's headline
/// numbers after it was applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressEvent {
    pub seq: u64,
    pub at: u64,
    pub run_id: String,
    pub status: RunStatus,
    #[serde(rename = "T")]
    pub iteration: u32,
    pub ci: Option<f64>,
    pub event: JournalEntry,
}

impl ProgressEvent {
    fn of(state: &RunState, record: &JournalRecord) -> Self {
        Self {
            seq: record.seq,
            at: record.at,
            run_id: state.run_id.clone(),
            status: state.status,
            iteration: state.iteration,
            ci: state.latest_ci(),
            event: record.entry.clone(),
        }
    }

    pub fn panel_edit(&self) -> Option<&EditEvent> {
        match &self.event {
            JournalEntry::PanelEdited { event } => Some(event),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MemoryError {
    #[error("unknown run `{0}`")]
    UnknownRun(String),
    #[error("run `{0}` already exists")]
    RunExists(String),
    #[error("run is busy")]
    Busy,
    #[error("bad panel index {0}")]
    BadIndex(usize),
    #[error("consistency index {0} outside [0, 100]")]
    OutOfRangeCi(f64),
    #[error("invalid update: {0}")]
    Invalid(String),
    #[error("unknown image {0}")]
    UnknownImage(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("corrupt run: {0}")]
    CorruptRun(String),
    /// Raised by the crash hook instead of persisting an event.
    #[error("simulated crash before event {0}")]
    Crashed(u64),
}

fn io_err(path: &Path, e: std::io::Error) -> MemoryError {
    MemoryError::Io(format!("{}: {e}", path.display()))
}

type Sink = Box<dyn FnMut(&ProgressEvent) -> bool + Send>;

struct Inner {
    state: RunState,
    events: Vec<ProgressEvent>,
    sinks: Vec<Sink>,
    journal: Option<File>,
    crash_after: Option<u64>,
}

/// One run held in memory, optionally backed by a run directory.
pub struct RunHandle {
    run_id: String,
    dir: Option<PathBuf>,
    images: ImageStore,
    inner: Mutex<Inner>,
    active: AtomicBool,
}

impl std::fmt::Debug for RunHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RunHandle")
            .field("run_id", &self.run_id)
            .field("dir", &self.dir)
            .finish()
    }
}

impl RunHandle {
    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().expect("run state poisoned")
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn snapshot(&self) -> RunState {
        self.lock().state.clone()
    }

    pub fn status(&self) -> RunStatus {
        self.lock().state.status
    }

    pub fn events(&self) -> Vec<ProgressEvent> {
        self.lock().events.clone()
    }

    pub fn image(&self, image: &ImageRef) -> Option<ImageData> {
        self.images.get(&image.content_hash)
    }

    /// Whether a writer currently holds the run.
    pub fn is_active(&self) -> bool {
        self.active.load(Ordering::SeqCst)
    }

    /// Makes the journal refuse every event after sequence number `seq`,
    /// as if the process died right after persisting it.
    pub fn crash_after(&self, seq: Option<u64>) {
        self.lock().crash_after = seq;
    }

    /// Takes the single writer slot.
    pub fn claim(self: &Arc<Self>) -> Result<WriterClaim, MemoryError> {
        self.active
            .compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst)
            .map_err(|_| MemoryError::Busy)?;
        Ok(WriterClaim { run: self.clone() })
    }

    /// Registers `sink` for future events and returns all past events, in
    /// one atomic step. The sink is dropped once it returns `false`.
    pub fn subscribe_with(&self, sink: Sink) -> (Vec<ProgressEvent>, RunStatus) {
        let mut inner = self.lock();
        inner.sinks.push(sink);
        (inner.events.clone(), inner.state.status)
    }

    /// Channel flavour of [`Self::subscribe_with`].
    pub fn subscribe(&self) -> (Vec<ProgressEvent>, RunStatus, mpsc::Receiver<ProgressEvent>) {
        let (tx, rx) = mpsc::channel();
        let (past, status) = self.subscribe_with(Box::new(move |e| tx.send(e.clone()).is_ok()));
        (past, status, rx)
    }

    fn now(&self, clock: ClockMode, seq: u64) -> u64 {
        match clock {
            ClockMode::Logical => seq,
            ClockMode::System => SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0),
        }
    }

    fn commit(&self, entry: JournalEntry) -> Result<ProgressEvent, MemoryError> {
        self.commit_with(entry, None)
    }

    /// Validate, journal, publish. An audit's report becomes visible in
    /// the same step as its CI.
    fn commit_with(
        &self,
        entry: JournalEntry,
        report: Option<ConsistencyReport>,
    ) -> Result<ProgressEvent, MemoryError> {
        let mut entry = entry;
        let mut inner = self.lock();
        let seq = inner.state.seq + 1;
        let at = self.now(inner.state.config.clock, seq);
        if let JournalEntry::PanelEdited { event } = &mut entry {
            event.timestamp = at;
        }
        let mut next = inner.state.clone();
        next.apply(&entry)?;
        if report.is_some() {
            next.latest_report = report;
        }
        if inner.crash_after.is_some_and(|k| seq > k) {
            return Err(MemoryError::Crashed(seq));
        }
        next.seq = seq;
        let record = JournalRecord { seq, at, entry };
        if let Some(journal) = inner.journal.as_mut() {
            let mut line = serde_json::to_vec(&record).expect("journal record serializes");
            line.push(b'\n');
            let path = self.dir.as_ref().expect("journal implies dir").join(EVENTS_FILE);
            journal.write_all(&line).map_err(|e| io_err(&path, e))?;
            journal.flush().map_err(|e| io_err(&path, e))?;
        }
        let event = ProgressEvent::of(&next, &record);
        inner.state = next;
        inner.events.push(event.clone());
        inner.sinks.retain_mut(|sink| sink(&event));
        if let Some(dir) = &self.dir {
            write_checkpoint(dir, &inner.state, &self.images)?;
        }
        Ok(event)
    }

    fn store_image(&self, image: &ImageData) -> Result<ImageRef, MemoryError> {
        let r = image.image_ref();
        if let Some(dir) = &self.dir {
            let path = dir.join(OBJECTS_DIR).join(r.content_hash.to_hex());
            if !path.exists() {
                write_atomic(&path, &image.bytes)?;
            }
        }
        self.images.put(image.clone());
        Ok(r)
    }
}

/// Exclusive write access to one run; released on drop.
pub struct WriterClaim {
    run: Arc<RunHandle>,
}

impl Drop for WriterClaim {
    fn drop(&mut self) {
        self.run.active.store(false, Ordering::SeqCst);
    }
}

impl std::ops::Deref for WriterClaim {
    type Target = RunHandle;
    fn deref(&self) -> &RunHandle {
        &self.run
    }
}

impl WriterClaim {
    pub fn handle(&self) -> &Arc<RunHandle> {
        &self.run
    }

    /// Stores image bytes so later entries can refer to them.
    pub fn put_image(&self, image: &ImageData) -> Result<ImageRef, MemoryError> {
        self.run.store_image(image)
    }

    fn require_image(&self, image: &ImageRef) -> Result<(), MemoryError> {
        if self.run.images.contains(&image.content_hash) {
            Ok(())
        } else {
            Err(MemoryError::UnknownImage(image.id.clone()))
        }
    }

    pub fn set_reference(&self, image: &ImageRef) -> Result<ProgressEvent, MemoryError> {
        self.require_image(image)?;
        self.run.commit(JournalEntry::ReferenceGenerated { image: image.clone() })
    }

    pub fn add_panel(&self, index: usize, image: &ImageRef, scale: f64) -> Result<ProgressEvent, MemoryError> {
        self.require_image(image)?;
        self.run.commit(JournalEntry::PanelGenerated {
            index,
            image: image.clone(),
            scale,
        })
    }

    pub fn set_status(&self, to: RunStatus, reason: Option<String>) -> Result<ProgressEvent, MemoryError> {
        self.run.commit(JournalEntry::StatusChanged { to, reason })
    }

    pub fn note(&self, message: impl Into<String>) -> Result<ProgressEvent, MemoryError> {
        self.run.commit(JournalEntry::Note {
            message: message.into(),
        })
    }

    /// Writes `report_<k>.json` and appends the CI to the history.
    pub fn record_audit(&self, report: &ConsistencyReport) -> Result<ProgressEvent, MemoryError> {
        if !(0.0..=100.0).contains(&report.ci) || report.ci.is_nan() {
            return Err(MemoryError::OutOfRangeCi(report.ci));
        }
        let k = self.run.snapshot().ci_history.len();
        if report.ordinal as usize != k {
            return Err(MemoryError::Invalid(format!("report ordinal {} but {k} audits recorded", report.ordinal)));
        }
        let bytes = report.to_json_bytes();
        let report_file = format!("report_{k}.json");
        if let Some(dir) = &self.run.dir {
            write_atomic(&dir.join(&report_file), &bytes)?;
        }
        let entry = JournalEntry::AuditRecorded {
            report_file,
            report_hash: ContentHash::of(&bytes),
            ci: report.ci,
            s_cons: report.s_cons,
            repairable: report.repairable.clone(),
        };
        self.run.commit_with(entry, Some(report.clone()))
    }

    pub fn begin_repair_pass(&self, kind: PassKind, plan: Vec<PlannedFrame>) -> Result<ProgressEvent, MemoryError> {
        let ordinal = self.run.snapshot().repair_passes;
        self.run.commit(JournalEntry::RepairPassStarted { ordinal, kind, plan })
    }

    /// Records one edit attempt (or the skip marker) for a panel.
    pub fn apply_panel_update(&self, event: EditEvent) -> Result<ProgressEvent, MemoryError> {
        if event.outcome == EditOutcome::Accepted {
            self.require_image(&event.after)?;
        }
        self.run.commit(JournalEntry::PanelEdited { event })
    }

    pub fn finish_frame(&self, summary: FrameSummary) -> Result<ProgressEvent, MemoryError> {
        self.run.commit(JournalEntry::FrameRepaired { summary })
    }

    pub fn complete_repair_pass(&self) -> Result<ProgressEvent, MemoryError> {
        let ordinal = self
            .run
            .snapshot()
            .current_pass
            .map(|p| p.ordinal)
            .ok_or_else(|| MemoryError::Invalid("no repair pass in progress".into()))?;
        self.run.commit(JournalEntry::RepairPassCompleted { ordinal })
    }
}

pub const RUN_FILE: &str = "run.json";
pub const EVENTS_FILE: &str = "events.log";
pub const OBJECTS_DIR: &str = "objects";
pub const PANELS_DIR: &str = "panels";

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), MemoryError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    let tmp = path.with_extension(format!(
        "{}tmp",
        path.extension().map(|e| format!("{}.", e.to_string_lossy())).unwrap_or_default()
    ));
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

/// Rewrites `run.json` and the current reference/panel copies.
fn write_checkpoint(dir: &Path, state: &RunState, images: &ImageStore) -> Result<(), MemoryError> {
    let mut json = serde_json::to_vec_pretty(state).expect("state serializes");
    json.push(b'\n');
    write_atomic(&dir.join(RUN_FILE), &json)?;
    let copy = |r: &ImageRef, path: PathBuf| -> Result<(), MemoryError> {
        let Some(img) = images.get(&r.content_hash) else {
            return Ok(());
        };
        if fs::read(&path).map(|b| b == *img.bytes).unwrap_or(false) {
            return Ok(());
        }
        write_atomic(&path, &img.bytes)
    };
    if let Some(r) = &state.reference {
        copy(r, dir.join(format!("reference.{}", r.extension())))?;
    }
    for p in &state.panels {
        copy(&p.image, dir.join(PANELS_DIR).join(format!("{}.{}", p.index, p.image.extension())))?;
    }
    Ok(())
}

/// A run reconstructed from its directory.
pub struct LoadedRun {
    pub state: RunState,
    pub events: Vec<ProgressEvent>,
    pub images: ImageStore,
    /// Byte length of the journal prefix that parsed cleanly.
    journal_len: u64,
}

/// Replays `events.log` (ignoring a torn final line) and checks every
/// referenced report and current image against its recorded hash.
pub fn load_run_dir(dir: &Path) -> Result<LoadedRun, MemoryError> {
    let journal_path = dir.join(EVENTS_FILE);
    let text = fs::read(&journal_path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => MemoryError::CorruptRun(format!("{} is missing", journal_path.display())),
        _ => io_err(&journal_path, e),
    })?;
    let mut records = Vec::new();
    let mut good_len = 0u64;
    let mut offset = 0usize;
    while offset < text.len() {
        let end = text[offset..].iter().position(|b| *b == b'\n');
        let (line, complete) = match end {
            Some(e) => (&text[offset..offset + e], true),
            None => (&text[offset..], false),
        };
        let next = offset + line.len() + usize::from(complete);
        match serde_json::from_slice::<JournalRecord>(line) {
            Ok(r) if complete => {
                records.push(r);
                good_len = next as u64;
            }
            _ if !complete => break,
            Ok(_) => unreachable!(),
            Err(e) => {
                return Err(MemoryError::CorruptRun(format!(
                    "events.log line {}: {e}",
                    records.len() + 1
                )))
            }
        }
        offset = next;
    }

    let mut iter = records.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| MemoryError::CorruptRun("events.log is empty".into()))?;
    let JournalEntry::Created { run_id, script, config } = &first.entry else {
        return Err(MemoryError::CorruptRun("events.log must start with `created`".into()));
    };
    let mut state = RunState::new(run_id.clone(), script.clone(), config.clone());
    state.seq = first.seq;
    let mut events = vec![ProgressEvent::of(&state, &first)];
    for record in iter {
        if record.seq != state.seq + 1 {
            return Err(MemoryError::CorruptRun(format!("sequence gap before {}", record.seq)));
        }
        state
            .apply(&record.entry)
            .map_err(|e| MemoryError::CorruptRun(format!("event {}: {e}", record.seq)))?;
        state.seq = record.seq;
        if let JournalEntry::AuditRecorded {
            report_file,
            report_hash,
            ..
        } = &record.entry
        {
            state.latest_report = Some(read_report(dir, report_file, report_hash)?);
        }
        events.push(ProgressEvent::of(&state, &record));
    }

    let images = ImageStore::new();
    let objects = dir.join(OBJECTS_DIR);
    if let Ok(entries) = fs::read_dir(&objects) {
        let media: BTreeMap<ContentHash, String> = state
            .reference
            .iter()
            .chain(state.panels.iter().map(|p| &p.image))
            .chain(state.edit_log.iter().flat_map(|e| [&e.before, &e.after]))
            .map(|r| (r.content_hash, r.media_type.clone()))
            .collect();
        for entry in entries.flatten() {
            let name = entry.file_name().to_string_lossy().into_owned();
            let Some(hash) = ContentHash::from_hex(&name) else {
                continue;
            };
            let Some(media_type) = media.get(&hash) else {
                continue;
            };
            let bytes = fs::read(entry.path()).map_err(|e| io_err(&entry.path(), e))?;
            if ContentHash::of(&bytes) != hash {
                return Err(MemoryError::CorruptRun(format!("object {name} does not match its hash")));
            }
            images.put(ImageData::new(media_type.clone(), bytes));
        }
    }
    for r in state.reference.iter().chain(state.panels.iter().map(|p| &p.image)) {
        if !images.contains(&r.content_hash) {
            return Err(MemoryError::CorruptRun(format!("image {} is missing from objects/", r.content_hash)));
        }
    }
    if let Ok(bytes) = fs::read(dir.join(RUN_FILE)) {
        let checkpoint: RunState = serde_json::from_slice(&bytes)
            .map_err(|e| MemoryError::CorruptRun(format!("run.json: {e}")))?;
        if checkpoint.run_id != state.run_id || checkpoint.seq > state.seq {
            return Err(MemoryError::CorruptRun("run.json is ahead of events.log".into()));
        }
    }
    Ok(LoadedRun {
        state,
        events,
        images,
        journal_len: good_len,
    })
}

fn read_report(dir: &Path, file: &str, hash: &ContentHash) -> Result<ConsistencyReport, MemoryError> {
    let path = dir.join(file);
    let bytes = fs::read(&path).map_err(|e| MemoryError::CorruptRun(format!("{file}: {e}")))?;
    if ContentHash::of(&bytes) != *hash {
        return Err(MemoryError::CorruptRun(format!("{file} does not match its recorded hash")));
    }
    serde_json::from_slice(&bytes).map_err(|e| MemoryError::CorruptRun(format!("{file}: {e}")))
}

/// Reads a run directory without registering it anywhere.
pub fn load(dir: &Path) -> Result<RunState, MemoryError> {
    load_run_dir(dir).map(|l| l.state)
}

/// Summary row for listings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub status: RunStatus,
    #[serde(rename = "T")]
    pub iteration: u32,
    pub ci: Option<f64>,
    pub panels: usize,
}

/// Registry of runs, optionally persisted under a root directory.
#[derive(Default)]
pub struct SharedMemory {
    root: Option<PathBuf>,
    runs: RwLock<BTreeMap<String, Arc<RunHandle>>>,
}

impl SharedMemory {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Runs are persisted to `root/<run_id>/`.
    pub fn persistent(root: impl Into<PathBuf>) -> Self {
        Self {
            root: Some(root.into()),
            runs: RwLock::default(),
        }
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn create_run(
        &self,
        run_id: &str,
        script: StoryScript,
        config: EngineConfig,
    ) -> Result<Arc<RunHandle>, MemoryError> {
        if run_id.is_empty() || run_id.contains(['/', '\\']) || run_id.starts_with('.') {
            return Err(MemoryError::Invalid(format!("run id `{run_id}` is not a plain name")));
        }
        let mut runs = self.runs.write().expect("registry poisoned");
        if runs.contains_key(run_id) {
            return Err(MemoryError::RunExists(run_id.into()));
        }
        let dir = self.root.as_ref().map(|r| r.join(run_id));
        let state = RunState::new(run_id.to_owned(), script.clone(), config.clone());
        let record = JournalRecord {
            seq: 1,
            at: match config.clock {
                ClockMode::Logical => 1,
                ClockMode::System => SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_millis() as u64)
                    .unwrap_or(0),
            },
            entry: JournalEntry::Created {
                run_id: run_id.to_owned(),
                script,
                config,
            },
        };
        let mut state = state;
        state.seq = 1;
        let journal = match &dir {
            Some(dir) => {
                if dir.join(EVENTS_FILE).exists() {
                    return Err(MemoryError::RunExists(run_id.into()));
                }
                fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
                let path = dir.join(EVENTS_FILE);
                let mut f = OpenOptions::new()
                    .create_new(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| io_err(&path, e))?;
                let mut line = serde_json::to_vec(&record).expect("journal record serializes");
                line.push(b'\n');
                f.write_all(&line).map_err(|e| io_err(&path, e))?;
                Some(f)
            }
            None => None,
        };
        let events = vec![ProgressEvent::of(&state, &record)];
        let handle = Arc::new(RunHandle {
            run_id: run_id.to_owned(),
            dir: dir.clone(),
            images: ImageStore::new(),
            inner: Mutex::new(Inner {
                state,
                events,
                sinks: Vec::new(),
                journal,
                crash_after: None,
            }),
            active: AtomicBool::new(false),
        });
        if let Some(dir) = &dir {
            write_checkpoint(dir, &handle.snapshot(), &handle.images)?;
        }
        runs.insert(run_id.to_owned(), handle.clone());
        Ok(handle)
    }

    /// Loads a run directory and registers it for further work.
    pub fn open(&self, dir: &Path) -> Result<Arc<RunHandle>, MemoryError> {
        let loaded = load_run_dir(dir)?;
        let path = dir.join(EVENTS_FILE);
        let file = OpenOptions::new()
            .write(true)
            .open(&path)
            .map_err(|e| io_err(&path, e))?;
        // drop a torn trailing line before appending
        file.set_len(loaded.journal_len).map_err(|e| io_err(&path, e))?;
        drop(file);
        let journal = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| io_err(&path, e))?;
        let run_id = loaded.state.run_id.clone();
        let handle = Arc::new(RunHandle {
            run_id: run_id.clone(),
            dir: Some(dir.to_path_buf()),
            images: loaded.images,
            inner: Mutex::new(Inner {
                state: loaded.state,
                events: loaded.events,
                sinks: Vec::new(),
                journal: Some(journal),
                crash_after: None,
            }),
            active: AtomicBool::new(false),
        });
        write_checkpoint(dir, &handle.snapshot(), &handle.images)?;
        let mut runs = self.runs.write().expect("registry poisoned");
        if runs.get(&run_id).is_some_and(|h| h.is_active()) {
            return Err(MemoryError::Busy);
        }
        runs.insert(run_id, handle.clone());
        Ok(handle)
    }

    /// Registers every run directory found under the root.
    pub fn open_all(&self) -> Vec<(PathBuf, MemoryError)> {
        let mut errors = Vec::new();
        let Some(root) = &self.root else {
            return errors;
        };
        let Ok(entries) = fs::read_dir(root) else {
            return errors;
        };
        let mut dirs: Vec<PathBuf> = entries
            .flatten()
            .map(|e| e.path())
            .filter(|p| p.join(EVENTS_FILE).is_file())
            .collect();
        dirs.sort();
        for dir in dirs {
            if let Err(e) = self.open(&dir) {
                errors.push((dir, e));
            }
        }
        errors
    }

    pub fn get(&self, run_id: &str) -> Result<Arc<RunHandle>, MemoryError> {
        self.runs
            .read()
            .expect("registry poisoned")
            .get(run_id)
            .cloned()
            .ok_or_else(|| MemoryError::UnknownRun(run_id.into()))
    }

    pub fn contains(&self, run_id: &str) -> bool {
        self.runs.read().expect("registry poisoned").contains_key(run_id)
    }

    pub fn snapshot(&self, run_id: &str) -> Result<RunState, MemoryError> {
        Ok(self.get(run_id)?.snapshot())
    }

    pub fn list(&self) -> Vec<RunSummary> {
        self.runs
            .read()
            .expect("registry poisoned")
            .values()
            .map(|h| {
                let s = h.snapshot();
                RunSummary {
                    run_id: s.run_id.clone(),
                    status: s.status,
                    iteration: s.iteration,
                    ci: s.latest_ci(),
                    panels: s.panels.len(),
                }
            })
            .collect()
    }

    pub fn record_audit(&self, run_id: &str, report: &ConsistencyReport) -> Result<ProgressEvent, MemoryError> {
        self.get(run_id)?.claim()?.record_audit(report)
    }

    pub fn apply_panel_update(&self, run_id: &str, event: EditEvent) -> Result<ProgressEvent, MemoryError> {
        self.get(run_id)?.claim()?.apply_panel_update(event)
    }

    /// Rewrites `run.json` and the image copies of a persisted run.
    pub fn persist(&self, run_id: &str) -> Result<(), MemoryError> {
        let h = self.get(run_id)?;
        match &h.dir {
            Some(dir) => write_checkpoint(dir, &h.snapshot(), &h.images),
            None => Err(MemoryError::Invalid("run has no directory".into())),
        }
    }
}
