//! Consistency report produced by each audit.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityMatch {
    pub entity_name: String,
    pub panel_index: usize,
    pub matched: bool,
    /// Attributes the match relied on; non-empty when `matched`.
    pub match_basis: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mismatch {
    pub entity_name: String,
    pub attribute: String,
    pub observed: String,
    pub expected: String,
    pub intentional: bool,
    pub visible: bool,
    pub contextually_appropriate: bool,
    /// `!intentional && visible && contextually_appropriate`.
    pub validated: bool,
}

impl Mismatch {
    /// Sets the verification flags and derives `validated` from them.
    pub fn verified(mut self, contextually_appropriate: bool, visible: bool) -> Self {
        self.contextually_appropriate = contextually_appropriate;
        self.visible = visible;
        self.validated = !self.intentional && visible && contextually_appropriate;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameFinding {
    pub panel_index: usize,
    pub matches: Vec<EntityMatch>,
    /// Sorted by `(entity_name, attribute)`.
    pub mismatches: Vec<Mismatch>,
    /// Present iff at least one mismatch is validated.
    pub refined_prompt: Option<String>,
    /// Set when the frame could not be audited; such frames carry no
    /// findings and are never repaired.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl FrameFinding {
    pub fn failed(panel_index: usize, error: String) -> Self {
        Self {
            panel_index,
            matches: Vec::new(),
            mismatches: Vec::new(),
            refined_prompt: None,
            error: Some(error),
        }
    }

    pub fn is_repairable(&self) -> bool {
        self.refined_prompt.is_some() && self.error.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    /// Director iteration `T` at which the audit ran.
    pub audit_iteration: u32,
    /// 0-based count of audits before this one in the run.
    pub ordinal: u32,
    /// One finding per panel, in panel order.
    pub findings: Vec<FrameFinding>,
    /// Cosine similarity of each panel to the reference, in panel order.
    pub panel_similarity: Vec<f64>,
    pub s_cons: f64,
    pub ci: f64,
    pub repairable: Vec<usize>,
}

impl ConsistencyReport {
    pub fn finding(&self, panel_index: usize) -> Option<&FrameFinding> {
        self.findings.iter().find(|f| f.panel_index == panel_index)
    }

    /// Canonical bytes written to `report_<k>.json`.
    pub fn to_json_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("report serializes");
        out.push(b'\n');
        out
    }

    /// Structural invariants; returns every violation found.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(-1.0..=1.0).contains(&self.s_cons) {
            out.push(format!("s_cons {} outside [-1, 1]", self.s_cons));
        }
        if (self.ci - crate::audit::ci_from_similarity(self.s_cons)).abs() > 1e-12 {
            out.push("ci does not match s_cons".into());
        }
        for (k, f) in self.findings.iter().enumerate() {
            if f.panel_index != k + 1 {
                out.push(format!("finding {k} has panel_index {}", f.panel_index));
            }
            let any_validated = f.mismatches.iter().any(|m| m.validated);
            if any_validated != f.refined_prompt.is_some() {
                out.push(format!("panel {}: refined prompt presence disagrees with validation", f.panel_index));
            }
            for m in &f.mismatches {
                if m.validated != (!m.intentional && m.visible && m.contextually_appropriate) {
                    out.push(format!("panel {}: inconsistent mismatch flags", f.panel_index));
                }
            }
            for em in &f.matches {
                if em.matched && em.match_basis.is_empty() {
                    out.push(format!("panel {}: match without basis", f.panel_index));
                }
            }
        }
        if self.panel_similarity.len() != self.findings.len() {
            out.push("panel_similarity length differs from findings".into());
        }
        let expected: Vec<usize> = self
            .findings
            .iter()
            .filter(|f| f.is_repairable())
            .map(|f| f.panel_index)
            .collect();
        if expected != self.repairable {
            out.push("repairable set disagrees with findings".into());
        }
        out
    }
}
