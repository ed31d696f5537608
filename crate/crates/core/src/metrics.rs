//! Evaluation harness: all-pairs similarity and perceptual distance,
//! foreground-masked variants, external per-image scores, and corpus
//! aggregation into mean ± population-std tables.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::cosine;
use crate::backend::{BackendError, EmbedderHandle, ImageSegmenter, PerceptualMetric};
use crate::image::{composite_on_white, ImageData, Mask};

pub const CLIP_I: &str = "CLIP-I";
pub const DINO: &str = "DINO";
pub const LPIPS: &str = "LPIPS";
pub const CLIP_T: &str = "CLIP-T";
pub const HPS: &str = "HPS";
pub const TIFA: &str = "TIFA";
pub const FG_SUFFIX: &str = "-FG";

/// Column order of the tables; other metrics follow alphabetically.
pub const COLUMN_ORDER: [&str; 9] = [
    CLIP_I, DINO, LPIPS, CLIP_T, HPS, TIFA, "CLIP-I-FG", "DINO-FG", "LPIPS-FG",
];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("pairwise metrics need at least 2 panels, got {0}")]
    TooFewPanels(usize),
    /// 0-based panel position.
    #[error("embedding of panel {0} is the zero vector")]
    ZeroVector(usize),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("scores file: {0}")]
    Scores(String),
}

/// Mean cosine over all `N(N-1)/2` unordered pairs.
pub fn pairwise_mean(vectors: &[Vec<f64>]) -> Result<f64, MetricsError> {
    let n = vectors.len();
    if n < 2 {
        return Err(MetricsError::TooFewPanels(n));
    }
    if let Some(k) = vectors.iter().position(|v| v.iter().all(|x| *x == 0.0)) {
        return Err(MetricsError::ZeroVector(k));
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for a in 0..n {
        for b in a + 1..n {
            sum += cosine(&vectors[a], &vectors[b]).ok_or(MetricsError::ZeroVector(b))?;
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

/// Embeds each panel once, then averages over all pairs.
pub fn pairwise_similarity(embedder: &EmbedderHandle, panels: &[ImageData]) -> Result<f64, MetricsError> {
    if panels.len() < 2 {
        return Err(MetricsError::TooFewPanels(panels.len()));
    }
    let vectors: Vec<Vec<f64>> = std::thread::scope(|s| {
        let hs: Vec<_> = panels.iter().map(|p| s.spawn(move || embedder.embed(p))).collect();
        hs.into_iter()
            .map(|h| h.join().expect("embedding thread panicked").map(|e| e.values().to_vec()))
            .collect::<Result<_, _>>()
    })?;
    pairwise_mean(&vectors)
}

/// Mean perceptual distance over all unordered pairs.
pub fn pairwise_distance(metric: &dyn PerceptualMetric, panels: &[ImageData]) -> Result<f64, MetricsError> {
    let n = panels.len();
    if n < 2 {
        return Err(MetricsError::TooFewPanels(n));
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for a in 0..n {
        for b in a + 1..n {
            sum += metric.distance(&panels[a], &panels[b])?;
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

/// Panels cut down to their segmented foreground on white.
#[derive(Debug, Clone, Default)]
pub struct Foreground {
    /// `None` for excluded panels, in panel order.
    pub images: Vec<Option<ImageData>>,
    pub warnings: Vec<String>,
}

impl Foreground {
    pub fn included(&self) -> Vec<ImageData> {
        self.images.iter().flatten().cloned().collect()
    }

    /// 1-based indices of panels left out of foreground scoring.
    pub fn excluded(&self) -> Vec<usize> {
        self.images
            .iter()
            .enumerate()
            .filter(|(_, i)| i.is_none())
            .map(|(k, _)| k + 1)
            .collect()
    }
}

/// Masks each panel to the union of its entity masks and composites it on
/// white. Panels whose union is empty, or whose segmentation fails, are
/// excluded with a warning.
pub fn foreground(segmenter: &dyn ImageSegmenter, panels: &[ImageData], labels: &[String]) -> Foreground {
    let mut out = Foreground::default();
    for (k, panel) in panels.iter().enumerate() {
        let i = k + 1;
        let mut union: Option<Mask> = None;
        let mut failed = None;
        for label in labels {
            match segmenter.segment(panel, label) {
                Ok(m) => {
                    let merged = match &union {
                        None => Some(m),
                        Some(u) => u.union(&m),
                    };
                    if merged.is_none() {
                        failed = Some(format!("mask for `{label}` has a different size"));
                        break;
                    }
                    union = merged;
                }
                Err(e) => {
                    failed = Some(format!("segmenting `{label}` failed: {e}"));
                    break;
                }
            }
        }
        let image = match (failed, union) {
            (Some(why), _) => {
                out.warnings.push(format!("panel {i} excluded: {why}"));
                None
            }
            (None, Some(m)) if !m.is_empty() => match composite_on_white(panel, &m) {
                Ok(img) => Some(img),
                Err(e) => {
                    out.warnings.push(format!("panel {i} excluded: {e}"));
                    None
                }
            },
            (None, _) => {
                out.warnings
                    .push(format!("panel {i} excluded: empty mask for {}", labels.join(", ")));
                None
            }
        };
        out.images.push(image);
    }
    out
}

/// Backends used for scoring; absent ones leave their columns empty.
#[derive(Clone)]
pub struct MetricBackends {
    pub dino: EmbedderHandle,
    pub clip: Option<EmbedderHandle>,
    pub perceptual: Option<Arc<dyn PerceptualMetric>>,
    pub segmenter: Option<Arc<dyn ImageSegmenter>>,
}

/// Scores of one story.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StoryMetrics {
    pub story: String,
    pub method: String,
    pub panels: usize,
    pub scores: BTreeMap<String, f64>,
    /// 1-based panels left out of the foreground columns.
    #[serde(default)]
    pub fg_excluded: Vec<usize>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// Computes every available column for one story.
pub fn story_metrics(
    backends: &MetricBackends,
    story: &str,
    method: &str,
    panels: &[ImageData],
    fg_labels: Option<&[String]>,
) -> Result<StoryMetrics, MetricsError> {
    let mut m = StoryMetrics {
        story: story.into(),
        method: method.into(),
        panels: panels.len(),
        ..Default::default()
    };
    score_into(&mut m.scores, backends, panels, "")?;
    if let (Some(labels), Some(seg)) = (fg_labels, &backends.segmenter) {
        let fg = foreground(seg.as_ref(), panels, labels);
        m.fg_excluded = fg.excluded();
        m.warnings.extend(fg.warnings.iter().cloned());
        let kept = fg.included();
        if kept.len() >= 2 {
            score_into(&mut m.scores, backends, &kept, FG_SUFFIX)?;
        } else {
            m.warnings
                .push(format!("foreground columns omitted: {} panel(s) left", kept.len()));
        }
    }
    Ok(m)
}

fn score_into(
    scores: &mut BTreeMap<String, f64>,
    b: &MetricBackends,
    panels: &[ImageData],
    suffix: &str,
) -> Result<(), MetricsError> {
    if let Some(clip) = &b.clip {
        scores.insert(format!("{CLIP_I}{suffix}"), pairwise_similarity(clip, panels)?);
    }
    scores.insert(format!("{DINO}{suffix}"), pairwise_similarity(&b.dino, panels)?);
    if let Some(p) = &b.perceptual {
        scores.insert(format!("{LPIPS}{suffix}"), pairwise_distance(p.as_ref(), panels)?);
    }
    Ok(())
}

/// Externally computed per-image scores: story → panel → metric → value.
pub type ScoresFile = BTreeMap<String, BTreeMap<String, BTreeMap<String, f64>>>;

pub fn load_scores(path: &Path) -> Result<ScoresFile, MetricsError> {
    let text = std::fs::read_to_string(path).map_err(|e| MetricsError::Scores(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| MetricsError::Scores(e.to_string()))
}

/// Adds the per-panel mean of each external metric for this story. Only
/// averages; nothing is scored here.
pub fn merge_external_scores(m: &mut StoryMetrics, scores: &ScoresFile) {
    let Some(per_panel) = scores.get(&m.story) else {
        return;
    };
    let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for metrics in per_panel.values() {
        for (name, v) in metrics {
            let e = sums.entry(name).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    for (name, (sum, n)) in sums {
        m.scores.insert(name.to_owned(), sum / n as f64);
    }
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub fn mean_std(values: &[f64]) -> Option<MeanStd> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some(MeanStd {
        mean,
        std: var.sqrt(),
        n: values.len(),
    })
}

/// `0.568±0.15`: mean to three decimals, deviation to two.
pub fn format_pm(v: &MeanStd) -> String {
    format!("{:.3}±{:.2}", v.mean, v.std)
}

/// Relative change of a foreground score against its full-frame score,
/// `(+14.5%)` style.
pub fn format_relative(fg: f64, full: f64) -> Option<String> {
    if full == 0.0 {
        return None;
    }
    let pct = 100.0 * (fg - full) / full;
    Some(format!("({}{:.1}%)", if pct >= 0.0 { "+" } else { "-" }, pct.abs()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub stories: usize,
    pub frames: usize,
    pub columns: BTreeMap<String, MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub columns: Vec<String>,
    pub rows: Vec<MethodRow>,
    pub notes: Vec<String>,
}

/// Groups stories by method (first-seen order) and reduces each metric to
/// mean ± population std over the stories that have it.
pub fn aggregate_corpus(stories: &[StoryMetrics]) -> CorpusReport {
    let mut order: Vec<&str> = Vec::new();
    for s in stories {
        if !order.contains(&s.method.as_str()) {
            order.push(&s.method);
        }
    }
    let mut names: Vec<String> = stories.iter().flat_map(|s| s.scores.keys().cloned()).collect();
    names.sort_by_key(|n| (COLUMN_ORDER.iter().position(|c| c == n).unwrap_or(COLUMN_ORDER.len()), n.clone()));
    names.dedup();
    let rows = order
        .iter()
        .map(|method| {
            let group: Vec<&StoryMetrics> = stories.iter().filter(|s| s.method == *method).collect();
            let columns = names
                .iter()
                .filter_map(|n| {
                    let vals: Vec<f64> = group.iter().filter_map(|s| s.scores.get(n).copied()).collect();
                    mean_std(&vals).map(|ms| (n.clone(), ms))
                })
                .collect();
            MethodRow {
                method: method.to_string(),
                stories: group.len(),
                frames: group.iter().map(|s| s.panels).sum(),
                columns,
            }
        })
        .collect();
    let mut notes = vec!["± is the population standard deviation over stories.".to_string()];
    let excluded: usize = stories.iter().map(|s| s.fg_excluded.len()).sum();
    if names.iter().any(|n| n.ends_with(FG_SUFFIX)) {
        notes.push(format!(
            "Foreground columns composite the union of character masks on white; panels with an empty mask are excluded ({excluded} excluded)."
        ));
    }
    CorpusReport {
        columns: names,
        rows,
        notes,
    }
}

impl CorpusReport {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["method".to_string(), "stories".into(), "frames".into()];
        for c in &self.columns {
            header.push(format!("{c}_mean"));
            header.push(format!("{c}_std"));
        }
        w.write_record(&header).expect("in-memory write");
        for r in &self.rows {
            let mut rec = vec![r.method.clone(), r.stories.to_string(), r.frames.to_string()];
            for c in &self.columns {
                match r.columns.get(c) {
                    Some(ms) => {
                        rec.push(format!("{}", ms.mean));
                        rec.push(format!("{}", ms.std));
                    }
                    None => {
                        rec.push(String::new());
                        rec.push(String::new());
                    }
                }
            }
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("csv is utf-8")
    }

    /// Table with one row per method. Foreground cells carry their change
    /// relative to the full-frame column when both exist.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        out.push_str("| Method |");
        for c in &self.columns {
            out.push_str(&format!(" {c} |"));
        }
        out.push_str("\n|---|");
        out.push_str(&"---|".repeat(self.columns.len()));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("| {} |", r.method));
            for c in &self.columns {
                let cell = match r.columns.get(c) {
                    None => "-".to_string(),
                    Some(ms) => {
                        let mut s = format_pm(ms);
                        if let Some(base) = c.strip_suffix(FG_SUFFIX).and_then(|b| r.columns.get(b)) {
                            if let Some(rel) = format_relative(ms.mean, base.mean) {
                                s.push(' ');
                                s.push_str(&rel);
                            }
                        }
                        s
                    }
                };
                out.push_str(&format!(" {cell} |"));
            }
            out.push('\n');
        }
        out.push('\n');
        for n in &self.notes {
            out.push_str(&format!("{n}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_stories_half_and_tenth() {
        let ms = mean_std(&[0.4, 0.6]).unwrap();
        assert!((ms.mean - 0.5).abs() < 1e-12);
        assert!((ms.std - 0.1).abs() < 1e-12);
        assert_eq!(format_pm(&ms), "0.500±0.10");
        assert_eq!(mean_std(&[0.7]).unwrap().std, 0.0);
    }

    #[test]
    fn identical_vectors_score_one() {
        let v = vec![vec![0.3, 0.4]; 5];
        assert!((pairwise_mean(&v).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(pairwise_mean(&v[..1]), Err(MetricsError::TooFewPanels(1)));
    }
}
