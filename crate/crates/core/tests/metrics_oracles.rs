use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{RngExt, SeedableRng};

use storyloom_core::backend::mock::{MockBackends, MockEntity, MockImage, Scenario};
use storyloom_core::backend::{BackendError, EmbedderHandle, ImageEmbedder, ImageSegmenter, PerceptualMetric};
use storyloom_core::image::{ImageData, Mask};
use storyloom_core::metrics::{
    aggregate_corpus, format_pm, format_relative, mean_std, merge_external_scores, pairwise_distance,
    pairwise_similarity, story_metrics, MeanStd, MetricBackends, MetricsError, StoryMetrics, DINO, LPIPS,
};

struct TableEmbedder {
    rows: Vec<Vec<f64>>,
    calls: AtomicUsize,
}

impl ImageEmbedder for TableEmbedder {
    fn embed(&self, image: &ImageData) -> Result<Vec<f64>, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let k = u64::from_le_bytes(image.bytes[..8].try_into().unwrap()) as usize;
        Ok(self.rows[k].clone())
    }
}

fn row(k: usize) -> ImageData {
    ImageData::new("application/octet-stream", (k as u64).to_le_bytes().to_vec())
}

fn table(rows: Vec<Vec<f64>>) -> (EmbedderHandle, Arc<TableEmbedder>) {
    let dim = rows[0].len();
    let t = Arc::new(TableEmbedder {
        rows,
        calls: AtomicUsize::new(0),
    });
    (EmbedderHandle::new(t.clone(), dim), t)
}

fn brute_force(rows: &[Vec<f64>]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut total = 0.0;
    let mut count = 0.0;
    for i in 0..rows.len() {
        for j in 0..rows.len() {
            if i < j {
                let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                total += dot / (norm(&rows[i]) * norm(&rows[j]));
                count += 1.0;
            }
        }
    }
    total / count
}

fn random_rows(rng: &mut StdRng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

#[test]
fn pairwise_similarity_matches_double_loop() {
    let mut rng = StdRng::seed_from_u64(7);
    for _ in 0..100 {
        let n = rng.random_range(2..=16usize);
        let dim = rng.random_range(1..=256usize);
        let rows = random_rows(&mut rng, n, dim);
        let expected = brute_force(&rows);
        let (h, t) = table(rows);
        let panels: Vec<ImageData> = (0..n).map(row).collect();
        let got = pairwise_similarity(&h, &panels).unwrap();
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
        assert_eq!(t.calls.load(Ordering::SeqCst), n, "each panel embedded once");
    }
}

struct CountingDistance(AtomicUsize);

impl PerceptualMetric for CountingDistance {
    fn distance(&self, a: &ImageData, b: &ImageData) -> Result<f64, BackendError> {
        self.0.fetch_add(1, Ordering::SeqCst);
        let k = |x: &ImageData| u64::from_le_bytes(x.bytes[..8].try_into().unwrap()) as f64;
        Ok((k(a) - k(b)).abs())
    }
}

#[test]
fn seven_panels_make_21_pairs() {
    let metric = CountingDistance(AtomicUsize::new(0));
    let panels: Vec<ImageData> = (0..7).map(row).collect();
    let d = pairwise_distance(&metric, &panels).unwrap();
    assert_eq!(metric.0.load(Ordering::SeqCst), 21);
    // Sum of |i - j| over unordered pairs of 0..7 is 56.
    assert!((d - 56.0 / 21.0).abs() < 1e-12);
}

#[test]
fn fewer_than_two_panels_is_an_error() {
    let (h, _) = table(vec![vec![1.0, 0.0]]);
    assert_eq!(pairwise_similarity(&h, &[row(0)]), Err(MetricsError::TooFewPanels(1)));
    let metric = CountingDistance(AtomicUsize::new(0));
    assert_eq!(pairwise_distance(&metric, &[]), Err(MetricsError::TooFewPanels(0)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn panel_order_does_not_matter(seed in any::<u64>(), n in 2usize..10, shuffle in any::<u64>()) {
        let mut rng = StdRng::seed_from_u64(seed);
        let rows = random_rows(&mut rng, n, 8);
        let (h, _) = table(rows);
        let panels: Vec<ImageData> = (0..n).map(row).collect();
        let mut shuffled = panels.clone();
        let mut srng = StdRng::seed_from_u64(shuffle);
        for i in (1..n).rev() {
            shuffled.swap(i, srng.random_range(0..=i));
        }
        let a = pairwise_similarity(&h, &panels).unwrap();
        let b = pairwise_similarity(&h, &shuffled).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&a));
    }
}

struct FullMasks;

impl ImageSegmenter for FullMasks {
    fn segment(&self, image: &ImageData, _label: &str) -> Result<Mask, BackendError> {
        let m = MockImage::decode(image).unwrap();
        Ok(Mask::full(m.width, m.height))
    }
}

fn panel(tag: &str, background: &str, fur: &str) -> ImageData {
    let mut m = MockImage {
        width: 64,
        height: 64,
        tag: tag.into(),
        ..Default::default()
    };
    m.entities.insert(
        "Emily".into(),
        MockEntity {
            attributes: BTreeMap::from([("dress".to_string(), "striped dress".to_string())]),
            bbox: Some([4, 8, 28, 60]),
        },
    );
    m.entities.insert(
        "Whiskers".into(),
        MockEntity {
            attributes: BTreeMap::from([("fur".to_string(), fur.to_string())]),
            bbox: Some([36, 40, 60, 60]),
        },
    );
    m.background.insert("place".into(), background.into());
    m.encode()
}

fn story() -> Vec<ImageData> {
    vec![
        panel("p1", "maze", "golden"),
        panel("p2", "kitchen", "golden"),
        panel("p3", "garden", "white"),
        panel("p4", "maze", "golden"),
    ]
}

fn backends(segmenter: Arc<dyn ImageSegmenter>) -> MetricBackends {
    let m = MockBackends::new(Scenario::default());
    let suite = m.suite();
    MetricBackends {
        dino: suite.embedder.clone(),
        clip: Some(suite.embedder.clone()),
        perceptual: Some(m.perceptual()),
        segmenter: Some(segmenter),
    }
}

fn labels() -> Vec<String> {
    vec!["Emily".into(), "Whiskers".into()]
}

#[test]
fn identity_masks_reproduce_unmasked_scores() {
    let m = story_metrics(&backends(Arc::new(FullMasks)), "s", "m", &story(), Some(&labels())).unwrap();
    for base in ["CLIP-I", DINO, LPIPS] {
        assert_eq!(m.scores[base], m.scores[&format!("{base}-FG")], "{base}");
    }
    assert!(m.fg_excluded.is_empty());
}

#[test]
fn foreground_drops_the_background() {
    let seg = MockBackends::new(Scenario::default()).suite().segmenter;
    let m = story_metrics(&backends(seg), "s", "m", &story(), Some(&labels())).unwrap();
    // Foreground Jaccard distance: 0 between golden panels, 2/3 against p3.
    let fg = m.scores["LPIPS-FG"];
    assert!((fg - (3.0 * 2.0 / 3.0) / 6.0).abs() < 1e-12, "{fg}");
    // Full frame adds the place: (p1, p4) share it, every other pair does not.
    let full = m.scores[LPIPS];
    let expected = (0.0 + 0.5 + 0.5 + 0.8 + 0.8 + 0.8) / 6.0;
    assert!((full - expected).abs() < 1e-12, "{full} vs {expected}");
    assert!(m.scores["DINO-FG"] > m.scores[DINO]);
}

#[test]
fn panels_without_characters_are_excluded_from_foreground() {
    let seg = MockBackends::new(Scenario::default()).suite().segmenter;
    let mut panels = story();
    let mut empty = MockImage::decode(&panels[1]).unwrap();
    empty.entities.clear();
    panels[1] = empty.encode();
    let m = story_metrics(&backends(seg.clone()), "s", "m", &panels, Some(&labels())).unwrap();
    assert_eq!(m.fg_excluded, vec![2]);
    assert!(m.warnings.iter().any(|w| w.contains("panel 2")));
    assert!(m.scores.contains_key("DINO-FG"));

    let only_one: Vec<ImageData> = panels[..2].to_vec();
    let m = story_metrics(&backends(seg), "s", "m", &only_one, Some(&labels())).unwrap();
    assert!(!m.scores.contains_key("DINO-FG"));
    assert!(m.scores.contains_key(DINO));
}

#[test]
fn table_cells_use_three_and_two_decimals() {
    let ms = MeanStd {
        mean: 0.568,
        std: 0.15,
        n: 1,
    };
    assert_eq!(format_pm(&ms), "0.568±0.15");
    assert_eq!(format_pm(&mean_std(&[0.4, 0.6]).unwrap()), "0.500±0.10");
}

#[test]
fn foreground_changes_are_relative_to_full_frame() {
    assert_eq!(format_relative(0.814, 0.825).as_deref(), Some("(-1.3%)"));
    assert_eq!(format_relative(0.496, 0.433).as_deref(), Some("(+14.5%)"));
    assert_eq!(format_relative(0.412, 0.494).as_deref(), Some("(-16.6%)"));
    assert_eq!(format_relative(1.0, 0.0), None);
}

#[test]
fn population_std_is_used() {
    let ms = mean_std(&[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(ms.mean, 2.5);
    assert!((ms.std - 1.25f64.sqrt()).abs() < 1e-15);
    assert_eq!(mean_std(&[]), None);
}

fn scored(story: &str, method: &str, panels: usize, scores: &[(&str, f64)]) -> StoryMetrics {
    StoryMetrics {
        story: story.into(),
        method: method.into(),
        panels,
        scores: scores.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        ..Default::default()
    }
}

#[test]
fn corpus_rows_group_by_method() {
    let stories = vec![
        scored("a", "base", 6, &[(DINO, 0.4), ("DINO-FG", 0.5)]),
        scored("a", "repaired", 6, &[(DINO, 0.6)]),
        scored("b", "base", 5, &[(DINO, 0.6), ("DINO-FG", 0.5), ("HPS", 0.3)]),
    ];
    let r = aggregate_corpus(&stories);
    assert_eq!(r.columns, vec![DINO, "HPS", "DINO-FG"]);
    assert_eq!(r.rows[0].method, "base");
    assert_eq!(r.rows[0].stories, 2);
    assert_eq!(r.rows[0].frames, 11);
    assert_eq!(format_pm(&r.rows[0].columns[DINO]), "0.500±0.10");
    assert_eq!(r.rows[0].columns["HPS"].n, 1);
    assert!(!r.rows[1].columns.contains_key("DINO-FG"));

    let csv = r.to_csv();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "method,stories,frames,DINO_mean,DINO_std,HPS_mean,HPS_std,DINO-FG_mean,DINO-FG_std"
    );
    assert!(lines.next().unwrap().starts_with("base,2,11,0.5,"));

    let md = r.to_markdown();
    assert!(md.contains("| base | 0.500±0.10 | 0.300±0.00 | 0.500±0.00 (+0.0%) |"), "{md}");
    assert!(md.contains("| repaired | 0.600±0.00 | - | - |"), "{md}");
}

#[test]
fn external_scores_are_averaged_per_story() {
    let mut m = scored("a", "base", 2, &[]);
    let file: storyloom_core::metrics::ScoresFile = serde_json::from_str(
        r#"{"a": {"1": {"CLIP-T": 0.3, "TIFA": 1.0}, "2": {"CLIP-T": 0.4}},
            "b": {"1": {"CLIP-T": 0.9}}}"#,
    )
    .unwrap();
    merge_external_scores(&mut m, &file);
    assert!((m.scores["CLIP-T"] - 0.35).abs() < 1e-12);
    assert_eq!(m.scores["TIFA"], 1.0);
}
