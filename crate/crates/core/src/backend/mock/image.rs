use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::image::{ImageData, Mask};

pub const MOCK_MEDIA_TYPE: &str = "application/x-storyloom-mock";
const MAGIC: &[u8] = b"STORYLOOM-MOCK-IMAGE/1\n";

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MockEntity {
    pub attributes: BTreeMap<String, String>,
    /// `[x0, y0, x1, y1]`, half-open. `None` covers the whole frame.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[u32; 4]>,
}

/// Synthetic "picture": a tagged container around an entity → attribute map.
///
/// The encoding is the magic line followed by the struct as JSON; all maps
/// are ordered so equal images always encode to equal bytes.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MockImage {
    pub width: u32,
    pub height: u32,
    /// Lineage tag: `ref`, `p<i>` for a fresh panel, `p<i>.<v>` after edits.
    pub tag: String,
    pub seed: u64,
    pub entities: BTreeMap<String, MockEntity>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub background: BTreeMap<String, String>,
    /// `entity.attribute` pairs hidden from view.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub occluded: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub distorted: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub composited: bool,
}

impl MockImage {
    pub fn decode(image: &ImageData) -> Option<MockImage> {
        if image.media_type != MOCK_MEDIA_TYPE {
            return None;
        }
        let body = image.bytes.strip_prefix(MAGIC)?;
        serde_json::from_slice(body).ok()
    }

    pub fn encode(&self) -> ImageData {
        let mut bytes = MAGIC.to_vec();
        bytes.extend(serde_json::to_vec(self).expect("mock image serializes"));
        ImageData::new(MOCK_MEDIA_TYPE, bytes)
    }

    /// Every `(entity, attribute, value)` fact in the picture, background
    /// facts under the pseudo-entity `@background`.
    pub fn facts(&self) -> Vec<(String, String, String)> {
        let mut out = Vec::new();
        for (name, e) in &self.entities {
            for (k, v) in &e.attributes {
                out.push((name.clone(), k.clone(), v.clone()));
            }
        }
        for (k, v) in &self.background {
            out.push(("@background".into(), k.clone(), v.clone()));
        }
        out
    }

    pub fn attribute_count(&self) -> usize {
        self.facts().len()
    }

    pub fn entity_mask(&self, name: &str) -> Mask {
        match self.entities.get(name) {
            None => Mask::empty(self.width, self.height),
            Some(MockEntity { bbox: None, .. }) => Mask::full(self.width, self.height),
            Some(MockEntity { bbox: Some(b), .. }) => Mask::from_box(self.width, self.height, *b),
        }
    }

    /// Keeps entities that overlap the mask and drops the background.
    pub fn composite(&self, mask: &Mask) -> MockImage {
        let mut out = self.clone();
        out.entities
            .retain(|name, _| !self.entity_mask(name).bits.iter().zip(&mask.bits).all(|(e, m)| !(*e && *m)));
        out.occluded
            .retain(|k| k.split_once('.').is_some_and(|(e, _)| out.entities.contains_key(e)));
        out.background.clear();
        out.composited = true;
        out
    }
}

/// The mock embedder's published rule.
///
/// Each fact string `entity\u{1f}attribute\u{1f}value` is hashed into a
/// pseudo-random vector with components in `[-1, 1)`: component `j` is the
/// little-endian `u32` at offset `4·(j mod 8)` of
/// `SHA-256(fact ‖ u32_le(j / 8))`, scaled as `2·u/2³² − 1`. The image
/// embedding is the normalized sum over its facts; an image without facts
/// uses the single fact `@empty`.
pub fn fact_embedding(image: &MockImage, dim: usize) -> Vec<f64> {
    let mut facts: Vec<String> = image
        .facts()
        .into_iter()
        .map(|(e, a, v)| format!("{e}\u{1f}{a}\u{1f}{v}"))
        .collect();
    if facts.is_empty() {
        facts.push("@empty".into());
    }
    let mut sum = vec![0.0f64; dim];
    for fact in &facts {
        for (j, slot) in sum.iter_mut().enumerate() {
            *slot += fact_component(fact, j);
        }
    }
    let norm = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in &mut sum {
            *v /= norm;
        }
    }
    sum
}

fn fact_component(fact: &str, j: usize) -> f64 {
    let mut h = Sha256::new();
    h.update(fact.as_bytes());
    h.update(((j / 8) as u32).to_le_bytes());
    let digest = h.finalize();
    let off = 4 * (j % 8);
    let u = u32::from_le_bytes([digest[off], digest[off + 1], digest[off + 2], digest[off + 3]]);
    2.0 * (u as f64) / 4_294_967_296.0 - 1.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(attrs: &[(&str, &str, &str)]) -> MockImage {
        let mut m = MockImage {
            width: 8,
            height: 8,
            tag: "t".into(),
            ..Default::default()
        };
        for (e, k, v) in attrs {
            m.entities
                .entry(e.to_string())
                .or_default()
                .attributes
                .insert(k.to_string(), v.to_string());
        }
        m
    }

    #[test]
    fn encode_decode_round_trip() {
        let m = img(&[("Eli", "cape", "red")]);
        let data = m.encode();
        assert_eq!(MockImage::decode(&data), Some(m.clone()));
        assert_eq!(data, m.encode());
        assert!(MockImage::decode(&ImageData::new("image/png", data.bytes.to_vec())).is_none());
    }

    #[test]
    fn tag_and_seed_do_not_change_embedding() {
        let a = img(&[("Eli", "cape", "red"), ("Eli", "hair", "tousled")]);
        let mut b = a.clone();
        b.tag = "other".into();
        b.seed = 99;
        assert_eq!(fact_embedding(&a, 32), fact_embedding(&b, 32));
    }

    #[test]
    fn composite_drops_entities_outside_mask() {
        let mut m = img(&[("A", "k", "v"), ("B", "k", "w")]);
        m.entities.get_mut("A").unwrap().bbox = Some([0, 0, 4, 8]);
        m.entities.get_mut("B").unwrap().bbox = Some([4, 0, 8, 8]);
        m.background.insert("setting".into(), "forest".into());
        let c = m.composite(&Mask::from_box(8, 8, [0, 0, 2, 2]));
        assert!(c.entities.contains_key("A"));
        assert!(!c.entities.contains_key("B"));
        assert!(c.background.is_empty());
        assert!(c.composited);
    }
}
