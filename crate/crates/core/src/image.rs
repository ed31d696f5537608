//! Addressable image artifacts, binary masks, and a content-addressed store.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, RwLock};

use base64::{engine::general_purpose::STANDARD as B64, Engine as _};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::backend::mock::MockImage;

pub const MEDIA_PNG: &str = "image/png";
pub const MEDIA_JPEG: &str = "image/jpeg";

/// SHA-256 of an artifact's bytes.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContentHash(pub [u8; 32]);

impl ContentHash {
    pub fn of(bytes: &[u8]) -> Self {
        Self(Sha256::digest(bytes).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).ok()?;
        Some(Self(out))
    }
}

impl fmt::Debug for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContentHash({})", &self.to_hex()[..16])
    }
}

impl fmt::Display for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for ContentHash {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ContentHash {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        ContentHash::from_hex(&s).ok_or_else(|| serde::de::Error::custom("invalid content hash"))
    }
}

/// Handle to a stored image. Identical bytes always yield an identical ref.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub id: String,
    pub content_hash: ContentHash,
    pub byte_len: u64,
    pub media_type: String,
}

impl ImageRef {
    /// File extension used when the image is written to a run directory.
    pub fn extension(&self) -> &'static str {
        extension_for(&self.media_type)
    }
}

pub fn extension_for(media_type: &str) -> &'static str {
    match media_type {
        MEDIA_PNG => "png",
        MEDIA_JPEG => "jpg",
        crate::backend::mock::MOCK_MEDIA_TYPE => "mock",
        _ => "bin",
    }
}

pub fn media_type_for_extension(ext: &str) -> &'static str {
    match ext {
        "png" => MEDIA_PNG,
        "jpg" | "jpeg" => MEDIA_JPEG,
        "mock" => crate::backend::mock::MOCK_MEDIA_TYPE,
        _ => "application/octet-stream",
    }
}

/// Image bytes plus their media type.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageData {
    pub media_type: String,
    pub bytes: Arc<Vec<u8>>,
}

impl fmt::Debug for ImageData {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ImageData")
            .field("media_type", &self.media_type)
            .field("len", &self.bytes.len())
            .finish()
    }
}

impl ImageData {
    pub fn new(media_type: impl Into<String>, bytes: Vec<u8>) -> Self {
        Self {
            media_type: media_type.into(),
            bytes: Arc::new(bytes),
        }
    }

    pub fn hash(&self) -> ContentHash {
        ContentHash::of(&self.bytes)
    }

    pub fn image_ref(&self) -> ImageRef {
        let hash = self.hash();
        ImageRef {
            id: format!("img-{}", &hash.to_hex()[..16]),
            content_hash: hash,
            byte_len: self.bytes.len() as u64,
            media_type: self.media_type.clone(),
        }
    }

    pub fn to_base64(&self) -> String {
        B64.encode(self.bytes.as_slice())
    }

    pub fn from_base64(media_type: impl Into<String>, b64: &str) -> Result<Self, base64::DecodeError> {
        Ok(Self::new(media_type, B64.decode(b64)?))
    }

    pub fn data_url(&self) -> String {
        format!("data:{};base64,{}", self.media_type, self.to_base64())
    }

    /// Pixel dimensions when the format is understood.
    pub fn dimensions(&self) -> Option<(u32, u32)> {
        if let Some(mock) = MockImage::decode(self) {
            return Some((mock.width, mock.height));
        }
        image::load_from_memory(&self.bytes)
            .ok()
            .map(|img| (img.width(), img.height()))
    }
}

/// Binary mask in row-major order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub width: u32,
    pub height: u32,
    #[serde(with = "packed_bits")]
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![false; (width * height) as usize],
        }
    }

    pub fn full(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![true; (width * height) as usize],
        }
    }

    /// Fills the half-open box `[x0, x1) × [y0, y1)`, clipped to the frame.
    pub fn from_box(width: u32, height: u32, bbox: [u32; 4]) -> Self {
        let mut m = Self::empty(width, height);
        let [x0, y0, x1, y1] = bbox;
        for y in y0.min(height)..y1.min(height) {
            for x in x0.min(width)..x1.min(width) {
                m.bits[(y * width + x) as usize] = true;
            }
        }
        m
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[(y * self.width + x) as usize]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn area_fraction(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        self.count() as f64 / self.bits.len() as f64
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    pub fn is_full(&self) -> bool {
        self.bits.iter().all(|b| *b)
    }

    pub fn union(&self, other: &Mask) -> Option<Mask> {
        if self.width != other.width || self.height != other.height {
            return None;
        }
        Some(Mask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        packed_bits::pack(&self.bits)
    }

    pub fn from_bytes(width: u32, height: u32, bytes: &[u8]) -> Option<Mask> {
        let n = (width as usize) * (height as usize);
        if bytes.len() != n.div_ceil(8) {
            return None;
        }
        Some(Mask {
            width,
            height,
            bits: packed_bits::unpack(bytes, n),
        })
    }
}

mod packed_bits {
    use base64::{engine::general_purpose::STANDARD as B64, Engine as _};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn pack(bits: &[bool]) -> Vec<u8> {
        let mut out = vec![0u8; bits.len().div_ceil(8)];
        for (i, b) in bits.iter().enumerate() {
            if *b {
                out[i / 8] |= 0x80 >> (i % 8);
            }
        }
        out
    }

    pub fn unpack(bytes: &[u8], n: usize) -> Vec<bool> {
        (0..n).map(|i| bytes[i / 8] & (0x80 >> (i % 8)) != 0).collect()
    }

    pub fn serialize<S: Serializer>(bits: &[bool], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{}:{}", bits.len(), B64.encode(pack(bits))))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<bool>, D::Error> {
        let s = String::deserialize(d)?;
        let (n, data) = s
            .split_once(':')
            .ok_or_else(|| serde::de::Error::custom("mask must be `<len>:<base64>`"))?;
        let n: usize = n.parse().map_err(serde::de::Error::custom)?;
        let bytes = B64.decode(data).map_err(serde::de::Error::custom)?;
        if bytes.len() != n.div_ceil(8) {
            return Err(serde::de::Error::custom("mask length mismatch"));
        }
        Ok(unpack(&bytes, n))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CompositeError {
    #[error("mask is {mask_w}x{mask_h} but image is {img_w}x{img_h}")]
    SizeMismatch {
        mask_w: u32,
        mask_h: u32,
        img_w: u32,
        img_h: u32,
    },
    #[error("unsupported image format `{0}`")]
    Unsupported(String),
}

/// Keeps the masked foreground and paints everything else white.
///
/// A full mask returns the input unchanged, byte for byte.
pub fn composite_on_white(image: &ImageData, mask: &Mask) -> Result<ImageData, CompositeError> {
    if let Some(mock) = MockImage::decode(image) {
        if (mock.width, mock.height) != (mask.width, mask.height) {
            return Err(CompositeError::SizeMismatch {
                mask_w: mask.width,
                mask_h: mask.height,
                img_w: mock.width,
                img_h: mock.height,
            });
        }
        if mask.is_full() {
            return Ok(image.clone());
        }
        return Ok(mock.composite(mask).encode());
    }
    let decoded = image::load_from_memory(&image.bytes)
        .map_err(|_| CompositeError::Unsupported(image.media_type.clone()))?;
    if (decoded.width(), decoded.height()) != (mask.width, mask.height) {
        return Err(CompositeError::SizeMismatch {
            mask_w: mask.width,
            mask_h: mask.height,
            img_w: decoded.width(),
            img_h: decoded.height(),
        });
    }
    if mask.is_full() {
        return Ok(image.clone());
    }
    let mut rgb = decoded.to_rgb8();
    for (x, y, px) in rgb.enumerate_pixels_mut() {
        if !mask.get(x, y) {
            *px = image::Rgb([255, 255, 255]);
        }
    }
    let mut out = Vec::new();
    image::DynamicImage::ImageRgb8(rgb)
        .write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)
        .map_err(|_| CompositeError::Unsupported(image.media_type.clone()))?;
    Ok(ImageData::new(MEDIA_PNG, out))
}

/// Thread-safe content-addressed image store.
#[derive(Debug, Clone, Default)]
pub struct ImageStore {
    inner: Arc<RwLock<HashMap<ContentHash, ImageData>>>,
}

impl ImageStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put(&self, image: ImageData) -> ImageRef {
        let r = image.image_ref();
        self.inner
            .write()
            .expect("image store poisoned")
            .entry(r.content_hash)
            .or_insert(image);
        r
    }

    pub fn get(&self, hash: &ContentHash) -> Option<ImageData> {
        self.inner.read().expect("image store poisoned").get(hash).cloned()
    }

    pub fn contains(&self, hash: &ContentHash) -> bool {
        self.inner.read().expect("image store poisoned").contains_key(hash)
    }

    pub fn len(&self) -> usize {
        self.inner.read().expect("image store poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
