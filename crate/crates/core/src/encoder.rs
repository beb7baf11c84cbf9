//! Response embeddings and the cosine geometry used by consensus.
//!
//! The reference encoder is a signed feature-hashing bag of character
//! n-grams. It is deterministic for a fixed [`EncoderConfig`] and needs no
//! model weights. Real sentence-encoder output can be supplied through
//! [`ExternalEmbeddings`], which implements the same [`EmbeddingSource`]
//! interface.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;

/// Norms below this are treated as zero by [`normalize`] and the centroid computation.
pub const ZERO_NORM: f64 = 1e-12;

/// Unit-norm tolerance accepted by [`Embedding::from_unit`].
pub const UNIT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub dimension: usize,
    #[serde(alias = "ngram")]
    pub ngram_size: usize,
    pub seed: u64,
    /// Lowercase text before hashing. Off by default.
    pub lowercase: bool,
    /// Collapse runs of whitespace to a single space and trim. Off by default.
    pub collapse_whitespace: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dimension: 384,
            ngram_size: 3,
            seed: 0,
            lowercase: false,
            collapse_whitespace: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dimension < 8 {
            return Err(Error::invalid(
                "encoder.dimension",
                format!("must be at least 8, got {}", self.dimension),
            ));
        }
        if self.ngram_size == 0 {
            return Err(Error::invalid("encoder.ngram_size", "must be positive"));
        }
        Ok(())
    }
}

/// An un-normalized embedding with finite components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct RawEmbedding(Vec<f64>);

impl RawEmbedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("embedding", "must have at least one component"));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }

    /// Multiply every component by `c`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.0.iter().map(|v| v * c).collect())
    }
}

impl TryFrom<Vec<f64>> for RawEmbedding {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<RawEmbedding> for Vec<f64> {
    fn from(v: RawEmbedding) -> Self {
        v.0
    }
}

/// A unit-norm embedding.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Wrap a vector that is already unit norm (within [`UNIT_TOLERANCE`]).
    pub fn from_unit(values: Vec<f64>) -> Result<Self> {
        let raw = RawEmbedding::new(values)?;
        let norm = raw.norm();
        if (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::invalid(
                "embedding",
                format!("expected unit norm, got {norm}"),
            ));
        }
        Ok(Self(raw.0))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        dot(&self.0, &other.0)
    }

    pub(crate) fn from_normalized_unchecked(values: Vec<f64>) -> Self {
        Self(values)
    }
}

impl<'de> Deserialize<'de> for Embedding {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let values = Vec::<f64>::deserialize(d)?;
        Embedding::from_unit(values).map_err(serde::de::Error::custom)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn l2_norm(v: &[f64]) -> f64 {
    // Scale by the largest magnitude so that tiny or huge vectors neither
    // underflow nor overflow; this keeps normalize(c*v) == normalize(v).
    let max = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if max == 0.0 {
        return 0.0;
    }
    max * v.iter().map(|x| (x / max).powi(2)).sum::<f64>().sqrt()
}

/// Scale `v` to unit Euclidean norm.
pub fn normalize(v: &RawEmbedding) -> Result<Embedding> {
    let max = v.0.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let norm = l2_norm(&v.0);
    if norm < ZERO_NORM {
        return Err(Error::ZeroVector { norm });
    }
    // Divide by the max first so the result does not depend on the overall scale.
    let scaled: Vec<f64> = v.0.iter().map(|x| x / max).collect();
    let n = scaled.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(Embedding(scaled.into_iter().map(|x| x / n).collect()))
}

/// `1 - a.b`, clamped to `[0, 2]`.
pub fn cosine_distance(a: &Embedding, b: &Embedding) -> f64 {
    (1.0 - a.dot(b)).clamp(0.0, 2.0)
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub(crate) fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for b in seed.to_le_bytes().iter().chain(bytes) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn preprocess<'a>(text: &'a str, config: &EncoderConfig) -> std::borrow::Cow<'a, str> {
    let mut out = std::borrow::Cow::Borrowed(text);
    if config.collapse_whitespace {
        out = std::borrow::Cow::Owned(out.split_whitespace().collect::<Vec<_>>().join(" "));
    }
    if config.lowercase {
        out = std::borrow::Cow::Owned(out.to_lowercase());
    }
    out
}

/// Hash the character n-grams of `text` into `config.dimension` signed buckets.
///
/// Text shorter than one n-gram contributes itself as a single gram; empty
/// text gives the zero vector.
pub fn encode(text: &str, config: &EncoderConfig) -> RawEmbedding {
    let text = preprocess(text, config);
    let mut values = vec![0.0; config.dimension.max(1)];
    let boundaries: Vec<usize> = text
        .char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(text.len()))
        .collect();
    let chars = boundaries.len() - 1;
    let n = config.ngram_size.max(1);
    let mut add = |gram: &str| {
        let h = fnv1a(config.seed, gram.as_bytes());
        let bucket = (h % values.len() as u64) as usize;
        let sign = if splitmix64(h) >> 63 == 0 { 1.0 } else { -1.0 };
        values[bucket] += sign;
    };
    if chars == 0 {
        return RawEmbedding(values);
    }
    if chars < n {
        add(&text);
    } else {
        for start in 0..=chars - n {
            add(&text[boundaries[start]..boundaries[start + n]]);
        }
    }
    RawEmbedding(values)
}

/// Where the server gets a raw embedding for a response.
pub trait EmbeddingSource: Send + Sync {
    fn dimension(&self) -> usize;

    /// `response_id` identifies the response for sources that look embeddings
    /// up rather than computing them from `text`.
    fn raw_embedding(&self, response_id: &str, text: &str) -> Result<RawEmbedding>;

    fn embedding(&self, response_id: &str, text: &str) -> Result<Embedding> {
        normalize(&self.raw_embedding(response_id, text)?)
    }
}

/// The reference hashed n-gram encoder.
#[derive(Debug, Clone, Default)]
pub struct HashingEncoder {
    config: EncoderConfig,
}

impl HashingEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }
}

impl EmbeddingSource for HashingEncoder {
    fn dimension(&self) -> usize {
        self.config.dimension
    }

    fn raw_embedding(&self, _response_id: &str, text: &str) -> Result<RawEmbedding> {
        Ok(encode(text, &self.config))
    }
}

#[derive(Debug, Deserialize)]
struct ExternalRow {
    response_id: String,
    embedding: RawEmbedding,
}

/// Precomputed embeddings keyed by response id, e.g. from a real sentence encoder.
#[derive(Debug, Clone)]
pub struct ExternalEmbeddings {
    dimension: usize,
    by_id: HashMap<String, RawEmbedding>,
}

impl ExternalEmbeddings {
    pub fn new(
        dimension: usize,
        rows: impl IntoIterator<Item = (String, RawEmbedding)>,
    ) -> Result<Self> {
        let mut by_id = HashMap::new();
        for (id, v) in rows {
            if v.dimension() != dimension {
                return Err(Error::DimensionMismatch {
                    expected: dimension,
                    actual: v.dimension(),
                });
            }
            by_id.insert(id, v);
        }
        Ok(Self { dimension, by_id })
    }

    /// Load `{"response_id": ..., "embedding": [...]}` rows. The dimension is
    /// taken from the first row and enforced on the rest.
    pub fn from_jsonl(path: &Path) -> Result<Self> {
        let rows: Vec<ExternalRow> = jsonl::read_jsonl(path)?;
        let dimension = rows.first().map_or(0, |r| r.embedding.dimension());
        Self::new(
            dimension,
            rows.into_iter().map(|r| (r.response_id, r.embedding)),
        )
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

impl EmbeddingSource for ExternalEmbeddings {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn raw_embedding(&self, response_id: &str, _text: &str) -> Result<RawEmbedding> {
        self.by_id
            .get(response_id)
            .cloned()
            .ok_or_else(|| Error::MissingEmbedding(response_id.to_string()))
    }
}
