//! Frozen text embedder.
//!
//! Descriptions are embedded as a bag of hashed character n-grams projected
//! through a fixed random matrix and L2-normalized. The projection matrix is
//! derived from a seed and never updated, so the text tower is frozen by
//! construction: similar wording lands on shared n-gram buckets and therefore
//! on nearby vectors, which is all the matching machinery needs.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

/// Number of hash buckets for character n-grams.
const VOCAB_BUCKETS: usize = 2048;
/// Character n-gram lengths, applied to the padded lowercase text.
const NGRAM_SIZES: [usize; 2] = [3, 4];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TextError {
    #[error("cannot embed empty text")]
    EmptyText,
}

/// Seed-keyed, deterministic embedder for aspect descriptions and location
/// sentences. Never trained.
pub struct TextEmbedder {
    projection: Array2<f64>,
    seed: u64,
    dim: usize,
}

impl TextEmbedder {
    pub fn new(seed: u64, dim: usize) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (VOCAB_BUCKETS as f64).sqrt()).unwrap();
        let projection =
            Array2::from_shape_fn((VOCAB_BUCKETS, dim), |_| normal.sample(&mut rng));
        Self { projection, seed, dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// FNV-1a hash of the projection matrix bytes. Training tests assert this
    /// stays constant, i.e. the text tower received no updates.
    pub fn parameter_hash(&self) -> u64 {
        let mut h = FNV_OFFSET;
        h = fnv1a_bytes(h, &self.seed.to_le_bytes());
        for v in self.projection.iter() {
            h = fnv1a_bytes(h, &v.to_le_bytes());
        }
        h
    }

    /// Embed one description into a unit-norm `dim` vector.
    pub fn encode(&self, text: &str) -> Result<Array1<f64>, TextError> {
        if text.trim().is_empty() {
            return Err(TextError::EmptyText);
        }
        let bag = ngram_bag(text);
        let mut out = Array1::<f64>::zeros(self.dim);
        for (bucket, count) in bag {
            let row = self.projection.row(bucket);
            let c = count as f64;
            for (o, p) in out.iter_mut().zip(row.iter()) {
                *o += c * p;
            }
        }
        let norm = out.dot(&out).sqrt();
        if norm > 0.0 {
            out.mapv_inplace(|v| v / norm);
        }
        Ok(out)
    }

    /// Embed a list of descriptions into the rows of a matrix.
    pub fn encode_rows(&self, texts: &[String]) -> Result<Array2<f64>, TextError> {
        let mut rows = Array2::<f64>::zeros((texts.len(), self.dim));
        for (i, t) in texts.iter().enumerate() {
            rows.row_mut(i).assign(&self.encode(t)?);
        }
        Ok(rows)
    }

    /// Embedding of the templated location sentence for location name `name`.
    pub fn encode_location(&self, name: &str) -> Result<Array1<f64>, TextError> {
        self.encode(&location_sentence(name))
    }
}

/// Template used for location embeddings.
pub fn location_sentence(name: &str) -> String {
    format!("It is located at {name}")
}

/// Hashed n-gram counts for lowercase text padded with sentinels.
fn ngram_bag(text: &str) -> Vec<(usize, u32)> {
    let lower: Vec<char> = format!("^{}$", text.to_lowercase()).chars().collect();
    let mut counts = std::collections::BTreeMap::new();
    for &n in &NGRAM_SIZES {
        if lower.len() < n {
            continue;
        }
        for window in lower.windows(n) {
            let mut h = FNV_OFFSET;
            for ch in window {
                let mut buf = [0u8; 4];
                h = fnv1a_bytes(h, ch.encode_utf8(&mut buf).as_bytes());
            }
            *counts.entry((h % VOCAB_BUCKETS as u64) as usize).or_insert(0u32) += 1;
        }
    }
    counts.into_iter().collect()
}

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

pub(crate) fn fnv1a_bytes(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

pub(crate) fn fnv1a_str(s: &str) -> u64 {
    fnv1a_bytes(FNV_OFFSET, s.as_bytes())
}
