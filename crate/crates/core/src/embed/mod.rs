//! Embedding vectors, the pluggable [`Embedder`] interface and the
//! cosine-similarity pair filter.

mod archive;
mod concept;
mod mock;
mod remote;

pub use archive::{read_embeddings, write_embeddings, EMB_MAGIC};
pub use concept::{ColorConceptEmbedder, PALETTE};
pub use mock::{mock_embed, MockEmbedder};
pub use remote::RemoteEmbedder;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::langid::BucketKind;

pub const DEFAULT_DIM: usize = 512;
/// Allowed deviation of a stored vector's L2 norm from 1.
pub const NORM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("vector has non-finite entries")]
    NonFinite,
    #[error("vector has zero norm")]
    ZeroNorm,
    #[error("vector norm {0} is not 1")]
    NotUnit(f64),
    #[error("cannot decode image: {0}")]
    Undecodable(String),
    #[error("embedding endpoint unreachable: {0}")]
    EndpointUnreachable(String),
    #[error("embedding service protocol error: {0}")]
    Protocol(String),
    #[error("embedding service rejected item: {0}")]
    Item(String),
    #[error("malformed embedding archive: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Unit-norm, finite, f32 embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    /// Scales `values` to unit length.
    pub fn normalized(values: Vec<f32>) -> Result<Self, EmbedError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
        let norm = values.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(EmbedError::ZeroNorm);
        }
        Ok(Self(values.into_iter().map(|v| (f64::from(v) / norm) as f32).collect()))
    }

    /// Wraps values that are expected to already be unit length.
    pub fn from_unit(values: Vec<f32>) -> Result<Self, EmbedError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
        let norm = l2_norm(&values);
        if (norm - 1.0).abs() > 1e-4 {
            return Err(EmbedError::NotUnit(norm));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }
}

fn l2_norm(values: &[f32]) -> f64 {
    values.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy)]
pub enum EmbedInput<'a> {
    Text(&'a str),
    Image(&'a [u8]),
}

/// Image/text encoder. Implementations must be deterministic for a fixed
/// model state.
pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed_image(&self, bytes: &[u8]) -> Result<EmbeddingVector, EmbedError>;
    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbedError>;

    /// Order-preserving batch call with per-item failures.
    fn embed_batch(
        &self,
        items: &[EmbedInput<'_>],
    ) -> Result<Vec<Result<EmbeddingVector, String>>, EmbedError> {
        Ok(items
            .iter()
            .map(|item| match item {
                EmbedInput::Text(t) => self.embed_text(t),
                EmbedInput::Image(b) => self.embed_image(b),
            })
            .map(|r| r.map_err(|e| e.to_string()))
            .collect())
    }
}

/// Dot product of two unit vectors, accumulated in f64 and clamped.
pub fn cosine(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64, EmbedError> {
    if u.dim() != v.dim() {
        return Err(EmbedError::DimensionMismatch {
            expected: u.dim(),
            got: v.dim(),
        });
    }
    let dot: f64 = u
        .0
        .iter()
        .zip(&v.0)
        .map(|(&a, &b)| f64::from(a) * f64::from(b))
        .sum();
    Ok(dot.clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub english_threshold: f64,
    pub other_threshold: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            english_threshold: 0.28,
            other_threshold: 0.26,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, t) in [
            ("english_threshold", self.english_threshold),
            ("other_threshold", self.other_threshold),
        ] {
            if !(-1.0..=1.0).contains(&t) {
                return Err(format!("{name} {t} outside [-1, 1]"));
            }
        }
        Ok(())
    }

    /// Threshold applied to a bucket. Non-English buckets, including the
    /// no-language one, share `other_threshold`.
    pub fn threshold(&self, bucket: BucketKind) -> f64 {
        match bucket {
            BucketKind::English => self.english_threshold,
            BucketKind::Other | BucketKind::NoLanguage => self.other_threshold,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterDecision {
    Keep,
    Drop,
}

/// Pairs strictly below their bucket's threshold are dropped.
pub fn filter_decision(bucket: BucketKind, sim: f64, cfg: &FilterConfig) -> FilterDecision {
    if sim >= cfg.threshold(bucket) {
        FilterDecision::Keep
    } else {
        FilterDecision::Drop
    }
}
