use base64::Engine;
use crawlcurate_core::dataset_io::SampleRecord;
use crawlcurate_core::embed::{EmbedError, EmbeddingVector};
use crawlcurate_core::langid::BucketKind;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, SampleView};
use crate::error::ApiError;
use crate::{AppState, DEFAULT_WATERMARK_THRESHOLD};

pub const DEFAULT_K: usize = 20;
pub const MAX_K: usize = 1000;

fn default_k() -> usize {
    DEFAULT_K
}

fn default_watermark_threshold() -> f64 {
    DEFAULT_WATERMARK_THRESHOLD
}

/// Exactly one of `text`, `embedding`, `image_base64` and `like_id` is set.
/// `like_id` queries with the indexed code of an existing sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_base64: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub like_id: Option<u64>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub enable_nsfw: bool,
    #[serde(default)]
    pub enable_inappropriate: bool,
    #[serde(default)]
    pub hide_watermarked: bool,
    #[serde(default = "default_watermark_threshold")]
    pub watermark_threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language_bucket: Option<BucketKind>,
}

impl SearchRequest {
    pub fn text(text: &str, k: usize) -> Self {
        Self::with_query(Query::Text(text.to_string()), k)
    }

    pub fn embedding(values: Vec<f32>, k: usize) -> Self {
        Self::with_query(Query::Embedding(values), k)
    }

    pub fn with_query(query: Query, k: usize) -> Self {
        let mut req = Self {
            text: None,
            embedding: None,
            image_base64: None,
            like_id: None,
            k,
            enable_nsfw: false,
            enable_inappropriate: false,
            hide_watermarked: false,
            watermark_threshold: DEFAULT_WATERMARK_THRESHOLD,
            language_bucket: None,
        };
        match query {
            Query::Text(t) => req.text = Some(t),
            Query::Embedding(v) => req.embedding = Some(v),
            Query::Image(b) => req.image_base64 = Some(base64::engine::general_purpose::STANDARD.encode(b)),
            Query::Like(id) => req.like_id = Some(id),
        }
        req
    }

    pub fn filter(&self) -> SafetyFilter {
        SafetyFilter {
            enable_nsfw: self.enable_nsfw,
            enable_inappropriate: self.enable_inappropriate,
            watermark_cutoff: self.hide_watermarked.then_some(self.watermark_threshold),
            language_bucket: self.language_bucket,
        }
    }

    pub fn validate(&self) -> Result<Query, ApiError> {
        if !(1..=MAX_K).contains(&self.k) {
            return Err(ApiError::BadRequest(format!("k must be in 1..={MAX_K}, got {}", self.k)));
        }
        if !(0.0..=1.0).contains(&self.watermark_threshold) {
            return Err(ApiError::BadRequest(format!(
                "watermark_threshold must be in [0, 1], got {}",
                self.watermark_threshold
            )));
        }
        let mut queries = Vec::new();
        if let Some(t) = &self.text {
            if t.trim().is_empty() {
                return Err(ApiError::BadRequest("text query is blank".into()));
            }
            queries.push(Query::Text(t.clone()));
        }
        if let Some(v) = &self.embedding {
            queries.push(Query::Embedding(v.clone()));
        }
        if let Some(b) = &self.image_base64 {
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(b)
                .map_err(|e| ApiError::BadRequest(format!("image_base64: {e}")))?;
            queries.push(Query::Image(bytes));
        }
        if let Some(id) = self.like_id {
            queries.push(Query::Like(id));
        }
        if queries.len() != 1 {
            return Err(ApiError::BadRequest(format!(
                "exactly one of text, embedding, image_base64, like_id is required, got {}",
                queries.len()
            )));
        }
        Ok(queries.pop().expect("one query"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Query {
    Text(String),
    Embedding(Vec<f32>),
    Image(Vec<u8>),
    Like(u64),
}

/// Which samples a search may return. The default hides NSFW and
/// inappropriate samples and keeps watermarked ones.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SafetyFilter {
    pub enable_nsfw: bool,
    pub enable_inappropriate: bool,
    /// Hide samples whose watermark probability is at least this.
    pub watermark_cutoff: Option<f64>,
    pub language_bucket: Option<BucketKind>,
}

impl SafetyFilter {
    pub fn admits(&self, record: &SampleRecord, inappropriate: bool) -> bool {
        (self.enable_nsfw || !Dataset::is_nsfw(record))
            && (self.enable_inappropriate || !inappropriate)
            && self.watermark_cutoff.is_none_or(|t| record.watermark_probability < t)
            && self.language_bucket.is_none_or(|b| record.language_bucket == b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    /// Approximate squared L2 distance to the query.
    pub distance: f32,
    /// Cosine implied by `distance` for unit vectors.
    pub score: f64,
    #[serde(flatten)]
    pub sample: SampleView,
}

impl SearchHit {
    pub fn id(&self) -> u64 {
        self.sample.record.id
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResponse {
    pub count: usize,
    pub filter: SafetyFilter,
    pub results: Vec<SearchHit>,
}

impl SearchResponse {
    pub fn ids(&self) -> Vec<u64> {
        self.results.iter().map(SearchHit::id).collect()
    }
}

fn embed_error(e: EmbedError) -> ApiError {
    match e {
        EmbedError::DimensionMismatch { .. } => ApiError::Unprocessable(e.to_string()),
        other => ApiError::Unavailable(format!("embedder: {other}")),
    }
}

fn query_vector(state: &AppState, query: Query) -> Result<EmbeddingVector, ApiError> {
    let embedder = || {
        state
            .embedder
            .as_ref()
            .ok_or_else(|| ApiError::Unavailable("no embedder configured".into()))
    };
    let v = match query {
        Query::Text(t) => embedder()?.embed_text(&t).map_err(embed_error)?,
        Query::Image(b) => embedder()?.embed_image(&b).map_err(|e| match e {
            EmbedError::Undecodable(_) => ApiError::BadRequest(e.to_string()),
            other => embed_error(other),
        })?,
        Query::Embedding(v) => {
            if v.len() != state.dataset.dim() {
                return Err(ApiError::Unprocessable(format!(
                    "embedding has dimension {}, index has {}",
                    v.len(),
                    state.dataset.dim()
                )));
            }
            EmbeddingVector::normalized(v).map_err(|e| ApiError::BadRequest(format!("embedding: {e}")))?
        }
        Query::Like(id) => state
            .dataset
            .reconstruction(id)
            .ok_or_else(|| ApiError::NotFound(format!("no indexed sample {id}")))?,
    };
    if v.dim() != state.dataset.dim() {
        return Err(ApiError::Unprocessable(format!(
            "query has dimension {}, index has {}",
            v.dim(),
            state.dataset.dim()
        )));
    }
    Ok(v)
}

/// Blocking: may call a remote embedder and scans the whole index.
pub(crate) fn run_search(state: &AppState, req: &SearchRequest) -> Result<SearchResponse, ApiError> {
    let query = req.validate()?;
    let filter = req.filter();
    let v = query_vector(state, query)?;
    let ds = &state.dataset;
    let hits = ds
        .index()
        .search_filtered(&v, req.k, |id| {
            ds.record(id).is_some_and(|r| filter.admits(r, ds.is_inappropriate(id)))
        })
        .map_err(|e| ApiError::Internal(e.to_string()))?;
    let results: Vec<SearchHit> = hits
        .hits
        .iter()
        .map(|h| SearchHit {
            distance: h.distance,
            score: (1.0 - f64::from(h.distance) / 2.0).clamp(-1.0, 1.0),
            sample: ds.view(h.id).expect("indexed ids have metadata"),
        })
        .collect();
    Ok(SearchResponse {
        count: results.len(),
        filter,
        results,
    })
}
