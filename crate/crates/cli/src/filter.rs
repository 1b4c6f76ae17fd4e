//! Embedding-similarity filtering of fetched pairs.

use crawlcurate_core::embed::{cosine, filter_decision, EmbedError, EmbedInput, Embedder, EmbeddingVector, FilterConfig, FilterDecision};
use crawlcurate_core::langid::BucketKind;
use rayon::prelude::*;

/// Pairs per embedder call.
pub const EMBED_BATCH: usize = 128;

#[derive(Debug, Clone, Copy)]
pub struct FilterCandidate<'a> {
    pub bucket: BucketKind,
    pub text: &'a str,
    pub image: &'a [u8],
}

#[derive(Debug, Clone, PartialEq)]
pub enum FilterOutcome {
    Kept { similarity: f64, image_embedding: EmbeddingVector },
    BelowThreshold { similarity: f64 },
    /// The embedder rejected the caption or the image.
    EmbedFailed(String),
}

impl FilterOutcome {
    pub fn is_kept(&self) -> bool {
        matches!(self, FilterOutcome::Kept { .. })
    }

    pub fn similarity(&self) -> Option<f64> {
        match self {
            FilterOutcome::Kept { similarity, .. } | FilterOutcome::BelowThreshold { similarity } => Some(*similarity),
            FilterOutcome::EmbedFailed(_) => None,
        }
    }
}

/// Scores every candidate by caption/image cosine and applies the
/// per-bucket threshold. Output order matches input order. A batch-level
/// embedder failure aborts the whole call.
pub fn score_and_filter(
    candidates: &[FilterCandidate<'_>],
    embedder: &dyn Embedder,
    config: &FilterConfig,
) -> Result<Vec<FilterOutcome>, EmbedError> {
    let batches: Vec<Result<Vec<FilterOutcome>, EmbedError>> = candidates
        .par_chunks(EMBED_BATCH)
        .map(|batch| {
            let inputs: Vec<EmbedInput<'_>> = batch
                .iter()
                .flat_map(|c| [EmbedInput::Text(c.text), EmbedInput::Image(c.image)])
                .collect();
            let embedded = embedder.embed_batch(&inputs)?;
            if embedded.len() != inputs.len() {
                return Err(EmbedError::Protocol(format!(
                    "{} embeddings for {} inputs",
                    embedded.len(),
                    inputs.len()
                )));
            }
            let mut it = embedded.into_iter();
            let mut out = Vec::with_capacity(batch.len());
            for cand in batch {
                let text = it.next().expect("paired");
                let image = it.next().expect("paired");
                out.push(decide(cand.bucket, text, image, config));
            }
            Ok(out)
        })
        .collect();
    let mut out = Vec::with_capacity(candidates.len());
    for b in batches {
        out.extend(b?);
    }
    Ok(out)
}

fn decide(
    bucket: BucketKind,
    text: Result<EmbeddingVector, String>,
    image: Result<EmbeddingVector, String>,
    config: &FilterConfig,
) -> FilterOutcome {
    let (text, image) = match (text, image) {
        (Ok(t), Ok(i)) => (t, i),
        (Err(e), _) => return FilterOutcome::EmbedFailed(format!("caption: {e}")),
        (_, Err(e)) => return FilterOutcome::EmbedFailed(format!("image: {e}")),
    };
    let similarity = match cosine(&text, &image) {
        Ok(s) => s,
        Err(e) => return FilterOutcome::EmbedFailed(e.to_string()),
    };
    match filter_decision(bucket, similarity, config) {
        FilterDecision::Keep => FilterOutcome::Kept { similarity, image_embedding: image },
        FilterDecision::Drop => FilterOutcome::BelowThreshold { similarity },
    }
}
