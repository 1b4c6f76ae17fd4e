//! Dataset outputs: webdataset-style tar shards, the Parquet metadata table
//! and distribution statistics.

mod metadata;
mod shard;
mod stats;
mod tags;

pub use metadata::{read_metadata, write_metadata, METADATA_COLUMNS};
pub use shard::{read_shard, sample_key, write_shard, write_shards, ShardSample, DEFAULT_SHARD_SIZE};
pub use stats::{compute_stats, HistogramBucket, LanguageShare, StatsReport, CAPTION_LENGTH_EDGES};
pub use tags::{read_tag_sidecar, write_tag_sidecar, TagRecord};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::langid::BucketKind;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("duplicate sample key {0}")]
    DuplicateKey(String),
    #[error("shard holds {got} samples, limit is {limit}")]
    TooManySamples { got: usize, limit: usize },
    #[error("malformed shard: {0}")]
    Malformed(String),
    #[error("invalid record {id}: {reason}")]
    InvariantViolation { id: u64, reason: String },
    #[error("parquet: {0}")]
    Parquet(#[from] parquet::errors::ParquetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One row of the metadata table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: u64,
    pub url: String,
    pub text: String,
    pub width: u32,
    pub height: u32,
    pub similarity: f64,
    pub nsfw_probability: f64,
    pub watermark_probability: f64,
    pub language_bucket: BucketKind,
    pub language_code: String,
}

impl SampleRecord {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |reason: String| DatasetError::InvariantViolation { id: self.id, reason };
        if self.width == 0 || self.height == 0 {
            return Err(bad(format!("dimensions {}x{}", self.width, self.height)));
        }
        if !(-1.0..=1.0).contains(&self.similarity) {
            return Err(bad(format!("similarity {}", self.similarity)));
        }
        for (name, p) in [
            ("nsfw_probability", self.nsfw_probability),
            ("watermark_probability", self.watermark_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(bad(format!("{name} {p}")));
            }
        }
        if self.language_code.is_empty() {
            return Err(bad("empty language code".into()));
        }
        Ok(())
    }
}

/// Composes a dataset-wide id: the run id in the top 24 bits, a per-run
/// counter below.
pub fn sample_id(run_id: u32, counter: u64) -> u64 {
    assert!(run_id < (1 << 24), "run id {run_id} exceeds 24 bits");
    assert!(counter < (1 << 40), "counter overflow");
    (u64::from(run_id) << 40) | counter
}
