use std::collections::HashMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use crawlcurate_core::dataset_io::{read_metadata, read_tag_sidecar, SampleRecord, TagRecord};
use crawlcurate_core::embed::EmbeddingVector;
use crawlcurate_core::knn::{LoadMode, PqIndex};
use crawlcurate_core::tagging::{safety_class_from_probability, NsfwClassScores, SafetyClass};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::ServiceError;
use crate::DEFAULT_WATERMARK_THRESHOLD;

/// Index, metadata rows and tags joined by sample id. Every index id has a
/// metadata row; metadata rows need not be indexed.
pub struct Dataset {
    index: PqIndex,
    records: Vec<SampleRecord>,
    record_of: HashMap<u64, usize>,
    index_row_of: HashMap<u64, usize>,
    tags: HashMap<u64, TagRecord>,
    metadata_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagsView {
    pub nsfw: bool,
    pub nsfw_scores: Option<NsfwClassScores>,
    pub inappropriate: bool,
    pub inappropriate_labels: Vec<String>,
    /// Watermark probability at or above the default threshold.
    pub watermarked: bool,
}

/// A metadata row verbatim plus its derived tags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleView {
    #[serde(flatten)]
    pub record: SampleRecord,
    pub tags: TagsView,
}

fn sha256_file(path: &Path) -> std::io::Result<String> {
    let mut file = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

impl Dataset {
    pub fn load(index: &Path, metadata: &Path, tags: Option<&Path>, mode: LoadMode) -> Result<Self, ServiceError> {
        let index = PqIndex::load(index, mode)?;
        let records = read_metadata(metadata)?;
        let metadata_digest = sha256_file(metadata)?;
        let mut record_of = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if record_of.insert(r.id, i).is_some() {
                return Err(ServiceError::Inconsistent(format!("metadata repeats id {}", r.id)));
            }
        }
        let mut index_row_of = HashMap::with_capacity(index.len());
        for (row, id) in index.ids()?.into_iter().enumerate() {
            if !record_of.contains_key(&id) {
                return Err(ServiceError::Inconsistent(format!("indexed id {id} has no metadata row")));
            }
            index_row_of.insert(id, row);
        }
        let mut tag_map = HashMap::new();
        if let Some(path) = tags {
            for t in read_tag_sidecar(path)? {
                if !record_of.contains_key(&t.id) {
                    return Err(ServiceError::Inconsistent(format!("tagged id {} has no metadata row", t.id)));
                }
                tag_map.insert(t.id, t);
            }
            if let Some(missing) = records.iter().find(|r| !tag_map.contains_key(&r.id)) {
                return Err(ServiceError::Inconsistent(format!("id {} has no tag record", missing.id)));
            }
        }
        Ok(Self {
            index,
            records,
            record_of,
            index_row_of,
            tags: tag_map,
            metadata_digest,
        })
    }

    pub fn dim(&self) -> usize {
        self.index.codebook().dim()
    }

    pub fn index(&self) -> &PqIndex {
        &self.index
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn record(&self, id: u64) -> Option<&SampleRecord> {
        self.record_of.get(&id).map(|&i| &self.records[i])
    }

    pub fn tag(&self, id: u64) -> Option<&TagRecord> {
        self.tags.get(&id)
    }

    /// Hex SHA-256 of the metadata file as loaded.
    pub fn metadata_digest(&self) -> &str {
        &self.metadata_digest
    }

    pub fn is_nsfw(record: &SampleRecord) -> bool {
        safety_class_from_probability(record.nsfw_probability) == SafetyClass::Nsfw
    }

    pub fn is_inappropriate(&self, id: u64) -> bool {
        self.tags.get(&id).is_some_and(|t| t.inappropriate)
    }

    pub fn view(&self, id: u64) -> Option<SampleView> {
        let record = self.record(id)?.clone();
        let tag = self.tags.get(&id);
        Some(SampleView {
            tags: TagsView {
                nsfw: Self::is_nsfw(&record),
                nsfw_scores: tag.map(|t| t.nsfw_scores),
                inappropriate: tag.is_some_and(|t| t.inappropriate),
                inappropriate_labels: tag.map(|t| t.inappropriate_labels.clone()).unwrap_or_default(),
                watermarked: record.watermark_probability >= DEFAULT_WATERMARK_THRESHOLD,
            },
            record,
        })
    }

    /// The PQ reconstruction of an indexed sample, renormalized.
    pub fn reconstruction(&self, id: u64) -> Option<EmbeddingVector> {
        let row = *self.index_row_of.get(&id)?;
        let code = self.index.code(row).ok()?;
        EmbeddingVector::normalized(self.index.codebook().reconstruct(code)).ok()
    }
}
