//! `tags.jsonl`: per-sample safety tags that have no metadata column.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DatasetError;
use crate::tagging::NsfwClassScores;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TagRecord {
    pub id: u64,
    pub nsfw_scores: NsfwClassScores,
    pub inappropriate: bool,
    pub inappropriate_labels: Vec<String>,
}

/// One JSON object per line, in the order given; ids must be unique.
pub fn write_tag_sidecar(records: &[TagRecord], path: &Path) -> Result<(), DatasetError> {
    let mut seen = HashSet::with_capacity(records.len());
    for r in records {
        if !seen.insert(r.id) {
            return Err(DatasetError::DuplicateKey(r.id.to_string()));
        }
    }
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| DatasetError::Malformed(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_tag_sidecar(path: &Path) -> Result<Vec<TagRecord>, DatasetError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: TagRecord = serde_json::from_str(&line)
            .map_err(|e| DatasetError::Malformed(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if !seen.insert(r.id) {
            return Err(DatasetError::DuplicateKey(r.id.to_string()));
        }
        out.push(r);
    }
    Ok(out)
}
