//! Line formats of the intermediate JSONL files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crawlcurate_core::langid::BucketKind;
use crawlcurate_core::tagging::SafetyTags;
use crawlcurate_core::wat::CandidatePair;
use crawlcurate_fetcher::FetchResult;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// `bucketed.jsonl`: a candidate with its language decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketedPair {
    #[serde(flatten)]
    pub pair: CandidatePair,
    /// Detected language, or `und` when the bucket is `no_language`.
    pub language_code: String,
    pub language_confidence: f64,
    pub bucket: BucketKind,
}

/// `fetched.jsonl`: an accepted download. `seq` is the line number of the
/// pair in `bucketed.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FetchedPair {
    pub seq: u64,
    #[serde(flatten)]
    pub bucketed: BucketedPair,
    pub fetch: FetchResult,
}

/// `filtered.jsonl`: a pair that passed the similarity threshold. Row `i`
/// owns vector `i` of the embedding archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilteredPair {
    pub id: u64,
    pub seq: u64,
    #[serde(flatten)]
    pub bucketed: BucketedPair,
    pub width: u32,
    pub height: u32,
    /// File name inside the image directory.
    pub image_file: String,
    pub similarity: f64,
}

/// `tagged.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggedSample {
    pub id: u64,
    pub tags: SafetyTags,
}

#[derive(Debug, thiserror::Error)]
pub enum JsonlError {
    #[error("{path}:{line}: {cause}")]
    Parse { path: String, line: usize, cause: String },
    #[error("{path}: {cause}")]
    Io { path: String, cause: std::io::Error },
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, JsonlError> {
    let io = |cause| JsonlError::Io { path: path.display().to_string(), cause };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| JsonlError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            cause: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Writes through `<path>.tmp` and a rename so readers never see a prefix.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), JsonlError> {
    let io = |cause| JsonlError::Io { path: path.display().to_string(), cause };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut out = BufWriter::new(File::create(&tmp).map_err(io)?);
    for item in items {
        serde_json::to_writer(&mut out, item).expect("record serializes");
        out.write_all(b"\n").map_err(io)?;
    }
    out.into_inner().map_err(|e| io(e.into_error()))?.sync_all().map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}
