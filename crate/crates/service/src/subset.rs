use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use crawlcurate_core::dataset_io::{write_metadata, SampleRecord};
use crawlcurate_core::langid::BucketKind;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::sync::Semaphore;

use crate::dataset::Dataset;
use crate::error::ApiError;

/// Conjunction of the clauses that are present; at least one must be.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsetPredicate {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_similarity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_height: Option<u32>,
    /// Excludes NSFW and inappropriate samples.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub sfw_only: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_watermark: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub languages: Option<BTreeSet<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language_buckets: Option<BTreeSet<BucketKind>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsetSpec {
    pub predicate: SubsetPredicate,
}

impl SubsetPredicate {
    pub fn clause_count(&self) -> usize {
        [
            self.min_similarity.is_some(),
            self.min_width.is_some(),
            self.min_height.is_some(),
            self.sfw_only,
            self.max_watermark.is_some(),
            self.languages.is_some(),
            self.language_buckets.is_some(),
        ]
        .iter()
        .filter(|&&b| b)
        .count()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.clause_count() == 0 {
            return Err("predicate has no clauses".into());
        }
        if let Some(s) = self.min_similarity {
            if !(-1.0..=1.0).contains(&s) {
                return Err(format!("min_similarity must be in [-1, 1], got {s}"));
            }
        }
        if let Some(w) = self.max_watermark {
            if !(0.0..=1.0).contains(&w) {
                return Err(format!("max_watermark must be in [0, 1], got {w}"));
            }
        }
        if self.languages.as_ref().is_some_and(BTreeSet::is_empty) {
            return Err("languages is empty".into());
        }
        if self.language_buckets.as_ref().is_some_and(BTreeSet::is_empty) {
            return Err("language_buckets is empty".into());
        }
        Ok(())
    }

    pub fn matches(&self, r: &SampleRecord, inappropriate: bool) -> bool {
        self.min_similarity.is_none_or(|s| r.similarity >= s)
            && self.min_width.is_none_or(|w| r.width >= w)
            && self.min_height.is_none_or(|h| r.height >= h)
            && (!self.sfw_only || (!Dataset::is_nsfw(r) && !inappropriate))
            && self.max_watermark.is_none_or(|w| r.watermark_probability <= w)
            && self.languages.as_ref().is_none_or(|l| l.contains(&r.language_code))
            && self.language_buckets.as_ref().is_none_or(|b| b.contains(&r.language_bucket))
    }

    pub fn select(&self, ds: &Dataset) -> Vec<SampleRecord> {
        ds.records()
            .iter()
            .filter(|r| self.matches(r, ds.is_inappropriate(r.id)))
            .cloned()
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done { rows: usize },
    Failed { error: String },
}

/// Export jobs keyed by a digest of (metadata digest, predicate), so the
/// same request maps to the same job and output file. A finished file in
/// the export directory is reused after a restart.
pub struct ExportJobs {
    dir: PathBuf,
    permits: Arc<Semaphore>,
    jobs: Mutex<HashMap<String, JobStatus>>,
}

impl ExportJobs {
    pub fn new(dir: PathBuf, workers: usize) -> Self {
        Self {
            dir,
            permits: Arc::new(Semaphore::new(workers)),
            jobs: Mutex::new(HashMap::new()),
        }
    }

    pub fn job_id(metadata_digest: &str, predicate: &SubsetPredicate) -> String {
        let mut h = Sha256::new();
        h.update(metadata_digest.as_bytes());
        h.update([0]);
        h.update(serde_json::to_vec(predicate).expect("predicate serializes"));
        hex::encode(&h.finalize()[..8])
    }

    pub fn output_path(&self, job: &str) -> PathBuf {
        self.dir.join(format!("{job}.parquet"))
    }

    pub fn status(&self, job: &str) -> Option<JobStatus> {
        self.jobs.lock().expect("job table").get(job).cloned()
    }

    fn set(&self, job: &str, status: JobStatus) {
        self.jobs.lock().expect("job table").insert(job.to_string(), status);
    }

    /// Registers the job and returns its current status; failed jobs are
    /// retried. Returns true when the caller must start it.
    pub(crate) fn submit(&self, job: &str) -> (JobStatus, bool) {
        let mut jobs = self.jobs.lock().expect("job table");
        match jobs.get(job) {
            Some(s @ (JobStatus::Queued | JobStatus::Running | JobStatus::Done { .. })) => (s.clone(), false),
            _ => {
                jobs.insert(job.to_string(), JobStatus::Queued);
                (JobStatus::Queued, true)
            }
        }
    }

    pub(crate) async fn run(state: Arc<crate::AppState>, job: String, predicate: SubsetPredicate) {
        let exports = &state.exports;
        let _permit = exports.permits.clone().acquire_owned().await.expect("semaphore open");
        exports.set(&job, JobStatus::Running);
        let worker_state = state.clone();
        let worker_job = job.clone();
        let outcome = tokio::task::spawn_blocking(move || {
            let rows = predicate.select(&worker_state.dataset);
            let path = worker_state.exports.output_path(&worker_job);
            if !path.exists() {
                write_atomically(&rows, &path)?;
            }
            Ok::<usize, String>(rows.len())
        })
        .await;
        let status = match outcome {
            Ok(Ok(rows)) => JobStatus::Done { rows },
            Ok(Err(error)) => JobStatus::Failed { error },
            Err(e) => JobStatus::Failed { error: e.to_string() },
        };
        if let JobStatus::Failed { error } = &status {
            log::warn!("export {job} failed: {error}");
        }
        exports.set(&job, status);
    }
}

fn write_atomically(rows: &[SampleRecord], path: &Path) -> Result<(), String> {
    let tmp = path.with_extension("parquet.partial");
    write_metadata(rows, &tmp).map_err(|e| e.to_string())?;
    std::fs::rename(&tmp, path).map_err(|e| e.to_string())
}

pub(crate) fn parse_spec(body: &[u8]) -> Result<SubsetSpec, ApiError> {
    let spec: SubsetSpec =
        serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(format!("subset spec: {e}")))?;
    spec.predicate.validate().map_err(ApiError::BadRequest)?;
    Ok(spec)
}
