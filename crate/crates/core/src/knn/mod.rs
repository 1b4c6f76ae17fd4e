//! Flat product-quantization index with asymmetric distance computation,
//! an on-disk layout that can be memory-mapped, and an exact-search oracle.
//!
//! Distances are squared L2 throughout. Over unit vectors they order
//! results the same way as cosine similarity.

mod brute;
mod index;
mod kmeans;
mod pq;

pub use brute::{brute_force_search, brute_force_search_with_ids};
pub use index::{IndexLayout, LoadMode, PqIndex, INDEX_HEADER_LEN, INDEX_MAGIC, INDEX_VERSION};
pub use kmeans::{kmeans, KMeans};
pub use pq::{PqCodebook, PqParams, TrainReport};

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KnnError {
    #[error("need at least {needed} training vectors, got {got}")]
    TooFewVectors { needed: usize, got: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("duplicate id {0}")]
    DuplicateId(u64),
    #[error("index is closed")]
    IndexClosed,
    #[error("not an index file (bad magic)")]
    BadMagic,
    #[error("index format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("malformed index file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: u64,
    pub distance: f32,
}

/// Hits in ascending distance (ties by ascending id).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub hits: Vec<Hit>,
}

impl QueryResult {
    pub fn ids(&self) -> Vec<u64> {
        self.hits.iter().map(|h| h.id).collect()
    }

    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }
}

/// Fraction of the exact top-k ids present in the approximate result.
pub fn recall_at(approx: &QueryResult, exact: &QueryResult, k: usize) -> f64 {
    let truth: Vec<u64> = exact.hits.iter().take(k).map(|h| h.id).collect();
    if truth.is_empty() {
        return 1.0;
    }
    let found = approx
        .hits
        .iter()
        .take(k)
        .filter(|h| truth.contains(&h.id))
        .count();
    found as f64 / truth.len() as f64
}

#[derive(PartialEq)]
struct Candidate(Hit);

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0
            .distance
            .total_cmp(&other.0.distance)
            .then(self.0.id.cmp(&other.0.id))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Bounded max-heap keeping the `k` smallest hits seen.
pub(crate) struct TopK {
    k: usize,
    heap: BinaryHeap<Candidate>,
}

impl TopK {
    pub(crate) fn new(k: usize) -> Self {
        Self { k, heap: BinaryHeap::with_capacity(k + 1) }
    }

    #[inline]
    pub(crate) fn offer(&mut self, id: u64, distance: f32) {
        let cand = Candidate(Hit { id, distance });
        if self.heap.len() < self.k {
            self.heap.push(cand);
        } else if let Some(top) = self.heap.peek() {
            if cand < *top {
                self.heap.pop();
                self.heap.push(cand);
            }
        }
    }

    pub(crate) fn finish(self) -> QueryResult {
        QueryResult {
            hits: self.heap.into_sorted_vec().into_iter().map(|c| c.0).collect(),
        }
    }
}
