//! Lease-fetch-complete loop binding the fetcher to the job store.

use std::sync::Arc;
use std::time::Duration;

use crawlcurate_core::wat::CandidatePair;
use serde::{Deserialize, Serialize};

use crate::fetch::{ChunkStats, FetchResult, Fetcher};
use crate::store::{ChunkState, JobChunk, JobStore, StoreError};

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkOutcome {
    pub chunk_id: u64,
    pub results: Vec<FetchResult>,
    pub stats: ChunkStats,
    /// True when the chunk was already Done and nothing was fetched.
    pub skipped: bool,
}

/// Fetches every pair of a chunk. A Done chunk is returned unchanged.
pub async fn fetch_chunk(fetcher: &Arc<Fetcher>, chunk: &JobChunk) -> ChunkOutcome {
    if let (ChunkState::Done, Some(results)) = (&chunk.state, &chunk.results) {
        let results = results.as_ref().clone();
        let stats = crate::fetch::tally(&results);
        return ChunkOutcome { chunk_id: chunk.chunk_id, results, stats, skipped: true };
    }
    let pairs: Vec<CandidatePair> = chunk.items.iter().map(|i| i.pair.clone()).collect();
    let (results, stats) = fetcher.fetch_all(&pairs).await;
    ChunkOutcome { chunk_id: chunk.chunk_id, results, stats, skipped: false }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerReport {
    pub chunks_completed: u64,
    pub leases_lost: u64,
    pub stats: ChunkStats,
}

/// Leases and completes chunks until none remain.
pub async fn run_worker(
    store: &mut JobStore,
    worker_id: &str,
    fetcher: &Arc<Fetcher>,
    lease_ttl: Duration,
) -> Result<WorkerReport, StoreError> {
    let mut report = WorkerReport::default();
    while let Some(chunk) = store.lease_chunk(worker_id, lease_ttl)? {
        let outcome = fetch_chunk(fetcher, &chunk).await;
        match store.complete_chunk(chunk.chunk_id, worker_id, outcome.results) {
            Ok(()) => {
                report.chunks_completed += 1;
                let s = &mut report.stats;
                s.accepted += outcome.stats.accepted;
                s.rejected += outcome.stats.rejected;
                s.failed += outcome.stats.failed;
                s.retries += outcome.stats.retries;
                s.max_in_flight = s.max_in_flight.max(outcome.stats.max_in_flight);
                s.elapsed_ms += outcome.stats.elapsed_ms;
            }
            Err(StoreError::LeaseLost { chunk_id, .. }) => {
                log::warn!("{worker_id}: lease on chunk {chunk_id} lost before completion");
                report.leases_lost += 1;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(report)
}
