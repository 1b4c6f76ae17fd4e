use std::collections::{BTreeSet, HashMap};
use std::sync::{Arc, Barrier};
use std::time::Duration;

use crawlcurate_core::wat::CandidatePair;
use crawlcurate_fetcher::fixture::fixture_url;
use crawlcurate_fetcher::store::lease_history;
use crawlcurate_fetcher::{
    fetch_chunk, run_worker, Clock, FetchConfig, Fetcher, FixtureConfig, FixtureServer, JobStore, ManualClock,
    RetryBackoff, SystemClock, FIXTURE_HOST,
};

fn pairs(n: usize) -> Vec<CandidatePair> {
    (0..n)
        .map(|i| CandidatePair {
            image_url: fixture_url(&if i % 7 == 3 {
                format!("/pad/3000/16x16-102030-{i}.jpg")
            } else {
                format!("/img/100x100-{:02x}4080-{i}.jpg", (i * 13) % 256)
            })
            .parse()
            .unwrap(),
            text: if i % 11 == 5 { "tiny".into() } else { format!("picture number {i}") },
            page_url: fixture_url("/p.html").parse().unwrap(),
        })
        .collect()
}

/// Races `workers` threads, each with its own store handle, until every
/// chunk is leased; returns chunk -> workers that received it.
fn race(workers: usize, chunks: usize) -> HashMap<u64, Vec<String>> {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("jobs.log");
    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    JobStore::open(&path, Arc::clone(&clock)).unwrap().add_chunks(pairs(chunks), 1).unwrap();
    let barrier = Arc::new(Barrier::new(workers));
    let handles: Vec<_> = (0..workers)
        .map(|w| {
            let (path, clock, barrier) = (path.clone(), Arc::clone(&clock), Arc::clone(&barrier));
            std::thread::spawn(move || {
                let mut store = JobStore::open(&path, clock).unwrap();
                let id = format!("w{w}");
                barrier.wait();
                let mut got = Vec::new();
                while let Some(c) = store.lease_chunk(&id, Duration::from_secs(3600)).unwrap() {
                    got.push(c.chunk_id);
                }
                (id, got)
            })
        })
        .collect();
    let mut by_chunk: HashMap<u64, Vec<String>> = HashMap::new();
    for h in handles {
        let (id, got) = h.join().unwrap();
        for c in got {
            by_chunk.entry(c).or_default().push(id.clone());
        }
    }
    let history = lease_history(&path).unwrap();
    assert_eq!(history.len(), chunks, "every lease is logged exactly once");
    by_chunk
}

#[test]
fn lease_storm_never_double_leases() {
    for _ in 0..25 {
        let by_chunk = race(8, 100);
        assert_eq!(by_chunk.len(), 100);
        assert!(by_chunk.values().all(|w| w.len() == 1), "{by_chunk:?}");
    }
}

fn accepted_set(store: &JobStore) -> BTreeSet<(u64, u64)> {
    store
        .completed_items()
        .into_iter()
        .filter(|(_, r)| r.is_accepted())
        .map(|(item, r)| (item.seq, r.content_hash))
        .collect()
}

#[tokio::test]
async fn crashed_worker_chunk_is_refetched_after_ttl() {
    let server = FixtureServer::start(FixtureConfig { seed: 5, latency_ms: 0 }, 0).await.unwrap();
    let config = FetchConfig {
        respect_robots: false,
        retry_backoff: RetryBackoff { base_ms: 5, cap_ms: 10 },
        ..FetchConfig::default()
    };
    let fetcher = Arc::new(Fetcher::builder(config).resolve(FIXTURE_HOST, server.addr()).build().unwrap());
    let dir = tempfile::tempdir().unwrap();

    let clean_clock: Arc<dyn Clock> = Arc::new(ManualClock::new(0));
    let mut clean = JobStore::open(dir.path().join("clean.log"), clean_clock).unwrap();
    clean.add_chunks(pairs(60), 20).unwrap();
    let report = run_worker(&mut clean, "solo", &fetcher, Duration::from_secs(60)).await.unwrap();
    assert_eq!(report.chunks_completed, 3);
    assert_eq!(report.stats.total(), 60);

    let clock = Arc::new(ManualClock::new(0));
    let shared: Arc<dyn Clock> = Arc::clone(&clock) as Arc<dyn Clock>;
    let mut crashy = JobStore::open(dir.path().join("crash.log"), Arc::clone(&shared)).unwrap();
    crashy.add_chunks(pairs(60), 20).unwrap();
    let doomed = crashy.lease_chunk("crashy", Duration::from_secs(30)).unwrap().unwrap();
    // the worker fetches but dies before completing
    let _ = fetch_chunk(&fetcher, &doomed).await;
    drop(crashy);

    let mut survivor = JobStore::open(dir.path().join("crash.log"), Arc::clone(&shared)).unwrap();
    let r1 = run_worker(&mut survivor, "survivor", &fetcher, Duration::from_secs(30)).await.unwrap();
    assert_eq!(r1.chunks_completed, 2, "the leased chunk is not available before expiry");
    clock.advance(Duration::from_secs(31));
    let r2 = run_worker(&mut survivor, "survivor", &fetcher, Duration::from_secs(30)).await.unwrap();
    assert_eq!(r2.chunks_completed, 1);

    assert_eq!(accepted_set(&survivor), accepted_set(&clean));
    assert!(!accepted_set(&clean).is_empty());

    // re-running a done chunk is a no-op
    let done = survivor.chunk(doomed.chunk_id).unwrap().clone();
    let before = server.requests();
    let again = fetch_chunk(&fetcher, &done).await;
    assert!(again.skipped);
    assert_eq!(server.requests(), before);
    assert_eq!(&again.results, done.results.as_deref().unwrap());
}
