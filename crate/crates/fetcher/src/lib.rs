//! Image fetching: validation rules, bounded-concurrency downloads, a
//! file-backed lease store for distributing chunks across workers, and a
//! deterministic fixture server.

pub mod config;
pub mod fetch;
pub mod fixture;
pub mod imageops;
pub mod robots;
pub mod store;
pub mod worker;

pub use config::{ConfigError, FetchConfig, RetryBackoff};
pub use fetch::{ChunkStats, FailReason, FetchResult, FetchStatus, Fetcher, FetcherBuilder, RejectReason};
pub use fixture::{fixture_url, render_spec, FixtureConfig, FixtureServer, FIXTURE_HOST};
pub use imageops::{resize_image, Resized};
pub use store::{ChunkState, Clock, JobChunk, JobItem, JobStore, ManualClock, StoreError, SystemClock};
pub use worker::{fetch_chunk, run_worker, ChunkOutcome, WorkerReport};
