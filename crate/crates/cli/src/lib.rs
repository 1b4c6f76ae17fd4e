//! Orchestration of the curation pipeline: a declarative run config, the
//! stage runner with content-hash resumability, the run manifest and its
//! funnel report, and a generator for the bundled fixture corpus.

pub mod config;
pub mod corpus;
pub mod filter;
pub mod manifest;
pub mod pipeline;
pub mod records;

pub use config::{ConfigError, EmbedderSpec, LoadedConfig, PipelineConfig};
pub use filter::{score_and_filter, FilterCandidate, FilterOutcome};
pub use manifest::{drop_fraction, report, RunManifest, Stage, StageCounters, StageRecord, StageStatus};
pub use pipeline::{run_pipeline, PipelineError, PipelineRun};

/// Process exit codes of the `crawlcurate` binary.
pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const STAGE: i32 = 3;
}
