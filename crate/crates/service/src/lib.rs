//! Read-only HTTP service over a packed dataset: nearest-neighbour search
//! with safety toggles, sample lookup, asynchronous subset export and the
//! precomputed stats report.

mod api;
mod dataset;
mod error;
mod search;
mod subset;

use std::path::PathBuf;
use std::sync::Arc;

use crawlcurate_core::embed::Embedder;
use crawlcurate_core::knn::LoadMode;

pub use api::{router, ENDPOINTS};
pub use dataset::{Dataset, SampleView, TagsView};
pub use error::{ApiError, ServiceError};
pub use search::{Query, SafetyFilter, SearchHit, SearchRequest, SearchResponse, DEFAULT_K, MAX_K};
pub use subset::{ExportJobs, JobStatus, SubsetPredicate, SubsetSpec};

pub const DEFAULT_WATERMARK_THRESHOLD: f64 = 0.5;

pub struct ServiceConfig {
    pub index: PathBuf,
    pub metadata: PathBuf,
    /// `tags.jsonl` sidecar; without it no sample counts as inappropriate.
    pub tags: Option<PathBuf>,
    pub stats: Option<PathBuf>,
    pub embedder: Option<Arc<dyn Embedder>>,
    pub export_dir: PathBuf,
    pub export_workers: usize,
    pub ui_dir: Option<PathBuf>,
    pub load_mode: LoadMode,
}

impl ServiceConfig {
    pub fn new(index: PathBuf, metadata: PathBuf, export_dir: PathBuf) -> Self {
        Self {
            index,
            metadata,
            tags: None,
            stats: None,
            embedder: None,
            export_dir,
            export_workers: 2,
            ui_dir: None,
            load_mode: LoadMode::Mmap,
        }
    }
}

/// Shared handler state. Everything except the export table and the stats
/// cache is immutable after load.
pub struct AppState {
    pub dataset: Dataset,
    pub embedder: Option<Arc<dyn Embedder>>,
    pub exports: ExportJobs,
    stats_path: Option<PathBuf>,
    stats_cache: tokio::sync::OnceCell<axum::body::Bytes>,
}

impl AppState {
    pub fn load(config: &ServiceConfig) -> Result<Arc<Self>, ServiceError> {
        if config.export_workers == 0 {
            return Err(ServiceError::Config("export_workers must be at least 1".into()));
        }
        let dataset = Dataset::load(&config.index, &config.metadata, config.tags.as_deref(), config.load_mode)?;
        if let Some(e) = &config.embedder {
            if e.dimension() != dataset.dim() {
                return Err(ServiceError::Config(format!(
                    "embedder dimension {} does not match index dimension {}",
                    e.dimension(),
                    dataset.dim()
                )));
            }
        }
        std::fs::create_dir_all(&config.export_dir)?;
        Ok(Arc::new(Self {
            dataset,
            embedder: config.embedder.clone(),
            exports: ExportJobs::new(config.export_dir.clone(), config.export_workers),
            stats_path: config.stats.clone(),
            stats_cache: tokio::sync::OnceCell::new(),
        }))
    }
}

/// Binds and serves until the listener fails.
pub async fn serve(config: &ServiceConfig, listener: tokio::net::TcpListener) -> Result<(), ServiceError> {
    let state = AppState::load(config)?;
    log::info!(
        "serving {} samples on {}",
        state.dataset.records().len(),
        listener.local_addr()?
    );
    axum::serve(listener, router(state, config.ui_dir.as_deref())).await?;
    Ok(())
}
