//! Single-pair download with retries and validation, and bounded-concurrency
//! batch fetching.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crawlcurate_core::wat::CandidatePair;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::sync::Semaphore;

use crate::config::{ConfigError, FetchConfig};
use crate::imageops::{self, ImageOpError};
use crate::robots::RobotsCache;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    MinTextLen,
    MinBytes,
    MaxBytes,
    MaxPixels,
    Undecodable,
    RobotsDisallowed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FailReason {
    Timeout,
    Http { status: u16 },
    Network,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason", rename_all = "snake_case")]
pub enum FetchStatus {
    Accepted,
    Rejected(RejectReason),
    Failed(FailReason),
}

impl FetchStatus {
    /// Stable label used as a drop reason in reports.
    pub fn label(&self) -> String {
        match self {
            FetchStatus::Accepted => "accepted".into(),
            FetchStatus::Rejected(r) => format!("rejected_{}", serde_json::to_value(r).expect("unit enum").as_str().expect("string")),
            FetchStatus::Failed(FailReason::Http { status }) => format!("failed_http_{status}"),
            FetchStatus::Failed(FailReason::Timeout) => "failed_timeout".into(),
            FetchStatus::Failed(FailReason::Network) => "failed_network".into(),
        }
    }
}

/// Outcome of one pair. `width`/`height` describe the stored image (after
/// any resize); `image_bytes_len` is the size of the downloaded payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchResult {
    #[serde(flatten)]
    pub status: FetchStatus,
    pub image_bytes_len: u64,
    pub width: u32,
    pub height: u32,
    /// First 8 bytes of the SHA-256 of the stored image, big-endian.
    pub content_hash: u64,
    /// File extension of the stored image.
    pub format: Option<String>,
    pub retries: u32,
    pub error_detail: Option<String>,
}

impl FetchResult {
    fn bare(status: FetchStatus) -> Self {
        Self {
            status,
            image_bytes_len: 0,
            width: 0,
            height: 0,
            content_hash: 0,
            format: None,
            retries: 0,
            error_detail: None,
        }
    }

    fn with_detail(status: FetchStatus, detail: impl Into<String>) -> Self {
        Self { error_detail: Some(detail.into()), ..Self::bare(status) }
    }

    pub fn is_accepted(&self) -> bool {
        self.status == FetchStatus::Accepted
    }

    /// File name of the stored image inside the image directory.
    pub fn stored_name(&self) -> Option<String> {
        match (&self.status, &self.format) {
            (FetchStatus::Accepted, Some(ext)) => Some(format!("{:016x}.{ext}", self.content_hash)),
            _ => None,
        }
    }
}

pub fn content_hash(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkStats {
    pub accepted: u64,
    pub rejected: u64,
    pub failed: u64,
    pub retries: u64,
    pub max_in_flight: u64,
    pub elapsed_ms: u64,
}

impl ChunkStats {
    pub fn total(&self) -> u64 {
        self.accepted + self.rejected + self.failed
    }
}

#[derive(Debug, Default)]
pub struct FetcherBuilder {
    config: FetchConfig,
    resolve: Vec<(String, SocketAddr)>,
    image_dir: Option<PathBuf>,
}

impl FetcherBuilder {
    /// Routes requests for `host` to `addr` regardless of DNS.
    pub fn resolve(mut self, host: &str, addr: SocketAddr) -> Self {
        self.resolve.push((host.to_string(), addr));
        self
    }

    /// Directory receiving accepted images as `<content_hash>.<ext>`.
    pub fn image_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.image_dir = Some(dir.into());
        self
    }

    pub fn build(self) -> Result<Fetcher, ConfigError> {
        self.config.validate()?;
        let mut client = reqwest::Client::builder()
            .timeout(Duration::from_millis(self.config.timeout_ms))
            .user_agent(self.config.user_agent.clone())
            .pool_max_idle_per_host(self.config.concurrency);
        for (host, addr) in &self.resolve {
            client = client.resolve(host, *addr);
        }
        let client = client.build().map_err(|e| ConfigError(format!("http client: {e}")))?;
        let robots = self.config.respect_robots.then(RobotsCache::default);
        Ok(Fetcher { client, config: self.config, robots, image_dir: self.image_dir })
    }
}

pub struct Fetcher {
    client: reqwest::Client,
    config: FetchConfig,
    robots: Option<RobotsCache>,
    image_dir: Option<PathBuf>,
}

enum Attempt {
    Body(Vec<u8>),
    TooLarge(u64),
    Transient(FailReason, String),
    Permanent(FailReason, String),
}

impl Fetcher {
    pub fn builder(config: FetchConfig) -> FetcherBuilder {
        FetcherBuilder { config, ..FetcherBuilder::default() }
    }

    pub fn config(&self) -> &FetchConfig {
        &self.config
    }

    async fn attempt(&self, url: &str) -> Attempt {
        let mut resp = match self.client.get(url).send().await {
            Ok(r) => r,
            Err(e) => return classify(&e),
        };
        let status = resp.status();
        if !status.is_success() {
            let reason = FailReason::Http { status: status.as_u16() };
            let detail = format!("HTTP {status}");
            return if status.is_server_error() || status.as_u16() == 429 {
                Attempt::Transient(reason, detail)
            } else {
                Attempt::Permanent(reason, detail)
            };
        }
        let max = self.config.max_image_bytes;
        if let Some(len) = resp.content_length() {
            if len > max {
                return Attempt::TooLarge(len);
            }
        }
        let mut body = Vec::new();
        loop {
            match resp.chunk().await {
                Ok(Some(chunk)) => {
                    body.extend_from_slice(&chunk);
                    if body.len() as u64 > max {
                        return Attempt::TooLarge(body.len() as u64);
                    }
                }
                Ok(None) => return Attempt::Body(body),
                Err(e) => return classify(&e),
            }
        }
    }

    /// Downloads and validates one pair. Never errors: every failure mode is
    /// encoded in the returned status.
    pub async fn fetch_one(&self, pair: &CandidatePair) -> FetchResult {
        if pair.text.trim().chars().count() < self.config.min_text_chars {
            return FetchResult::bare(FetchStatus::Rejected(RejectReason::MinTextLen));
        }
        if let Some(robots) = &self.robots {
            if !robots.allowed(&self.client, &pair.image_url, &self.config.user_agent).await {
                return FetchResult::bare(FetchStatus::Rejected(RejectReason::RobotsDisallowed));
            }
        }
        let mut retries = 0;
        let body = loop {
            match self.attempt(pair.image_url.as_str()).await {
                Attempt::Body(b) => break b,
                Attempt::TooLarge(n) => {
                    return FetchResult {
                        image_bytes_len: n,
                        retries,
                        ..FetchResult::bare(FetchStatus::Rejected(RejectReason::MaxBytes))
                    }
                }
                Attempt::Permanent(reason, detail) => {
                    return FetchResult { retries, ..FetchResult::with_detail(FetchStatus::Failed(reason), detail) }
                }
                Attempt::Transient(reason, detail) => {
                    if retries >= self.config.max_retries {
                        return FetchResult { retries, ..FetchResult::with_detail(FetchStatus::Failed(reason), detail) };
                    }
                    let ceiling = self.config.backoff_ceiling_ms(retries);
                    let delay = rand::rng().random_range(ceiling / 2..=ceiling);
                    tokio::time::sleep(Duration::from_millis(delay)).await;
                    retries += 1;
                }
            }
        };
        let config = self.config.clone();
        let image_dir = self.image_dir.clone();
        let mut result = tokio::task::spawn_blocking(move || validate_payload(&body, &config, image_dir.as_deref()))
            .await
            .unwrap_or_else(|e| FetchResult::with_detail(FetchStatus::Rejected(RejectReason::Undecodable), e.to_string()));
        result.retries = retries;
        result
    }

    /// Fetches every pair with at most `concurrency` requests in flight.
    /// Results are in input order.
    pub async fn fetch_all(self: &Arc<Self>, pairs: &[CandidatePair]) -> (Vec<FetchResult>, ChunkStats) {
        let start = Instant::now();
        let permits = Arc::new(Semaphore::new(self.config.concurrency));
        let in_flight = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let retries = Arc::new(AtomicU64::new(0));
        let mut tasks = tokio::task::JoinSet::new();
        for (i, pair) in pairs.iter().cloned().enumerate() {
            let (this, permits, in_flight, peak, retries) =
                (Arc::clone(self), Arc::clone(&permits), Arc::clone(&in_flight), Arc::clone(&peak), Arc::clone(&retries));
            tasks.spawn(async move {
                let _permit = permits.acquire_owned().await.expect("semaphore never closed");
                let now = in_flight.fetch_add(1, Ordering::SeqCst) + 1;
                peak.fetch_max(now, Ordering::SeqCst);
                let r = this.fetch_one(&pair).await;
                in_flight.fetch_sub(1, Ordering::SeqCst);
                retries.fetch_add(u64::from(r.retries), Ordering::Relaxed);
                (i, r)
            });
        }
        let mut slots: Vec<Option<FetchResult>> = vec![None; pairs.len()];
        while let Some(joined) = tasks.join_next().await {
            let (i, r) = joined.expect("fetch task panicked");
            slots[i] = Some(r);
        }
        let results: Vec<FetchResult> = slots.into_iter().map(|r| r.expect("every slot filled")).collect();
        let mut stats = tally(&results);
        stats.retries = retries.load(Ordering::Relaxed);
        stats.max_in_flight = peak.load(Ordering::SeqCst) as u64;
        stats.elapsed_ms = start.elapsed().as_millis() as u64;
        (results, stats)
    }
}

pub fn tally(results: &[FetchResult]) -> ChunkStats {
    let mut stats = ChunkStats::default();
    for r in results {
        match r.status {
            FetchStatus::Accepted => stats.accepted += 1,
            FetchStatus::Rejected(_) => stats.rejected += 1,
            FetchStatus::Failed(_) => stats.failed += 1,
        }
        stats.retries += u64::from(r.retries);
    }
    stats
}

fn classify(e: &reqwest::Error) -> Attempt {
    if e.is_timeout() {
        Attempt::Transient(FailReason::Timeout, e.to_string())
    } else {
        Attempt::Transient(FailReason::Network, e.to_string())
    }
}

/// Applies the byte, format and pixel rules to a downloaded payload and
/// stores accepted images.
pub fn validate_payload(body: &[u8], config: &FetchConfig, image_dir: Option<&std::path::Path>) -> FetchResult {
    let len = body.len() as u64;
    let reject = |reason, detail: Option<String>| FetchResult {
        image_bytes_len: len,
        error_detail: detail,
        ..FetchResult::bare(FetchStatus::Rejected(reason))
    };
    if len < config.min_image_bytes {
        return reject(RejectReason::MinBytes, None);
    }
    if len > config.max_image_bytes {
        return reject(RejectReason::MaxBytes, None);
    }
    let Some(format) = imageops::sniff_format(body) else {
        return reject(RejectReason::Undecodable, Some("unrecognised magic bytes".into()));
    };
    let (w, h) = match imageops::probe_dimensions(body, format) {
        Ok(d) => d,
        Err(e) => return reject(RejectReason::Undecodable, Some(e.to_string())),
    };
    if u64::from(w) * u64::from(h) > config.max_pixels {
        return reject(RejectReason::MaxPixels, Some(format!("{w}x{h}")));
    }
    if w == 0 || h == 0 {
        return reject(RejectReason::Undecodable, Some("zero-sized image".into()));
    }
    let decoded = match imageops::decode(body, format, config.max_pixels) {
        Ok(img) => img,
        Err(ImageOpError::Undecodable(e)) => return reject(RejectReason::Undecodable, Some(e)),
        Err(e) => return reject(RejectReason::Undecodable, Some(e.to_string())),
    };
    let (mut width, mut height) = (decoded.width(), decoded.height());
    let mut stored: std::borrow::Cow<'_, [u8]> = body.into();
    let mut ext = imageops::extension(format);
    if let Some(target) = config.resize_target {
        let (nw, nh) = imageops::fit_dimensions(width, height, target);
        if (nw, nh) != (width, height) {
            let small = decoded.resize_exact(nw, nh, image::imageops::FilterType::Triangle).to_rgb8();
            stored = imageops::encode_jpeg(&small, imageops::RESIZE_JPEG_QUALITY).into();
            (width, height, ext) = (nw, nh, "jpg");
        }
    }
    let hash = content_hash(&stored);
    let result = FetchResult {
        status: FetchStatus::Accepted,
        image_bytes_len: len,
        width,
        height,
        content_hash: hash,
        format: Some(ext.to_string()),
        retries: 0,
        error_detail: None,
    };
    if let Some(dir) = image_dir {
        let name = result.stored_name().expect("accepted with format");
        if let Err(e) = store_image(dir, &name, &stored) {
            return FetchResult::with_detail(FetchStatus::Failed(FailReason::Network), format!("storing image: {e}"));
        }
    }
    result
}

fn store_image(dir: &std::path::Path, name: &str, bytes: &[u8]) -> std::io::Result<()> {
    let path = dir.join(name);
    if path.exists() {
        return Ok(());
    }
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(tmp, path)
}
