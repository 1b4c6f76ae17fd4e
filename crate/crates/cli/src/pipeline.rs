//! Stage runner: executes the requested stages in order, skipping any whose
//! inputs and outputs still hash to what the manifest recorded.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crawlcurate_core::dataset_io::{
    compute_stats, sample_id, sample_key, write_metadata, write_shards, write_tag_sidecar, ShardSample, SampleRecord,
    TagRecord,
};
use crawlcurate_core::embed::{read_embeddings, write_embeddings, EmbeddingVector};
use crawlcurate_core::knn::{PqCodebook, PqIndex};
use crawlcurate_core::langid::{bucketize, LanguageBucket, LanguageDetector, TrigramDetector, UNDETERMINED};
use crawlcurate_core::tagging::Tagger;
use crawlcurate_core::wat::{extract_pairs, open_wat, CandidatePair, Compression, Deduplicator};
use crawlcurate_fetcher::{imageops, FetchResult, Fetcher, FixtureServer, JobStore, SystemClock, FIXTURE_HOST};
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, LoadedConfig};
use crate::filter::{score_and_filter, FilterCandidate, FilterOutcome};
use crate::manifest::{write_atomic, Digester, RunManifest, Stage, StageCounters, StageRecord, StageStatus};
use crate::records::{read_jsonl, write_jsonl, BucketedPair, FetchedPair, FilteredPair, TaggedSample};

/// JPEG quality used when a stored image has to be re-encoded for a shard.
pub const SHARD_JPEG_QUALITY: u8 = 95;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    /// Outputs of earlier stages stay valid.
    #[error("stage {stage} failed: {cause}")]
    StageFailed { stage: Stage, cause: String },
    #[error("manifest: {0}")]
    Manifest(String),
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub manifest: RunManifest,
    pub executed: Vec<Stage>,
    pub skipped: Vec<Stage>,
}

/// What a stage hands back besides its output files.
#[derive(Debug, Default)]
struct StageOutcome {
    counters: StageCounters,
    notes: BTreeMap<String, u64>,
}

type StageResult = Result<StageOutcome, String>;

fn fail(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Runs `stages` (any subset, executed in pipeline order) and returns the
/// manifest as written to `<run_dir>/manifest.json`.
pub fn run_pipeline(cfg: &LoadedConfig, stages: &[Stage]) -> Result<PipelineRun, PipelineError> {
    std::fs::create_dir_all(&cfg.run_dir)
        .map_err(|e| ConfigError(format!("cannot create run_dir {}: {e}", cfg.run_dir.display())))?;
    let manifest_path = cfg.manifest_path();
    let config_digest = Digester::new().json(&cfg.raw).finish();
    let mut manifest = match RunManifest::load(&manifest_path) {
        Ok(m) if m.run_id == cfg.raw.run_id => m,
        Ok(_) => RunManifest::new(cfg.raw.run_id, config_digest.clone()),
        Err(e) => {
            if manifest_path.exists() {
                log::warn!("starting a fresh manifest: {e}");
            }
            RunManifest::new(cfg.raw.run_id, config_digest.clone())
        }
    };
    if manifest.config_digest != config_digest {
        manifest.config_digest = config_digest;
        save(&manifest, &manifest_path)?;
    }
    let mut run = PipelineRun { manifest, executed: Vec::new(), skipped: Vec::new() };
    for stage in Stage::ALL.into_iter().filter(|s| stages.contains(s)) {
        let fail_with = |cause: String| PipelineError::StageFailed { stage, cause };
        let input_digest = input_digest(cfg, stage, &run.manifest).map_err(|e| fail_with(e.to_string()))?;
        let prev = run.manifest.stage(stage);
        if prev.status == StageStatus::Done
            && prev.input_digest.as_deref() == Some(input_digest.as_str())
            && prev.output_digest.as_deref()
                == output_digest(cfg, stage).ok().as_deref()
        {
            log::info!("{stage}: up to date, skipping");
            run.skipped.push(stage);
            continue;
        }
        log::info!("{stage}: running");
        let started = Instant::now();
        let result = check_inputs(cfg, stage).and_then(|()| execute(cfg, stage, &run.manifest));
        let elapsed_ms = started.elapsed().as_millis() as u64;
        let record = run.manifest.stage_mut(stage);
        *record = StageRecord { elapsed_ms, input_digest: Some(input_digest), ..StageRecord::pending(stage) };
        match result.and_then(|out| {
            if !out.counters.is_conserved() {
                return Err(format!("counters not conserved: {:?}", out.counters));
            }
            Ok(out)
        }) {
            Ok(out) => {
                let digest = output_digest(cfg, stage).map_err(|e| fail_with(e.to_string()))?;
                record.status = StageStatus::Done;
                record.output_digest = Some(digest);
                record.counters = out.counters;
                record.notes = out.notes;
                run.executed.push(stage);
                save(&run.manifest, &manifest_path)?;
            }
            Err(cause) => {
                record.status = StageStatus::Failed;
                record.error = Some(cause.clone());
                save(&run.manifest, &manifest_path)?;
                return Err(fail_with(cause));
            }
        }
    }
    Ok(run)
}

fn save(manifest: &RunManifest, path: &Path) -> Result<(), PipelineError> {
    manifest.save(path).map_err(|e| PipelineError::Manifest(e.to_string()))
}

fn inputs(cfg: &LoadedConfig, stage: Stage) -> Vec<PathBuf> {
    let p = &cfg.paths;
    match stage {
        Stage::Extract => Vec::new(),
        Stage::Langid => vec![p.pairs.clone()],
        Stage::Fetch => vec![p.bucketed.clone()],
        Stage::Filter => vec![p.fetched.clone(), p.images.clone()],
        Stage::Tag => vec![p.filtered.clone(), p.embeddings.clone()],
        Stage::Pack => vec![p.filtered.clone(), p.tagged.clone(), p.images.clone()],
        Stage::Stats => vec![p.metadata.clone()],
        Stage::Index => vec![p.filtered.clone(), p.embeddings.clone()],
    }
}

fn outputs(cfg: &LoadedConfig, stage: Stage) -> Vec<PathBuf> {
    let p = &cfg.paths;
    match stage {
        Stage::Extract => vec![p.pairs.clone()],
        Stage::Langid => vec![p.bucketed.clone()],
        Stage::Fetch => vec![p.fetched.clone(), p.images.clone()],
        Stage::Filter => vec![p.filtered.clone(), p.embeddings.clone()],
        Stage::Tag => vec![p.tagged.clone()],
        Stage::Pack => vec![p.shards.clone(), p.metadata.clone(), p.tag_sidecar.clone()],
        Stage::Stats => vec![p.stats.clone()],
        Stage::Index => vec![p.index.clone()],
    }
}

fn check_inputs(cfg: &LoadedConfig, stage: Stage) -> Result<(), String> {
    for p in inputs(cfg, stage) {
        if !p.exists() {
            let hint = stage.upstream().map(|u| format!("; run {u} first")).unwrap_or_default();
            return Err(format!("missing input {}{hint}", p.display()));
        }
    }
    Ok(())
}

/// Digest of everything a stage reads: its config section and input files.
fn input_digest(cfg: &LoadedConfig, stage: Stage, manifest: &RunManifest) -> std::io::Result<String> {
    let mut d = Digester::new();
    d.label(stage.as_str());
    let raw = &cfg.raw;
    match stage {
        Stage::Extract => {
            let files = cfg.wat_files().map_err(std::io::Error::other)?;
            for f in &files {
                d.path(f)?;
            }
            d.label(&files.len().to_string());
        }
        Stage::Langid => {
            d.json(&raw.langid);
        }
        Stage::Fetch => {
            d.json(&raw.fetch).json(&raw.fixture_server);
        }
        Stage::Filter => {
            d.json(&raw.run_id).json(&raw.embedder).json(&raw.dim).json(&raw.filter);
        }
        Stage::Tag => {
            d.path(&cfg.tagging.nsfw_head)?.path(&cfg.tagging.watermark_head)?.path(&cfg.tagging.prototypes)?;
        }
        Stage::Pack => {
            d.json(&raw.pack);
        }
        Stage::Stats => {
            d.json(&raw.stats).json(&manifest.stage_drops(Stage::Stats));
        }
        Stage::Index => {
            d.json(&raw.index);
        }
    }
    for p in inputs(cfg, stage) {
        d.path(&p)?;
    }
    Ok(d.finish())
}

fn output_digest(cfg: &LoadedConfig, stage: Stage) -> std::io::Result<String> {
    let mut d = Digester::new();
    for p in outputs(cfg, stage) {
        d.path(&p)?;
    }
    Ok(d.finish())
}

fn execute(cfg: &LoadedConfig, stage: Stage, manifest: &RunManifest) -> StageResult {
    match stage {
        Stage::Extract => extract(cfg),
        Stage::Langid => langid(cfg),
        Stage::Fetch => fetch(cfg),
        Stage::Filter => filter(cfg),
        Stage::Tag => tag(cfg),
        Stage::Pack => pack(cfg),
        Stage::Stats => stats(cfg, manifest),
        Stage::Index => index(cfg),
    }
}

fn extract(cfg: &LoadedConfig) -> StageResult {
    let files = cfg.wat_files().map_err(fail)?;
    if files.is_empty() {
        return Err(format!("no input files match {:?}", cfg.raw.wat_inputs));
    }
    let mut c = StageCounters::default();
    let mut notes = BTreeMap::new();
    let mut dedup = Deduplicator::new();
    let mut pairs: Vec<CandidatePair> = Vec::new();
    let (mut records, mut malformed) = (0u64, 0u64);
    for path in &files {
        let gz = path.extension().is_some_and(|e| e == "gz");
        let mut reader =
            open_wat(path, if gz { Compression::Gzip } else { Compression::None }).map_err(fail)?;
        for record in reader.by_ref() {
            let record = record.map_err(|e| format!("{}: {e}", path.display()))?;
            records += 1;
            c.input += record.imgs.len() as u64;
            let ex = extract_pairs(&record);
            c.drop("missing_alt", ex.dropped_no_alt);
            c.drop("unresolvable_src", ex.dropped_unresolvable);
            for pair in ex.pairs {
                if dedup.admit(&pair) {
                    pairs.push(pair);
                }
            }
        }
        malformed += reader.skipped();
    }
    c.drop("duplicate", dedup.dropped());
    c.kept = pairs.len() as u64;
    notes.insert("files".into(), files.len() as u64);
    notes.insert("records".into(), records);
    notes.insert("malformed_records".into(), malformed);
    write_jsonl(&cfg.paths.pairs, &pairs).map_err(fail)?;
    Ok(StageOutcome { counters: c, notes })
}

fn langid(cfg: &LoadedConfig) -> StageResult {
    let pairs: Vec<CandidatePair> = read_jsonl(&cfg.paths.pairs).map_err(fail)?;
    let detector = TrigramDetector::bundled();
    let threshold = cfg.raw.langid.threshold;
    let mut notes = BTreeMap::new();
    let bucketed: Vec<BucketedPair> = pairs
        .into_iter()
        .map(|pair| {
            let pred = detector.detect(&pair.text);
            let bucket = bucketize(&pred, threshold);
            let language_code = match &bucket {
                LanguageBucket::English => "en".to_string(),
                LanguageBucket::Other(code) => code.clone(),
                LanguageBucket::NoLanguage => UNDETERMINED.to_string(),
            };
            *notes.entry(format!("bucket_{}", bucket.kind())).or_default() += 1;
            BucketedPair { pair, language_code, language_confidence: pred.confidence, bucket: bucket.kind() }
        })
        .collect();
    let n = bucketed.len() as u64;
    write_jsonl(&cfg.paths.bucketed, &bucketed).map_err(fail)?;
    Ok(StageOutcome { counters: StageCounters { input: n, kept: n, dropped: BTreeMap::new() }, notes })
}

fn input_marker(store: &Path) -> PathBuf {
    let mut p = store.as_os_str().to_owned();
    p.push(".input");
    PathBuf::from(p)
}

fn snapshot_file(store: &Path) -> PathBuf {
    let mut p = store.as_os_str().to_owned();
    p.push(".snapshot");
    PathBuf::from(p)
}

fn remove_if_present(path: &Path) -> std::io::Result<()> {
    let r = if path.is_dir() { std::fs::remove_dir_all(path) } else { std::fs::remove_file(path) };
    match r {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(e),
        _ => Ok(()),
    }
}

/// Downloads through the shared job store. A store built for the same
/// input is resumed, so chunks finished by an interrupted run (or by other
/// workers attached to the store) are not fetched again.
fn fetch(cfg: &LoadedConfig) -> StageResult {
    let bucketed: Vec<BucketedPair> = read_jsonl(&cfg.paths.bucketed).map_err(fail)?;
    let store_path = &cfg.paths.job_store;
    let marker = input_marker(store_path);
    let job_input = Digester::new()
        .path(&cfg.paths.bucketed)
        .map_err(fail)?
        .json(&cfg.raw.fetch)
        .json(&cfg.raw.fetch_run.chunk_size)
        .json(&cfg.raw.fixture_server)
        .finish();
    let resumable = std::fs::read_to_string(&marker).is_ok_and(|m| m.trim() == job_input);
    if !resumable {
        for p in [store_path.clone(), snapshot_file(store_path), cfg.paths.images.clone(), marker.clone()] {
            remove_if_present(&p).map_err(fail)?;
        }
    }
    std::fs::create_dir_all(&cfg.paths.images).map_err(fail)?;
    let clock = Arc::new(SystemClock);
    {
        let mut store = JobStore::open(store_path, clock.clone()).map_err(fail)?;
        if store.chunks().next().is_none() && !bucketed.is_empty() {
            let pairs = bucketed.iter().map(|b| b.pair.clone()).collect();
            store.add_chunks(pairs, cfg.raw.fetch_run.chunk_size).map_err(fail)?;
        }
        write_atomic(&marker, job_input.as_bytes()).map_err(fail)?;
    }

    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .map_err(fail)?;
    let workers = cfg.raw.fetch_run.workers;
    let ttl = Duration::from_millis(cfg.raw.fetch_run.lease_ttl_ms);
    let reports = runtime.block_on(async {
        let mut builder = Fetcher::builder(cfg.raw.fetch.clone()).image_dir(&cfg.paths.images);
        let _server = match cfg.raw.fixture_server {
            Some(fc) => {
                let server = FixtureServer::start(fc, 0).await.map_err(fail)?;
                builder = builder.resolve(FIXTURE_HOST, server.addr());
                Some(server)
            }
            None => None,
        };
        let fetcher = Arc::new(builder.build().map_err(fail)?);
        let mut tasks = Vec::new();
        for w in 0..workers {
            let fetcher = Arc::clone(&fetcher);
            let clock = clock.clone();
            let path = store_path.clone();
            tasks.push(tokio::spawn(async move {
                let mut store = JobStore::open(&path, clock).map_err(fail)?;
                let id = format!("{}-{w}", std::process::id());
                crawlcurate_fetcher::run_worker(&mut store, &id, &fetcher, ttl).await.map_err(fail)
            }));
        }
        let mut reports = Vec::new();
        for t in tasks {
            reports.push(t.await.map_err(fail)??);
        }
        Ok::<_, String>(reports)
    })?;
    drop(runtime);

    let store = JobStore::open(store_path, clock).map_err(fail)?;
    let counts = store.counts();
    if counts.pending + counts.leased > 0 {
        return Err(format!(
            "{} chunks still pending and {} leased by other workers",
            counts.pending, counts.leased
        ));
    }
    let completed = store.completed_items();
    if completed.len() != bucketed.len() {
        return Err(format!("job store holds {} results for {} pairs", completed.len(), bucketed.len()));
    }
    let mut c = StageCounters { input: bucketed.len() as u64, ..Default::default() };
    let mut kept = Vec::new();
    let mut retries = 0u64;
    for (item, result) in completed {
        let b = bucketed
            .get(item.seq as usize)
            .filter(|b| b.pair == item.pair)
            .ok_or_else(|| format!("job store item {} does not match the input", item.seq))?;
        retries += u64::from(result.retries);
        if result.is_accepted() {
            kept.push(FetchedPair { seq: item.seq, bucketed: b.clone(), fetch: result });
        } else {
            c.drop(&result.status.label(), 1);
        }
    }
    c.kept = kept.len() as u64;
    write_jsonl(&cfg.paths.fetched, &kept).map_err(fail)?;
    let mut notes = BTreeMap::new();
    notes.insert("retries".into(), retries);
    notes.insert("workers".into(), reports.len() as u64);
    notes.insert("leases_lost".into(), reports.iter().map(|r| r.leases_lost).sum());
    Ok(StageOutcome { counters: c, notes })
}

fn stored_file(result: &FetchResult) -> Result<String, String> {
    result.stored_name().ok_or_else(|| "accepted pair without a stored image".to_string())
}

fn filter(cfg: &LoadedConfig) -> StageResult {
    let fetched: Vec<FetchedPair> = read_jsonl(&cfg.paths.fetched).map_err(fail)?;
    let embedder = cfg.embedder().map_err(fail)?;
    let mut images = Vec::with_capacity(fetched.len());
    for f in &fetched {
        let name = stored_file(&f.fetch)?;
        let path = cfg.paths.images.join(&name);
        images.push(std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?);
    }
    let candidates: Vec<FilterCandidate<'_>> = fetched
        .iter()
        .zip(&images)
        .map(|(f, img)| FilterCandidate { bucket: f.bucketed.bucket, text: &f.bucketed.pair.text, image: img })
        .collect();
    let outcomes = score_and_filter(&candidates, embedder.as_ref(), &cfg.raw.filter).map_err(fail)?;
    let mut c = StageCounters { input: fetched.len() as u64, ..Default::default() };
    let mut kept = Vec::new();
    let mut vectors = Vec::new();
    for (f, outcome) in fetched.iter().zip(outcomes) {
        match outcome {
            FilterOutcome::Kept { similarity, image_embedding } => {
                kept.push(FilteredPair {
                    id: sample_id(cfg.raw.run_id, kept.len() as u64),
                    seq: f.seq,
                    bucketed: f.bucketed.clone(),
                    width: f.fetch.width,
                    height: f.fetch.height,
                    image_file: stored_file(&f.fetch)?,
                    similarity,
                });
                vectors.push(image_embedding);
            }
            FilterOutcome::BelowThreshold { .. } => c.drop("below_threshold", 1),
            FilterOutcome::EmbedFailed(e) => {
                log::debug!("embedding failed for pair {}: {e}", f.seq);
                c.drop("embed_failed", 1);
            }
        }
    }
    c.kept = kept.len() as u64;
    write_jsonl(&cfg.paths.filtered, &kept).map_err(fail)?;
    let mut buf = Vec::new();
    write_embeddings(&mut buf, embedder.dimension(), &vectors).map_err(fail)?;
    write_atomic(&cfg.paths.embeddings, &buf).map_err(fail)?;
    Ok(StageOutcome { counters: c, notes: BTreeMap::new() })
}

/// Filtered rows and their image embeddings, checked to line up.
fn load_filtered(cfg: &LoadedConfig) -> Result<(Vec<FilteredPair>, usize, Vec<EmbeddingVector>), String> {
    let filtered: Vec<FilteredPair> = read_jsonl(&cfg.paths.filtered).map_err(fail)?;
    let file = std::fs::File::open(&cfg.paths.embeddings).map_err(fail)?;
    let (dim, vectors) = read_embeddings(std::io::BufReader::new(file)).map_err(fail)?;
    if vectors.len() != filtered.len() {
        return Err(format!("{} embeddings for {} filtered pairs", vectors.len(), filtered.len()));
    }
    Ok((filtered, dim, vectors))
}

fn tag(cfg: &LoadedConfig) -> StageResult {
    let (filtered, dim, vectors) = load_filtered(cfg)?;
    let t = &cfg.tagging;
    let tagger = Tagger::load(&t.nsfw_head, &t.watermark_head, &t.prototypes).map_err(fail)?;
    if tagger.dim() != dim {
        return Err(format!("tagging heads expect dimension {}, embeddings have {dim}", tagger.dim()));
    }
    let tags = tagger.tag_batch(&vectors).map_err(fail)?;
    let mut notes: BTreeMap<String, u64> = BTreeMap::new();
    let tagged: Vec<TaggedSample> = filtered
        .iter()
        .zip(tags)
        .map(|(f, tags)| {
            if tags.nsfw_binary == crawlcurate_core::tagging::SafetyClass::Nsfw {
                *notes.entry("nsfw".into()).or_default() += 1;
            }
            if tags.inappropriate {
                *notes.entry("inappropriate".into()).or_default() += 1;
            }
            TaggedSample { id: f.id, tags }
        })
        .collect();
    let n = tagged.len() as u64;
    write_jsonl(&cfg.paths.tagged, &tagged).map_err(fail)?;
    Ok(StageOutcome { counters: StageCounters { input: n, kept: n, dropped: BTreeMap::new() }, notes })
}

/// Shard member holding the metadata row plus the tags without a column.
#[derive(Serialize)]
struct ShardJson<'a> {
    #[serde(flatten)]
    record: &'a SampleRecord,
    nsfw_scores: &'a crawlcurate_core::tagging::NsfwClassScores,
    inappropriate: bool,
    inappropriate_labels: &'a [String],
}

fn shard_image(bytes: Vec<u8>) -> Result<Vec<u8>, String> {
    match imageops::sniff_format(&bytes) {
        Some(image::ImageFormat::Jpeg) => Ok(bytes),
        _ => {
            let img = image::load_from_memory(&bytes).map_err(fail)?;
            Ok(imageops::encode_jpeg(&img.to_rgb8(), SHARD_JPEG_QUALITY))
        }
    }
}

fn pack(cfg: &LoadedConfig) -> StageResult {
    let filtered: Vec<FilteredPair> = read_jsonl(&cfg.paths.filtered).map_err(fail)?;
    let tagged: Vec<TaggedSample> = read_jsonl(&cfg.paths.tagged).map_err(fail)?;
    let by_id: HashMap<u64, &TaggedSample> = tagged.iter().map(|t| (t.id, t)).collect();
    if by_id.len() != tagged.len() || tagged.len() != filtered.len() {
        return Err(format!("{} tag rows for {} filtered pairs", tagged.len(), filtered.len()));
    }
    let mut records = Vec::with_capacity(filtered.len());
    let mut samples = Vec::with_capacity(filtered.len());
    let mut sidecar = Vec::with_capacity(filtered.len());
    let mut reencoded = 0u64;
    for f in &filtered {
        let t = by_id.get(&f.id).ok_or_else(|| format!("no tags for sample {}", f.id))?;
        let record = SampleRecord {
            id: f.id,
            url: f.bucketed.pair.image_url.to_string(),
            text: f.bucketed.pair.text.clone(),
            width: f.width,
            height: f.height,
            similarity: f.similarity,
            nsfw_probability: t.tags.nsfw_probability,
            watermark_probability: t.tags.watermark_probability,
            language_bucket: f.bucketed.bucket,
            language_code: f.bucketed.language_code.clone(),
        };
        record.validate().map_err(fail)?;
        let path = cfg.paths.images.join(&f.image_file);
        let raw = std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        let raw_len = raw.len();
        let image = shard_image(raw)?;
        if image.len() != raw_len || !f.image_file.ends_with(".jpg") {
            reencoded += 1;
        }
        let metadata = serde_json::to_string(&ShardJson {
            record: &record,
            nsfw_scores: &t.tags.nsfw_scores,
            inappropriate: t.tags.inappropriate,
            inappropriate_labels: &t.tags.inappropriate_labels,
        })
        .map_err(fail)?;
        samples.push(ShardSample { key: sample_key(f.id), image, caption: record.text.clone(), metadata });
        sidecar.push(TagRecord {
            id: f.id,
            nsfw_scores: t.tags.nsfw_scores,
            inappropriate: t.tags.inappropriate,
            inappropriate_labels: t.tags.inappropriate_labels.clone(),
        });
        records.push(record);
    }
    remove_if_present(&cfg.paths.shards).map_err(fail)?;
    let shards = write_shards(&cfg.paths.shards, &samples, cfg.raw.pack.shard_size).map_err(fail)?;
    write_metadata(&records, &cfg.paths.metadata).map_err(fail)?;
    write_tag_sidecar(&sidecar, &cfg.paths.tag_sidecar).map_err(fail)?;
    let n = records.len() as u64;
    let mut notes = BTreeMap::new();
    notes.insert("shards".into(), shards.len() as u64);
    notes.insert("reencoded_images".into(), reencoded);
    Ok(StageOutcome { counters: StageCounters { input: n, kept: n, dropped: BTreeMap::new() }, notes })
}

fn stats(cfg: &LoadedConfig, manifest: &RunManifest) -> StageResult {
    let records = crawlcurate_core::dataset_io::read_metadata(&cfg.paths.metadata).map_err(fail)?;
    let report = compute_stats(&records, cfg.raw.stats.watermark_threshold, manifest.stage_drops(Stage::Stats));
    let mut json = serde_json::to_vec_pretty(&report).map_err(fail)?;
    json.push(b'\n');
    write_atomic(&cfg.paths.stats, &json).map_err(fail)?;
    let n = records.len() as u64;
    Ok(StageOutcome { counters: StageCounters { input: n, kept: n, dropped: BTreeMap::new() }, notes: BTreeMap::new() })
}

fn index(cfg: &LoadedConfig) -> StageResult {
    let (filtered, _dim, vectors) = load_filtered(cfg)?;
    let ids: Vec<u64> = filtered.iter().map(|f| f.id).collect();
    let (codebook, report) = PqCodebook::train(&vectors, &cfg.raw.index).map_err(fail)?;
    let index = PqIndex::build(codebook, &vectors, &ids).map_err(fail)?;
    let mut tmp = cfg.paths.index.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    index.save(&tmp).map_err(fail)?;
    std::fs::rename(&tmp, &cfg.paths.index).map_err(fail)?;
    let n = ids.len() as u64;
    let mut notes = BTreeMap::new();
    notes.insert("kmeans_iterations".into(), report.reconstruction_error_history.len() as u64);
    Ok(StageOutcome { counters: StageCounters { input: n, kept: n, dropped: BTreeMap::new() }, notes })
}
