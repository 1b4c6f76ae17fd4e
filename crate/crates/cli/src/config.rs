//! Pipeline configuration: one versioned JSON file per run.
//!
//! Relative paths resolve against the directory holding the config file;
//! stage outputs resolve against `run_dir`.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use crawlcurate_core::embed::{ColorConceptEmbedder, Embedder, FilterConfig, MockEmbedder, RemoteEmbedder, DEFAULT_DIM};
use crawlcurate_core::knn::PqParams;
use crawlcurate_core::langid;
use crawlcurate_fetcher::{FetchConfig, FixtureConfig};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;
use url::Url;

pub const SCHEMA_VERSION: u32 = 1;
/// Sample ids stay below 2^53 (exact in JSON numbers read by browsers)
/// while run ids stay below this bound.
pub const MAX_RUN_ID: u32 = 1 << 13;

#[derive(Debug, Error)]
#[error("config error: {0}")]
pub struct ConfigError(pub String);

fn err(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

/// Which embedder the filter stage and the service use.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EmbedderSpec {
    Mock { seed: u64 },
    Concept { seed: u64 },
    Remote { endpoint: Url },
}

impl FromStr for EmbedderSpec {
    type Err = ConfigError;

    /// `mock[:seed]`, `concept[:seed]` or `remote:<url>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, arg) = s.split_once(':').map_or((s, None), |(k, a)| (k, Some(a)));
        let seed = |arg: Option<&str>| -> Result<u64, ConfigError> {
            arg.map_or(Ok(0), |a| a.parse().map_err(|_| err(format!("bad embedder seed in {s:?}"))))
        };
        match kind {
            "mock" => Ok(EmbedderSpec::Mock { seed: seed(arg)? }),
            "concept" => Ok(EmbedderSpec::Concept { seed: seed(arg)? }),
            "remote" => {
                let url = arg.ok_or_else(|| err("remote embedder needs a URL"))?;
                Ok(EmbedderSpec::Remote {
                    endpoint: Url::parse(url).map_err(|e| err(format!("remote embedder URL {url:?}: {e}")))?,
                })
            }
            _ => Err(err(format!("unknown embedder {s:?}; expected mock, concept or remote"))),
        }
    }
}

impl fmt::Display for EmbedderSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EmbedderSpec::Mock { seed } => write!(f, "mock:{seed}"),
            EmbedderSpec::Concept { seed } => write!(f, "concept:{seed}"),
            EmbedderSpec::Remote { endpoint } => write!(f, "remote:{endpoint}"),
        }
    }
}

impl Serialize for EmbedderSpec {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for EmbedderSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl EmbedderSpec {
    /// Builds the embedder; a remote one is only contacted on first use.
    pub fn build(&self, dim: usize) -> Result<Arc<dyn Embedder>, ConfigError> {
        Ok(match self {
            EmbedderSpec::Mock { seed } => Arc::new(MockEmbedder::new(*seed, dim)),
            EmbedderSpec::Concept { seed } => {
                if dim < crawlcurate_core::embed::PALETTE.len() {
                    return Err(err(format!("concept embedder needs dim >= {}", crawlcurate_core::embed::PALETTE.len())));
                }
                Arc::new(ColorConceptEmbedder::new(*seed, dim))
            }
            EmbedderSpec::Remote { endpoint } => {
                Arc::new(RemoteEmbedder::new(endpoint.clone(), dim).map_err(|e| err(e.to_string()))?)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LangidConfig {
    pub threshold: f64,
}

impl Default for LangidConfig {
    fn default() -> Self {
        Self { threshold: langid::DEFAULT_THRESHOLD }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FetchRunConfig {
    pub chunk_size: usize,
    /// Worker tasks in this process, each leasing chunks independently.
    pub workers: usize,
    pub lease_ttl_ms: u64,
}

impl Default for FetchRunConfig {
    fn default() -> Self {
        Self {
            chunk_size: crawlcurate_fetcher::store::DEFAULT_CHUNK_SIZE,
            workers: 1,
            lease_ttl_ms: 10 * 60 * 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaggingConfig {
    pub nsfw_head: PathBuf,
    pub watermark_head: PathBuf,
    pub prototypes: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PackConfig {
    pub shard_size: usize,
}

impl Default for PackConfig {
    fn default() -> Self {
        Self {
            shard_size: crawlcurate_core::dataset_io::DEFAULT_SHARD_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsConfig {
    pub watermark_threshold: f64,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self { watermark_threshold: 0.5 }
    }
}

/// Stage output locations, relative to `run_dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StagePaths {
    pub pairs: PathBuf,
    pub bucketed: PathBuf,
    pub job_store: PathBuf,
    pub fetched: PathBuf,
    pub images: PathBuf,
    pub filtered: PathBuf,
    pub embeddings: PathBuf,
    pub tagged: PathBuf,
    pub shards: PathBuf,
    pub metadata: PathBuf,
    pub tag_sidecar: PathBuf,
    pub stats: PathBuf,
    pub index: PathBuf,
    pub exports: PathBuf,
}

impl Default for StagePaths {
    fn default() -> Self {
        Self {
            pairs: "pairs.jsonl".into(),
            bucketed: "bucketed.jsonl".into(),
            job_store: "jobs.log".into(),
            fetched: "fetched.jsonl".into(),
            images: "images".into(),
            filtered: "filtered.jsonl".into(),
            embeddings: "embeddings.emb".into(),
            tagged: "tagged.jsonl".into(),
            shards: "shards".into(),
            metadata: "metadata.parquet".into(),
            tag_sidecar: "tags.jsonl".into(),
            stats: "stats.json".into(),
            index: "index.pqix".into(),
            exports: "exports".into(),
        }
    }
}

impl StagePaths {
    fn named(&self) -> [(&'static str, &Path); 14] {
        [
            ("pairs", &self.pairs),
            ("bucketed", &self.bucketed),
            ("job_store", &self.job_store),
            ("fetched", &self.fetched),
            ("images", &self.images),
            ("filtered", &self.filtered),
            ("embeddings", &self.embeddings),
            ("tagged", &self.tagged),
            ("shards", &self.shards),
            ("metadata", &self.metadata),
            ("tag_sidecar", &self.tag_sidecar),
            ("stats", &self.stats),
            ("index", &self.index),
            ("exports", &self.exports),
        ]
    }

    fn resolved(&self, run_dir: &Path) -> Self {
        let r = |p: &PathBuf| run_dir.join(p);
        Self {
            pairs: r(&self.pairs),
            bucketed: r(&self.bucketed),
            job_store: r(&self.job_store),
            fetched: r(&self.fetched),
            images: r(&self.images),
            filtered: r(&self.filtered),
            embeddings: r(&self.embeddings),
            tagged: r(&self.tagged),
            shards: r(&self.shards),
            metadata: r(&self.metadata),
            tag_sidecar: r(&self.tag_sidecar),
            stats: r(&self.stats),
            index: r(&self.index),
            exports: r(&self.exports),
        }
    }
}

fn default_dim() -> usize {
    DEFAULT_DIM
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema_version: u32,
    /// High bits of every sample id minted by this run.
    pub run_id: u32,
    pub run_dir: PathBuf,
    /// Glob patterns of WAT envelope files; `.gz` files are decompressed.
    pub wat_inputs: Vec<String>,
    #[serde(default)]
    pub paths: StagePaths,
    #[serde(default)]
    pub langid: LangidConfig,
    #[serde(default)]
    pub fetch: FetchConfig,
    #[serde(default)]
    pub fetch_run: FetchRunConfig,
    /// Serve fetches from an in-process fixture server instead of the web.
    #[serde(default)]
    pub fixture_server: Option<FixtureConfig>,
    pub embedder: EmbedderSpec,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default)]
    pub filter: FilterConfig,
    pub tagging: TaggingConfig,
    #[serde(default)]
    pub pack: PackConfig,
    #[serde(default)]
    pub stats: StatsConfig,
    #[serde(default)]
    pub index: PqParams,
}

/// A validated config with every path made absolute.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub raw: PipelineConfig,
    pub base_dir: PathBuf,
    pub run_dir: PathBuf,
    pub paths: StagePaths,
    pub tagging: TaggingConfig,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| err(format!("{}: {e}", path.display())))?;
        let raw: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| err(format!("{}: {e}", path.display())))?;
        let base = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        let base = std::path::absolute(base).map_err(|e| err(e.to_string()))?;
        Self::from_parts(raw, &base)
    }

    pub fn from_parts(raw: PipelineConfig, base_dir: &Path) -> Result<Self, ConfigError> {
        raw.validate()?;
        let run_dir = base_dir.join(&raw.run_dir);
        let paths = raw.paths.resolved(&run_dir);
        let tagging = TaggingConfig {
            nsfw_head: base_dir.join(&raw.tagging.nsfw_head),
            watermark_head: base_dir.join(&raw.tagging.watermark_head),
            prototypes: base_dir.join(&raw.tagging.prototypes),
        };
        let mut seen: HashMap<PathBuf, &str> = HashMap::new();
        let outputs = paths.named().map(|(name, p)| (name, p.to_path_buf()));
        let inputs = [
            ("tagging.nsfw_head", tagging.nsfw_head.clone()),
            ("tagging.watermark_head", tagging.watermark_head.clone()),
            ("tagging.prototypes", tagging.prototypes.clone()),
        ];
        for (name, p) in outputs.into_iter().chain(inputs) {
            let normal = normalize(&p);
            if normal == normalize(&run_dir) {
                return Err(err(format!("path {name} is the run directory itself")));
            }
            if let Some(other) = seen.insert(normal, name) {
                return Err(err(format!("paths {other} and {name} coincide: {}", p.display())));
            }
        }
        Ok(Self {
            raw,
            base_dir: base_dir.to_path_buf(),
            run_dir,
            paths,
            tagging,
        })
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.run_dir.join("manifest.json")
    }

    /// WAT files matched by the input globs, sorted and deduplicated.
    pub fn wat_files(&self) -> Result<Vec<PathBuf>, ConfigError> {
        let mut files = Vec::new();
        for pattern in &self.raw.wat_inputs {
            let full = self.base_dir.join(pattern);
            let full = full.to_str().ok_or_else(|| err(format!("non-UTF-8 input pattern {pattern:?}")))?;
            let matches = glob::glob(full).map_err(|e| err(format!("input pattern {pattern:?}: {e}")))?;
            for m in matches {
                let p = m.map_err(|e| err(e.to_string()))?;
                if p.is_file() {
                    files.push(p);
                }
            }
        }
        files.sort();
        files.dedup();
        Ok(files)
    }

    pub fn embedder(&self) -> Result<Arc<dyn Embedder>, ConfigError> {
        self.raw.embedder.build(self.raw.dim)
    }
}

/// Lexical normalization (`.` and `..` folded) without touching the disk.
fn normalize(p: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for c in p.components() {
        match c {
            std::path::Component::CurDir => {}
            std::path::Component::ParentDir => {
                out.pop();
            }
            other => out.push(other),
        }
    }
    out
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(err(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.run_id >= MAX_RUN_ID {
            return Err(err(format!("run_id must be below {MAX_RUN_ID}")));
        }
        if self.wat_inputs.is_empty() {
            return Err(err("wat_inputs is empty"));
        }
        if !(0.0..=1.0).contains(&self.langid.threshold) {
            return Err(err(format!("langid.threshold {} outside [0, 1]", self.langid.threshold)));
        }
        self.fetch.validate().map_err(|e| err(e.to_string()))?;
        if self.fetch_run.chunk_size == 0 || self.fetch_run.workers == 0 || self.fetch_run.lease_ttl_ms == 0 {
            return Err(err("fetch_run.chunk_size, workers and lease_ttl_ms must be positive"));
        }
        if self.dim == 0 {
            return Err(err("dim must be positive"));
        }
        self.filter.validate().map_err(|e| err(format!("filter: {e}")))?;
        if self.pack.shard_size == 0 {
            return Err(err("pack.shard_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.stats.watermark_threshold) {
            return Err(err("stats.watermark_threshold outside [0, 1]"));
        }
        self.index.validate(self.dim).map_err(|e| err(format!("index: {e}")))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> serde_json::Value {
        serde_json::json!({
            "schema_version": 1,
            "run_id": 3,
            "run_dir": "run",
            "wat_inputs": ["wat/*.wat"],
            "embedder": "mock:5",
            "dim": 16,
            "tagging": {
                "nsfw_head": "m/nsfw.head",
                "watermark_head": "m/wm.head",
                "prototypes": "m/protos.jsonl"
            },
            "index": {"m": 4, "k": 8}
        })
    }

    fn parse(v: serde_json::Value) -> Result<LoadedConfig, ConfigError> {
        let raw: PipelineConfig = serde_json::from_value(v).map_err(|e| err(e.to_string()))?;
        LoadedConfig::from_parts(raw, Path::new("/base"))
    }

    #[test]
    fn minimal_config_fills_defaults_and_resolves_paths() {
        let cfg = parse(minimal()).unwrap();
        assert_eq!(cfg.run_dir, Path::new("/base/run"));
        assert_eq!(cfg.paths.metadata, Path::new("/base/run/metadata.parquet"));
        assert_eq!(cfg.tagging.prototypes, Path::new("/base/m/protos.jsonl"));
        assert_eq!(cfg.raw.filter, FilterConfig::default());
        assert_eq!(cfg.raw.langid.threshold, langid::DEFAULT_THRESHOLD);
        assert_eq!(cfg.raw.embedder, EmbedderSpec::Mock { seed: 5 });
        assert_eq!(cfg.manifest_path(), Path::new("/base/run/manifest.json"));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let cases: Vec<(&str, Box<dyn Fn(&mut serde_json::Value)>)> = vec![
            ("schema", Box::new(|v| v["schema_version"] = 2.into())),
            ("run id", Box::new(|v| v["run_id"] = MAX_RUN_ID.into())),
            ("no inputs", Box::new(|v| v["wat_inputs"] = serde_json::json!([]))),
            ("unknown field", Box::new(|v| v["colour"] = 1.into())),
            ("threshold", Box::new(|v| v["filter"] = serde_json::json!({"english_threshold": 1.5}))),
            ("langid", Box::new(|v| v["langid"] = serde_json::json!({"threshold": -0.1}))),
            ("m divides d", Box::new(|v| v["index"] = serde_json::json!({"m": 5}))),
            ("embedder", Box::new(|v| v["embedder"] = "clip".into())),
            ("shard", Box::new(|v| v["pack"] = serde_json::json!({"shard_size": 0}))),
            ("same path", Box::new(|v| v["paths"] = serde_json::json!({"pairs": "x.jsonl", "bucketed": "./x.jsonl"}))),
            ("run dir", Box::new(|v| v["paths"] = serde_json::json!({"index": "."}))),
            ("model in run", Box::new(|v| v["tagging"]["prototypes"] = "run/tags.jsonl".into())),
        ];
        for (name, mutate) in cases {
            let mut v = minimal();
            mutate(&mut v);
            assert!(parse(v).is_err(), "{name} accepted");
        }
    }

    #[test]
    fn embedder_specs_round_trip() {
        for s in ["mock:0", "concept:42", "remote:http://127.0.0.1:9000/embed"] {
            let spec: EmbedderSpec = s.parse().unwrap();
            assert_eq!(spec.to_string(), s);
        }
        assert_eq!("mock".parse::<EmbedderSpec>().unwrap(), EmbedderSpec::Mock { seed: 0 });
        assert!("remote".parse::<EmbedderSpec>().is_err());
        assert!("mock:x".parse::<EmbedderSpec>().is_err());
        assert!(EmbedderSpec::Concept { seed: 0 }.build(4).is_err());
        assert_eq!(EmbedderSpec::Mock { seed: 0 }.build(8).unwrap().dimension(), 8);
    }

    #[test]
    fn wat_globs_are_sorted_and_relative_to_config() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("wat")).unwrap();
        for f in ["b.wat", "a.wat", "c.wat.gz", "skip.txt"] {
            std::fs::write(dir.path().join("wat").join(f), "").unwrap();
        }
        let mut v = minimal();
        v["wat_inputs"] = serde_json::json!(["wat/*.wat", "wat/*.gz", "wat/a.wat"]);
        let path = dir.path().join("pipeline.json");
        std::fs::write(&path, v.to_string()).unwrap();
        let cfg = LoadedConfig::load(&path).unwrap();
        let names: Vec<String> = cfg
            .wat_files()
            .unwrap()
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, ["a.wat", "b.wat", "c.wat.gz"]);
    }
}
