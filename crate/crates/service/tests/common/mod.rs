#![allow(dead_code)]

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crawlcurate_core::dataset_io::{write_metadata, write_tag_sidecar, SampleRecord, TagRecord};
use crawlcurate_core::embed::{EmbeddingVector, Embedder};
use crawlcurate_core::knn::{PqCodebook, PqIndex};
use crawlcurate_core::langid::BucketKind;
use crawlcurate_core::tagging::NsfwClassScores;
use crawlcurate_service::{router, AppState, ServiceConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const DIM: usize = 16;
pub const M: usize = 4;

pub struct Sample {
    pub record: SampleRecord,
    pub tag: TagRecord,
    pub vector: EmbeddingVector,
}

pub fn unit(values: Vec<f32>) -> EmbeddingVector {
    EmbeddingVector::normalized(values).unwrap()
}

pub fn random_unit(rng: &mut ChaCha8Rng) -> EmbeddingVector {
    unit((0..DIM).map(|_| rng.sample(StandardNormal)).collect())
}

pub fn sample(id: u64, vector: EmbeddingVector) -> Sample {
    Sample {
        record: SampleRecord {
            id,
            url: format!("http://img.test/{id}.jpg"),
            text: format!("caption {id}"),
            width: 320,
            height: 240,
            similarity: 0.3,
            nsfw_probability: 0.05,
            watermark_probability: 0.1,
            language_bucket: BucketKind::English,
            language_code: "en".into(),
        },
        tag: TagRecord {
            id,
            nsfw_scores: NsfwClassScores::from_array([0.1, 0.01, 0.85, 0.02, 0.02]),
            inappropriate: false,
            inappropriate_labels: vec![],
        },
        vector,
    }
}

pub fn make_nsfw(s: &mut Sample) {
    s.record.nsfw_probability = 0.9;
    s.tag.nsfw_scores = NsfwClassScores::from_array([0.05, 0.3, 0.05, 0.5, 0.1]);
}

pub fn make_inappropriate(s: &mut Sample) {
    s.tag.inappropriate = true;
    s.tag.inappropriate_labels = vec!["weapon".into()];
}

/// A codebook whose first n centroids per subspace are the samples' own
/// sub-vectors, so every sample is encoded exactly.
pub fn exact_codebook(vectors: &[EmbeddingVector]) -> PqCodebook {
    let k = 256;
    assert!(vectors.len() <= k);
    let dsub = DIM / M;
    let mut centroids = vec![10.0f32; k * DIM];
    for sub in 0..M {
        for (j, v) in vectors.iter().enumerate() {
            let start = (sub * k + j) * dsub;
            centroids[start..start + dsub].copy_from_slice(&v.as_slice()[sub * dsub..(sub + 1) * dsub]);
        }
    }
    PqCodebook::from_parts(DIM, M, k, centroids).unwrap()
}

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub samples: Vec<Sample>,
}

impl Fixture {
    pub fn write(samples: Vec<Sample>) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let vectors: Vec<EmbeddingVector> = samples.iter().map(|s| s.vector.clone()).collect();
        let ids: Vec<u64> = samples.iter().map(|s| s.record.id).collect();
        let index = PqIndex::build(exact_codebook(&vectors), &vectors, &ids).unwrap();
        index.save(&dir.path().join("index.pqix")).unwrap();
        let records: Vec<SampleRecord> = samples.iter().map(|s| s.record.clone()).collect();
        write_metadata(&records, &dir.path().join("metadata.parquet")).unwrap();
        let tags: Vec<TagRecord> = samples.iter().map(|s| s.tag.clone()).collect();
        write_tag_sidecar(&tags, &dir.path().join("tags.jsonl")).unwrap();
        Self { dir, samples }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn config(&self) -> ServiceConfig {
        let mut c = ServiceConfig::new(self.path("index.pqix"), self.path("metadata.parquet"), self.path("exports"));
        c.tags = Some(self.path("tags.jsonl"));
        c.stats = Some(self.path("stats.json"));
        c
    }
}

pub struct Running {
    pub addr: SocketAddr,
    pub client: reqwest::Client,
    pub state: Arc<AppState>,
}

impl Running {
    pub fn url(&self, path: &str) -> String {
        format!("http://{}{}", self.addr, path)
    }

    pub async fn post_json(&self, path: &str, body: &serde_json::Value) -> reqwest::Response {
        self.client.post(self.url(path)).json(body).send().await.unwrap()
    }

    pub async fn get(&self, path: &str) -> reqwest::Response {
        self.client.get(self.url(path)).send().await.unwrap()
    }
}

pub async fn start(config: ServiceConfig) -> Running {
    start_with_ui(config, None).await
}

pub async fn start_with_ui(config: ServiceConfig, ui: Option<&Path>) -> Running {
    let state = AppState::load(&config).unwrap();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let app = router(state.clone(), ui);
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    Running {
        addr,
        client: reqwest::Client::new(),
        state,
    }
}

pub fn with_embedder(mut config: ServiceConfig, e: Arc<dyn Embedder>) -> ServiceConfig {
    config.embedder = Some(e);
    config
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
