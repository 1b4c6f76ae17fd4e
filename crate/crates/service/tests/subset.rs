mod common;

use std::time::Duration;

use common::*;
use crawlcurate_core::dataset_io::{read_metadata, SampleRecord};
use crawlcurate_core::langid::BucketKind;
use serde_json::{json, Value};

/// Mixed resolutions, similarities, languages and tags.
fn mixed_fixture() -> Fixture {
    let mut r = rng(21);
    let sizes = [(320, 240), (1024, 1024), (2048, 1536), (1023, 2000), (4000, 1000), (1200, 1100)];
    let langs = [("en", BucketKind::English), ("de", BucketKind::Other), ("fr", BucketKind::Other), ("und", BucketKind::NoLanguage)];
    let samples = (0..120u64)
        .map(|i| {
            let mut s = sample(i, random_unit(&mut r));
            let (w, h) = sizes[i as usize % sizes.len()];
            s.record.width = w;
            s.record.height = h;
            s.record.similarity = 0.2 + (i % 23) as f64 * 0.01;
            s.record.watermark_probability = (i % 11) as f64 / 10.0;
            let (code, bucket) = langs[i as usize % langs.len()];
            s.record.language_code = code.into();
            s.record.language_bucket = bucket;
            if i % 9 == 0 {
                make_nsfw(&mut s);
            }
            if i % 13 == 0 {
                make_inappropriate(&mut s);
            }
            s
        })
        .collect();
    Fixture::write(samples)
}

async fn export(run: &Running, predicate: Value) -> (String, Vec<SampleRecord>) {
    let resp = run.post_json("/subset/export", &json!({ "predicate": predicate })).await;
    assert_eq!(resp.status(), 202);
    let body: Value = resp.json().await.unwrap();
    let job = body["job"].as_str().unwrap().to_string();
    let path = format!("/subset/{job}");
    for _ in 0..500 {
        let resp = run.get(&path).await;
        if resp.status() == 202 {
            let pending: Value = resp.json().await.unwrap();
            assert!(["queued", "running"].contains(&pending["status"].as_str().unwrap()));
            tokio::time::sleep(Duration::from_millis(10)).await;
            continue;
        }
        assert_eq!(resp.status(), 200);
        assert_eq!(resp.headers()["content-type"], "application/vnd.apache.parquet");
        let rows: usize = resp.headers()["x-row-count"].to_str().unwrap().parse().unwrap();
        let bytes = resp.bytes().await.unwrap();
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("subset.parquet");
        std::fs::write(&file, &bytes).unwrap();
        let records = read_metadata(&file).unwrap();
        assert_eq!(records.len(), rows);
        return (job, records);
    }
    panic!("export {job} did not finish");
}

fn brute_force(fx: &Fixture, keep: impl Fn(&Sample) -> bool) -> Vec<SampleRecord> {
    fx.samples.iter().filter(|s| keep(s)).map(|s| s.record.clone()).collect()
}

#[tokio::test]
async fn exports_equal_direct_row_scans() {
    let fx = mixed_fixture();
    let run = start(fx.config()).await;
    let (_, sim) = export(&run, json!({"min_similarity": 0.3})).await;
    assert_eq!(sim, brute_force(&fx, |s| s.record.similarity >= 0.3));
    assert!(!sim.is_empty() && sim.len() < fx.samples.len());

    let (_, hires) = export(&run, json!({"min_width": 1024, "min_height": 1024})).await;
    assert_eq!(hires, brute_force(&fx, |s| s.record.width >= 1024 && s.record.height >= 1024));
    assert!(!hires.is_empty());

    let (_, combo) = export(&run, json!({"sfw_only": true, "max_watermark": 0.5, "languages": ["de", "fr"]})).await;
    let want = brute_force(&fx, |s| {
        s.record.nsfw_probability < 0.5
            && !s.tag.inappropriate
            && s.record.watermark_probability <= 0.5
            && (s.record.language_code == "de" || s.record.language_code == "fr")
    });
    assert_eq!(combo, want);

    let (_, buckets) = export(&run, json!({"language_buckets": ["no_language"]})).await;
    assert_eq!(buckets, brute_force(&fx, |s| s.record.language_bucket == BucketKind::NoLanguage));
}

#[tokio::test]
async fn empty_match_gives_valid_zero_row_file() {
    let fx = mixed_fixture();
    let run = start(fx.config()).await;
    let (_, rows) = export(&run, json!({"min_width": 100_000})).await;
    assert!(rows.is_empty());
}

#[tokio::test]
async fn malformed_predicates_are_400() {
    let fx = mixed_fixture();
    let run = start(fx.config()).await;
    for body in [
        json!({"predicate": {}}),
        json!({"predicate": {"sfw_only": false}}),
        json!({"predicate": {"min_similarity": 2.0}}),
        json!({"predicate": {"max_watermark": -0.1}}),
        json!({"predicate": {"languages": []}}),
        json!({"predicate": {"language_buckets": ["martian"]}}),
        json!({"predicate": {"min_width": "wide"}}),
        json!({"predicate": {"colour": "red"}}),
        json!({"min_width": 10}),
        json!([]),
    ] {
        let resp = run.post_json("/subset/export", &body).await;
        assert_eq!(resp.status(), 400, "{body}");
    }
    assert_eq!(run.get("/subset/ffffffffffffffff").await.status(), 404);
    assert_eq!(run.get("/subset/ffffffffffffffff/status").await.status(), 404);
}

#[tokio::test]
async fn same_predicate_same_job_and_bounded_pool_drains() {
    let fx = mixed_fixture();
    let mut config = fx.config();
    config.export_workers = 1;
    let run = start(config).await;
    let mut jobs = Vec::new();
    for w in [100, 200, 300, 400, 500, 600, 700, 800] {
        let body: Value = run
            .post_json("/subset/export", &json!({"predicate": {"min_width": w}}))
            .await
            .json()
            .await
            .unwrap();
        jobs.push((w, body["job"].as_str().unwrap().to_string()));
    }
    let (again, _) = export(&run, json!({"min_width": 100})).await;
    assert_eq!(again, jobs[0].1);
    for (w, job) in &jobs {
        let (same, rows) = export(&run, json!({"min_width": w})).await;
        assert_eq!(&same, job);
        assert_eq!(rows, brute_force(&fx, |s| s.record.width >= *w));
        let status: Value = run.get(&format!("/subset/{job}/status")).await.json().await.unwrap();
        assert_eq!(status["status"], "done");
        assert_eq!(status["rows"], rows.len());
    }
}

#[tokio::test]
async fn finished_exports_survive_a_restart() {
    let fx = mixed_fixture();
    let (job, rows) = export(&start(fx.config()).await, json!({"min_similarity": 0.35})).await;
    let file = fx.path("exports").join(format!("{job}.parquet"));
    let written = std::fs::metadata(&file).unwrap().modified().unwrap();
    let (job2, rows2) = export(&start(fx.config()).await, json!({"min_similarity": 0.35})).await;
    assert_eq!((job, rows), (job2, rows2));
    assert_eq!(std::fs::metadata(&file).unwrap().modified().unwrap(), written);
}
