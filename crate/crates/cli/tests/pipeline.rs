//! End-to-end runs over the generated fixture corpus.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crawlcurate::corpus::{self, PlantedCounts};
use crawlcurate::{run_pipeline, LoadedConfig, PipelineError, RunManifest, Stage, StageStatus};
use crawlcurate_core::dataset_io::{read_metadata, read_shard, read_tag_sidecar};
use crawlcurate_core::embed::read_embeddings;
use crawlcurate_core::knn::{LoadMode, PqIndex};

fn line_count(path: &Path) -> u64 {
    fs::read_to_string(path).unwrap().lines().filter(|l| !l.trim().is_empty()).count() as u64
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                if rel != "manifest.json" && !rel.starts_with("jobs.log") {
                    out.insert(rel, fs::read(&p).unwrap());
                }
            }
        }
    }
    out
}

fn edit_config(path: &Path, edit: impl FnOnce(&mut serde_json::Value)) {
    let mut v: serde_json::Value = serde_json::from_slice(&fs::read(path).unwrap()).unwrap();
    edit(&mut v);
    fs::write(path, serde_json::to_vec_pretty(&v).unwrap()).unwrap();
}

fn assert_matches_planted(m: &RunManifest, planted: &PlantedCounts) {
    assert!(m.conservation_violations().is_empty(), "{:?}", m.conservation_violations());
    assert_eq!(m.stage(Stage::Extract).counters.input, planted.img_entries);
    for r in &m.stages {
        assert_eq!(r.status, StageStatus::Done, "{}", r.stage);
        let name = r.stage.to_string();
        assert_eq!(r.counters.kept, planted.kept[&name], "{name} kept");
        let expected = planted.drops.get(&name).cloned().unwrap_or_default();
        assert_eq!(r.counters.dropped, expected, "{name} drops");
        assert!(r.output_digest.is_some() && r.input_digest.is_some());
    }
    let extract = &m.stage(Stage::Extract).notes;
    assert_eq!(extract["malformed_records"], planted.malformed_records);
    assert_eq!(extract["records"], planted.pages);
}

/// Counters in the manifest against counts recomputed from the files.
fn assert_recount(cfg: &LoadedConfig, m: &RunManifest) {
    let p = &cfg.paths;
    let kept = |s: Stage| m.stage(s).counters.kept;
    assert_eq!(line_count(&p.pairs), kept(Stage::Extract));
    assert_eq!(line_count(&p.bucketed), kept(Stage::Langid));
    assert_eq!(line_count(&p.fetched), kept(Stage::Fetch));
    assert_eq!(line_count(&p.filtered), kept(Stage::Filter));
    assert_eq!(line_count(&p.tagged), kept(Stage::Tag));
    let (_, vectors) = read_embeddings(fs::File::open(&p.embeddings).unwrap()).unwrap();
    assert_eq!(vectors.len() as u64, kept(Stage::Filter));
    assert_eq!(read_metadata(&p.metadata).unwrap().len() as u64, kept(Stage::Pack));
    assert_eq!(read_tag_sidecar(&p.tag_sidecar).unwrap().len() as u64, kept(Stage::Pack));
    let mut shard_samples = 0;
    for e in fs::read_dir(&p.shards).unwrap() {
        shard_samples += read_shard(fs::File::open(e.unwrap().path()).unwrap()).unwrap().len() as u64;
    }
    assert_eq!(shard_samples, kept(Stage::Pack));
    let index = PqIndex::load(&p.index, LoadMode::InCore).unwrap();
    assert_eq!(index.len() as u64, kept(Stage::Index));
    let images = fs::read_dir(&p.images).unwrap().count() as u64;
    assert!(images <= kept(Stage::Fetch) && images > 0);
}

#[test]
fn fixture_run_resume_and_invalidation() {
    let dir = tempfile::tempdir().unwrap();
    let generated = corpus::generate(dir.path(), 11).unwrap();
    let cfg = LoadedConfig::load(&generated.config_path).unwrap();

    let first = run_pipeline(&cfg, &Stage::ALL).unwrap();
    assert_eq!(first.executed, Stage::ALL);
    assert_matches_planted(&first.manifest, &generated.planted);
    assert_recount(&cfg, &first.manifest);
    let on_disk = RunManifest::load(&cfg.manifest_path()).unwrap();
    assert_eq!(on_disk, first.manifest);

    let stats: serde_json::Value = serde_json::from_slice(&fs::read(&cfg.paths.stats).unwrap()).unwrap();
    let n = generated.planted.kept["pack"] as f64;
    assert_eq!(stats["nsfw_fraction"].as_f64().unwrap(), generated.planted.nsfw as f64 / n);
    assert_eq!(stats["watermark_fraction"].as_f64().unwrap(), generated.planted.watermarked as f64 / n);
    assert_eq!(stats["stage_drops"]["filter"]["below_threshold"], 1350);
    let inappropriate = read_tag_sidecar(&cfg.paths.tag_sidecar).unwrap().iter().filter(|t| t.inappropriate).count();
    assert_eq!(inappropriate as u64, generated.planted.inappropriate);

    // Unchanged inputs: every stage is skipped and nothing is rewritten.
    let manifest_bytes = fs::read(cfg.manifest_path()).unwrap();
    let outputs = snapshot(&cfg.run_dir);
    let second = run_pipeline(&cfg, &Stage::ALL).unwrap();
    assert!(second.executed.is_empty(), "{:?}", second.executed);
    assert_eq!(second.skipped, Stage::ALL);
    assert_eq!(fs::read(cfg.manifest_path()).unwrap(), manifest_bytes);
    assert_eq!(snapshot(&cfg.run_dir), outputs);

    // A corrupted intermediate file is rebuilt by its producer; consumers
    // see identical bytes again and stay skipped.
    let mut text = fs::read_to_string(&cfg.paths.bucketed).unwrap();
    text.push_str("{\"corrupt\": true}\n");
    fs::write(&cfg.paths.bucketed, text).unwrap();
    let third = run_pipeline(&cfg, &Stage::ALL).unwrap();
    assert_eq!(third.executed, [Stage::Langid]);
    assert_eq!(snapshot(&cfg.run_dir), outputs);

    fs::remove_file(&cfg.paths.index).unwrap();
    let fourth = run_pipeline(&cfg, &Stage::ALL).unwrap();
    assert_eq!(fourth.executed, [Stage::Index]);
    assert_eq!(snapshot(&cfg.run_dir), outputs);

    // A filter threshold change re-runs filtering only; its output (and so
    // everything downstream) is unchanged on this corpus.
    edit_config(&generated.config_path, |v| v["filter"] = serde_json::json!({"english_threshold": 0.3}));
    let cfg = LoadedConfig::load(&generated.config_path).unwrap();
    let fifth = run_pipeline(&cfg, &Stage::ALL).unwrap();
    assert_eq!(fifth.executed, [Stage::Filter]);
    assert_eq!(snapshot(&cfg.run_dir), outputs);

    // A failing stage is recorded and leaves earlier outputs valid.
    edit_config(&generated.config_path, |v| v["index"]["k"] = 256.into());
    let cfg = LoadedConfig::load(&generated.config_path).unwrap();
    match run_pipeline(&cfg, &Stage::ALL) {
        Err(PipelineError::StageFailed { stage: Stage::Index, cause }) => assert!(cause.contains("256"), "{cause}"),
        other => panic!("expected index failure, got {other:?}"),
    }
    let m = RunManifest::load(&cfg.manifest_path()).unwrap();
    assert_eq!(m.stage(Stage::Index).status, StageStatus::Failed);
    assert!(m.stage(Stage::Index).error.is_some());
    assert!(Stage::ALL[..7].iter().all(|&s| m.stage(s).status == StageStatus::Done));
    assert_eq!(read_metadata(&cfg.paths.metadata).unwrap().len(), 150);

    // The service loads the run's outputs as they are.
    let mut sc = crawlcurate_service::ServiceConfig::new(
        dir.path().join("idx-copy.pqix"),
        cfg.paths.metadata.clone(),
        cfg.paths.exports.clone(),
    );
    edit_config(&generated.config_path, |v| v["index"]["k"] = 64.into());
    let cfg = LoadedConfig::load(&generated.config_path).unwrap();
    let last = run_pipeline(&cfg, &[Stage::Index]).unwrap();
    assert_eq!(last.executed, [Stage::Index]);
    fs::copy(&cfg.paths.index, &sc.index).unwrap();
    sc.tags = Some(cfg.paths.tag_sidecar.clone());
    sc.stats = Some(cfg.paths.stats.clone());
    sc.embedder = Some(cfg.embedder().unwrap());
    let state = crawlcurate_service::AppState::load(&sc).unwrap();
    assert_eq!(state.dataset.records().len(), 150);
}

#[test]
fn stage_without_inputs_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let generated = corpus::generate(dir.path(), 3).unwrap();
    let cfg = LoadedConfig::load(&generated.config_path).unwrap();
    match run_pipeline(&cfg, &[Stage::Filter]) {
        Err(PipelineError::StageFailed { stage: Stage::Filter, cause }) => {
            assert!(cause.contains("fetched.jsonl") && cause.contains("run fetch first"), "{cause}")
        }
        other => panic!("{other:?}"),
    }
    let m = RunManifest::load(&cfg.manifest_path()).unwrap();
    assert_eq!(m.stage(Stage::Filter).status, StageStatus::Failed);
    assert_eq!(m.stage(Stage::Extract).status, StageStatus::Pending);

    // Single stages run in isolation once their inputs exist.
    let run = run_pipeline(&cfg, &[Stage::Langid, Stage::Extract]).unwrap();
    assert_eq!(run.executed, [Stage::Extract, Stage::Langid]);
    assert!(run.manifest.conservation_violations().is_empty());
}
