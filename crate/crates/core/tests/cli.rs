mod common;

use common::{demo_config, demo_dir, extraction_request, mrag, replay_pipeline, write_config, DEMO_QUERY};
use mrag::corpus::Document;
use mrag::extraction::ExtractionConfig;
use mrag::llm_gateway::write_fixture_at;
use serde_json::Value;

#[test]
fn replay_pipeline_is_byte_identical_across_runs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = replay_pipeline(a.path());
    let second = replay_pipeline(b.path());
    assert_eq!(first, second);
    for file in ["markers.jsonl", "extraction_log.jsonl", "keys.idx", "keys.idx.meta.json"] {
        let x = std::fs::read(a.path().join(file)).unwrap();
        let y = std::fs::read(b.path().join(file)).unwrap();
        assert!(x == y, "{file} differs between runs");
    }
    // and both match the committed artifacts
    for file in ["markers.jsonl", "extraction_log.jsonl"] {
        let got = std::fs::read_to_string(a.path().join(file)).unwrap();
        let want = std::fs::read_to_string(demo_dir().join("expected").join(file)).unwrap();
        assert_eq!(got, want, "{file}");
    }
    let answer: Value = serde_json::from_str(&first.1).unwrap();
    assert_eq!(answer["query"], DEMO_QUERY);
    assert!(answer["answer"].as_str().unwrap().contains("Harlow"));
}

#[test]
fn stats_match_independent_recomputation() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &demo_config(dir.path()));
    assert_eq!(mrag(&config, &["extract"]).code, 0);
    let stats = mrag(&config, &["stats"]).json();
    let want: Value = serde_json::from_str(&std::fs::read_to_string(demo_dir().join("expected/stats.json")).unwrap()).unwrap();
    let close = |got: &Value, key: &str| {
        let (g, w) = (got.as_f64().unwrap(), want[key].as_f64().unwrap());
        assert!((g - w).abs() < 1e-9, "{key}: {g} vs {w}");
    };
    assert_eq!(stats["documents"], want["documents"]);
    assert_eq!(stats["markers"], want["markers"]);
    close(&stats["coverage"]["mean"], "coverage_mean");
    close(&stats["coverage"]["variance"], "coverage_variance");
    close(&stats["coverage"]["fallback_pct"], "fallback_pct");
    close(&stats["lengths"]["k"]["mean"], "k_mean");
    close(&stats["lengths"]["v"]["mean"], "v_mean");
    close(&stats["lengths"]["k"]["median"], "k_median");
    close(&stats["lengths"]["v"]["median"], "v_median");
}

#[test]
fn every_command_reports_the_same_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &demo_config(dir.path()));
    let hash = mrag(&config, &["extract"]).json()["config_hash"].clone();
    assert_eq!(hash.as_str().unwrap().len(), 64);
    for args in [&["index"][..], &["query", DEMO_QUERY], &["answer", DEMO_QUERY], &["stats"]] {
        assert_eq!(mrag(&config, args).json()["config_hash"], hash, "{args:?}");
    }
    // query-time overrides leave the artifact hash alone
    let q = mrag(&config, &["--budget", "384", "--ordering", "similarity", "query", DEMO_QUERY]).json();
    assert_eq!(q["config_hash"], hash);
    assert_eq!(q["budget_tokens"], 384);
}

#[test]
fn bench_writes_one_report_per_budget() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &demo_config(dir.path()));
    assert_eq!(mrag(&config, &["extract"]).code, 0);
    let run = mrag(&config, &["bench"]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    let hash = run.json()["config_hash"].clone();
    let reports = dir.path().join("reports");
    let mut names: Vec<String> = std::fs::read_dir(&reports)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("bench-b") && n.ends_with(".json"))
        .collect();
    names.sort();
    assert_eq!(names, ["bench-b128.json", "bench-b384.json", "bench-b640.json"]);
    for name in &names {
        let file: Value = serde_json::from_str(&std::fs::read_to_string(reports.join(name)).unwrap()).unwrap();
        assert_eq!(file["config_hash"], hash);
        let strategies: Vec<&str> = file["reports"].as_array().unwrap().iter().map(|r| r["strategy"].as_str().unwrap()).collect();
        assert_eq!(strategies, ["mrag-position", "mrag-similarity", "fixed", "dos"]);
    }
    let latency: Value = serde_json::from_str(&std::fs::read_to_string(reports.join("latency.json")).unwrap()).unwrap();
    assert_eq!(latency["config_hash"], hash);
}

#[test]
fn fully_fallback_document_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("docs");
    let fixtures = dir.path().join("fx");
    std::fs::create_dir_all(&corpus).unwrap();
    let text = "The lighthouse keeper logged every storm. ".repeat(40);
    std::fs::write(corpus.join("only.txt"), &text).unwrap();
    let req = extraction_request(&Document::new("only", text, "t"), &ExtractionConfig::default());
    write_fixture_at(&fixtures, &req, 1, "I would rather not.").unwrap();
    let mut cfg = demo_config(dir.path());
    cfg["paths"]["corpus"] = corpus.to_str().unwrap().into();
    cfg["gateway"]["fixture_dir"] = fixtures.to_str().unwrap().into();
    let run = mrag(&write_config(dir.path(), &cfg), &["extract"]);
    assert_eq!(run.code, 2, "{}", run.stderr);
    assert_eq!(run.json()["fully_fallback"], serde_json::json!(["only"]));
}

#[test]
fn empty_corpus_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("empty");
    std::fs::create_dir_all(&corpus).unwrap();
    let mut cfg = demo_config(dir.path());
    cfg["paths"]["corpus"] = corpus.to_str().unwrap().into();
    let run = mrag(&write_config(dir.path(), &cfg), &["extract"]);
    assert_eq!(run.code, 1);
    assert!(run.stderr.starts_with("error:"), "{}", run.stderr);
    assert!(run.stdout.is_empty());
}

#[test]
fn corrupt_store_header_is_a_version_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &demo_config(dir.path()));
    assert_eq!(mrag(&config, &["extract"]).code, 0);
    let store = dir.path().join("markers.jsonl");
    let text = std::fs::read_to_string(&store).unwrap();
    std::fs::write(&store, text.replacen("\"version\":1", "\"version\":7", 1)).unwrap();
    for args in [&["stats"][..], &["index"]] {
        let run = mrag(&config, args);
        assert_eq!(run.code, 1, "{args:?}");
        assert!(run.stderr.contains("VersionMismatch"), "{}", run.stderr);
    }
}

#[test]
fn missing_config_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let run = mrag(&dir.path().join("nope.json"), &["stats"]);
    assert_eq!(run.code, 1);
    assert!(run.stderr.contains("nope.json"));
}
