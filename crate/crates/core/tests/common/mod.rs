#![allow(dead_code)]

pub mod f1;

use std::path::{Path, PathBuf};

use mrag::corpus::{segment_document, Document, ReferenceTokenizer};
use mrag::extraction::{ExtractionConfig, ExtractionPrompt};
use mrag::llm_gateway::{write_fixture_at, ChatRequest, Gateway, GatewayConfig};
use mrag::corpus::render_tagged_document;

pub fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(rel)
}

pub fn read_fixture(rel: &str) -> String {
    std::fs::read_to_string(fixture(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

/// `n` distinct single-token words.
pub fn words(n: usize) -> String {
    (0..n).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
}

/// The extraction request the attempt loop will send for `doc`.
pub fn extraction_request(doc: &Document, cfg: &ExtractionConfig) -> ChatRequest {
    let segments = segment_document(doc, cfg.segment_size, &ReferenceTokenizer).unwrap();
    let tagged = render_tagged_document(&segments).unwrap();
    let total: usize = segments.iter().map(|s| s.token_count).sum();
    ExtractionPrompt::from_config(cfg).unwrap().build(&tagged, total).unwrap()
}

/// Install authored replies, one per attempt, and return a replay gateway over them.
pub fn replay_with(dir: &Path, req: &ChatRequest, replies: &[&str]) -> Gateway {
    for (i, r) in replies.iter().enumerate() {
        write_fixture_at(dir, req, i + 1, r).unwrap();
    }
    Gateway::new(GatewayConfig {
        fixture_dir: dir.to_path_buf(),
        ..Default::default()
    })
    .unwrap()
}

pub const DEMO_QUERY: &str = "Which corpus do the authors evaluate on?";

pub fn demo_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("demo")
}

/// The demo config with every path made absolute and outputs moved under `out`.
pub fn demo_config(out: &Path) -> serde_json::Value {
    let demo = demo_dir();
    let mut cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(demo.join("config.json")).unwrap()).unwrap();
    cfg["gateway"]["fixture_dir"] = demo.join("fixtures").to_str().unwrap().into();
    cfg["paths"]["corpus"] = fixture("longbench_sample.jsonl").to_str().unwrap().into();
    for (key, rel) in [
        ("marker_store", "markers.jsonl"),
        ("extraction_log", "extraction_log.jsonl"),
        ("index_file", "keys.idx"),
        ("report_dir", "reports"),
    ] {
        cfg["paths"][key] = out.join(rel).to_str().unwrap().into();
    }
    cfg
}

pub fn write_config(dir: &Path, cfg: &serde_json::Value) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Run {
    pub fn json(&self) -> serde_json::Value {
        serde_json::from_str(&self.stdout).unwrap_or_else(|e| panic!("{e}: {}\n{}", self.stdout, self.stderr))
    }
}

pub fn mrag(config: &Path, args: &[&str]) -> Run {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_mrag"))
        .arg("--config")
        .arg(config)
        .arg("-q")
        .args(args)
        .output()
        .unwrap();
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8(out.stdout).unwrap(),
        stderr: String::from_utf8(out.stderr).unwrap(),
    }
}

/// extract -> index -> query -> answer in replay mode; returns the stdout of query and answer.
pub fn replay_pipeline(dir: &Path) -> (String, String) {
    let config = write_config(dir, &demo_config(dir));
    for step in [&["extract"][..], &["index"]] {
        let r = mrag(&config, step);
        assert_eq!(r.code, 0, "{step:?}: {}", r.stderr);
    }
    let q = mrag(&config, &["query", DEMO_QUERY]);
    let a = mrag(&config, &["answer", DEMO_QUERY]);
    assert_eq!((q.code, a.code), (0, 0), "{}{}", q.stderr, a.stderr);
    (q.stdout, a.stdout)
}
