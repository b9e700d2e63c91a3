//! JSON run configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ann_index::HnswParams;
use crate::corpus::REFERENCE_TOKENIZER;
use crate::embedding::EmbedderConfig;
use crate::extraction::ExtractionConfig;
use crate::llm_gateway::GatewayConfig;
use crate::retrieval::{BudgetPolicy, ContextOrdering};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnswerConfig {
    pub model: String,
    /// `None` uses the bundled template.
    pub template_path: Option<PathBuf>,
    pub max_output_tokens: Option<u32>,
}

impl Default for AnswerConfig {
    fn default() -> Self {
        Self {
            model: "qwen3-30b-a3b".to_string(),
            template_path: None,
            max_output_tokens: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    /// LongBench-style QA file; defaults to the corpus file.
    pub qa_file: Option<PathBuf>,
    pub budgets: Vec<usize>,
    pub strategies: Vec<String>,
    /// Chunk size of the fixed-size baselines.
    pub chunk_size: usize,
    pub latency_repetitions: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            qa_file: None,
            budgets: vec![128, 384, 640],
            strategies: ["mrag-position", "mrag-similarity", "fixed", "dos"].map(String::from).to_vec(),
            chunk_size: 128,
            latency_repetitions: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    /// LongBench JSONL file, or a directory of `.txt` documents.
    pub corpus: PathBuf,
    pub marker_store: PathBuf,
    pub extraction_log: PathBuf,
    pub index_file: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            corpus: "corpus.jsonl".into(),
            marker_store: "out/markers.jsonl".into(),
            extraction_log: "out/extraction_log.jsonl".into(),
            index_file: "out/keys.idx".into(),
            report_dir: "out/reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub tokenizer: String,
    /// Authoritative segment size; copied into the extraction section on load.
    pub segment_size: usize,
    pub extraction: ExtractionConfig,
    pub gateway: GatewayConfig,
    pub embedder: EmbedderConfig,
    pub index: HnswParams,
    pub budget: BudgetPolicy,
    pub ordering: ContextOrdering,
    pub answer: AnswerConfig,
    pub bench: BenchConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            tokenizer: REFERENCE_TOKENIZER.to_string(),
            segment_size: 128,
            extraction: ExtractionConfig::default(),
            gateway: GatewayConfig::default(),
            embedder: EmbedderConfig::default(),
            index: HnswParams::default(),
            budget: BudgetPolicy::default(),
            ordering: ContextOrdering::Position,
            answer: AnswerConfig::default(),
            bench: BenchConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    /// Parse and resolve relative paths against the config file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.display().to_string(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.normalize();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.paths.corpus,
            &mut self.paths.marker_store,
            &mut self.paths.extraction_log,
            &mut self.paths.index_file,
            &mut self.paths.report_dir,
            &mut self.gateway.fixture_dir,
        ] {
            resolve(base, p);
        }
        for p in [
            self.extraction.examples_path.as_mut(),
            self.extraction.prompt_template_path.as_mut(),
            self.answer.template_path.as_mut(),
            self.bench.qa_file.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            resolve(base, p);
        }
    }

    pub fn normalize(&mut self) {
        self.extraction.segment_size = self.segment_size;
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        if self.segment_size < 1 {
            return Err(ConfigError::Invalid("segment_size must be >= 1".into()));
        }
        self.extraction.validate().map_err(|e| invalid(&e))?;
        self.index.validate().map_err(|e| invalid(&e))?;
        self.budget.validate().map_err(|e| invalid(&e))?;
        if self.bench.budgets.contains(&0) || self.bench.chunk_size < 1 {
            return Err(ConfigError::Invalid("bench budgets and chunk_size must be >= 1".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON of the settings that shape artifacts.
    ///
    /// Paths, transport settings and the query-time budget/ordering are left
    /// out, so the store, index and reports of one run share a hash even when
    /// a command overrides budget or ordering; reports record those two
    /// separately.
    pub fn config_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object_mut().expect("config is an object");
        for key in ["paths", "gateway", "budget", "ordering"] {
            obj.remove(key);
        }
        for (section, key) in [
            ("extraction", "examples_path"),
            ("extraction", "prompt_template_path"),
            ("extraction", "workers"),
            ("embedder", "base_url"),
            ("embedder", "api_key_env"),
            ("embedder", "batch_size"),
            ("embedder", "timeout_ms"),
            ("answer", "template_path"),
            ("bench", "qa_file"),
            ("bench", "latency_repetitions"),
        ] {
            if let Some(o) = obj.get_mut(section).and_then(|s| s.as_object_mut()) {
                o.remove(key);
            }
        }
        // serde_json maps are key-sorted, so this rendering is canonical
        let canonical = serde_json::to_string(&v).expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}
