//! Command-level orchestration: each `run_*` function is one CLI command
//! minus argument parsing and printing.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ann_index::{HnswIndex, IndexError};
use crate::baselines::{chunk_retrieve, fixed_size_chunk, Chunk, ChunkIndex};
use crate::config::{ConfigError, RunConfig};
use crate::corpus::{
    documents_from_records, load_longbench_jsonl, load_text_document, CorpusError, Document, QaRecord, Tokenizer,
    TokenizerHandle, TokenizerRegistry,
};
use crate::embedding::{build_embedder, Embedder, EmbeddingError};
use crate::evaluation::{
    best_f1_over_golds, coverage_stats, latency_bench, length_stats, BenchStrategy, CoverageStats, EvaluationError,
    LatencySummary, LengthStats, MatchBackend, RecordRow, RunReport,
};
use crate::extraction::{extract_corpus, ExtractionError, MarkerSet, MetaMarker};
use crate::generation::{build_answer_prompt, extract_answer, Answer, AnswerRequest, AnswerTemplate};
use crate::llm_gateway::{ChatBackend, Gateway, GatewayError};
use crate::retrieval::{retrieve, BudgetPolicy, ContextOrdering, ContextUnit, RetrievalError, Retrieved};
use crate::store::{
    marker_sets, read_extraction_log, write_extraction_log, ExtractionLogEntry, MarkerStore, StoreError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("corpus {0} contains no documents")]
    EmptyCorpus(String),
    #[error("{artifact} was produced under config {found}, current config is {expected}")]
    ConfigMismatch {
        artifact: String,
        expected: String,
        found: String,
    },
    #[error("index dimension {index} does not match embedder dimension {embedder}")]
    DimensionMismatch { index: usize, embedder: usize },
    #[error("unknown bench strategy `{0}` (expected mrag-position, mrag-similarity, fixed or dos)")]
    UnknownStrategy(String),
    #[error("no markers stored for record {0}")]
    NoMarkersForRecord(String),
    #[error("i/o error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Extraction(#[from] ExtractionError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Evaluation(#[from] EvaluationError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn tokenizer(cfg: &RunConfig) -> Result<Arc<dyn Tokenizer>, PipelineError> {
    let handle = TokenizerHandle {
        name: cfg.tokenizer.clone(),
        vocab_hint: String::new(),
    };
    Ok(TokenizerRegistry::default().resolve(&handle)?)
}

fn is_jsonl(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "jsonl")
}

/// A LongBench JSONL file yields one document per record context; a
/// directory yields one document per `.txt` file, in file-name order.
pub fn load_corpus(path: &Path) -> Result<Vec<Document>, PipelineError> {
    let docs = if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(io_err(path))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "txt"))
            .collect();
        files.sort();
        files.iter().map(load_text_document).collect::<Result<Vec<_>, _>>()?
    } else {
        let source = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        documents_from_records(&load_longbench_jsonl(path)?, &source)?
    };
    if docs.is_empty() {
        return Err(PipelineError::EmptyCorpus(path.display().to_string()));
    }
    Ok(docs)
}

pub fn open_gateway(cfg: &RunConfig) -> Result<Gateway, PipelineError> {
    Ok(Gateway::new(cfg.gateway.clone())?)
}

fn check_hash(artifact: &Path, found: &str, expected: &str) -> Result<(), PipelineError> {
    if found != expected {
        return Err(PipelineError::ConfigMismatch {
            artifact: artifact.display().to_string(),
            expected: expected.to_string(),
            found: found.to_string(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct ExtractOutcome {
    pub config_hash: String,
    pub documents: usize,
    pub markers: usize,
    pub fallback_markers: usize,
    pub fully_fallback: Vec<String>,
    pub marker_store: PathBuf,
    pub extraction_log: PathBuf,
}

pub fn run_extract(cfg: &RunConfig, backend: &dyn ChatBackend) -> Result<ExtractOutcome, PipelineError> {
    let docs = load_corpus(&cfg.paths.corpus)?;
    let tok = tokenizer(cfg)?;
    let hash = cfg.config_hash();
    let sets = extract_corpus(&docs, &cfg.extraction, backend, tok.as_ref())?
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let store = MarkerStore::from_sets(&hash, &sets)?;
    store.save(&cfg.paths.marker_store)?;
    let log: Vec<ExtractionLogEntry> = sets.iter().map(|s| ExtractionLogEntry::from_set(&hash, s)).collect();
    write_extraction_log(&cfg.paths.extraction_log, &log)?;
    Ok(ExtractOutcome {
        config_hash: hash,
        documents: sets.len(),
        markers: store.len(),
        fallback_markers: sets.iter().map(|s| s.fallback_count).sum(),
        fully_fallback: sets.iter().filter(|s| s.fully_fallback()).map(|s| s.doc_id.clone()).collect(),
        marker_store: cfg.paths.marker_store.clone(),
        extraction_log: cfg.paths.extraction_log.clone(),
    })
}

pub fn load_store(cfg: &RunConfig) -> Result<MarkerStore, PipelineError> {
    let store = MarkerStore::load(&cfg.paths.marker_store)?;
    check_hash(&cfg.paths.marker_store, &store.config_hash, &cfg.config_hash())?;
    Ok(store)
}

/// Embed every key and insert in marker-id order.
pub fn build_marker_index<'a>(
    markers: impl IntoIterator<Item = &'a MetaMarker>,
    embedder: &dyn Embedder,
    cfg: &RunConfig,
) -> Result<HnswIndex, PipelineError> {
    let mut markers: Vec<&MetaMarker> = markers.into_iter().collect();
    markers.sort_by(|a, b| a.marker_id.cmp(&b.marker_id));
    let keys: Vec<&str> = markers.iter().map(|m| m.key.as_str()).collect();
    let vectors = embedder.embed_batch(&keys)?;
    let mut index = HnswIndex::new(embedder.dim(), cfg.index.clone())?;
    for (m, v) in markers.iter().zip(&vectors) {
        index.insert(v, &m.marker_id)?;
    }
    Ok(index)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexMeta {
    pub config_hash: String,
    pub count: usize,
    pub dim: usize,
}

/// Sidecar recording which config produced an index file.
pub fn index_meta_path(index_file: &Path) -> PathBuf {
    let mut name = index_file.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

pub fn run_index(cfg: &RunConfig) -> Result<IndexMeta, PipelineError> {
    let store = load_store(cfg)?;
    let embedder = build_embedder(&cfg.embedder)?;
    let index = build_marker_index(store.markers(), embedder.as_ref(), cfg)?;
    if let Some(parent) = cfg.paths.index_file.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    index.save(&cfg.paths.index_file)?;
    let meta = IndexMeta {
        config_hash: store.config_hash.clone(),
        count: index.len(),
        dim: index.dim(),
    };
    let meta_path = index_meta_path(&cfg.paths.index_file);
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)? + "\n").map_err(io_err(&meta_path))?;
    Ok(meta)
}

/// Store, key index and embedder, all checked against the current config.
pub struct QueryContext {
    pub config_hash: String,
    pub store: MarkerStore,
    pub index: HnswIndex,
    pub embedder: Box<dyn Embedder>,
}

impl QueryContext {
    pub fn open(cfg: &RunConfig) -> Result<Self, PipelineError> {
        let store = load_store(cfg)?;
        let meta_path = index_meta_path(&cfg.paths.index_file);
        let meta: IndexMeta = serde_json::from_str(&std::fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?)?;
        check_hash(&cfg.paths.index_file, &meta.config_hash, &store.config_hash)?;
        let index = HnswIndex::load(&cfg.paths.index_file)?;
        let embedder = build_embedder(&cfg.embedder)?;
        if index.dim() != embedder.dim() {
            return Err(PipelineError::DimensionMismatch {
                index: index.dim(),
                embedder: embedder.dim(),
            });
        }
        Ok(Self {
            config_hash: store.config_hash.clone(),
            store,
            index,
            embedder,
        })
    }

    pub fn retrieve(&self, query: &str, cfg: &RunConfig) -> Result<Retrieved<MetaMarker>, PipelineError> {
        Ok(retrieve(
            query,
            self.embedder.as_ref(),
            &self.index,
            &self.store,
            &cfg.budget,
            cfg.ordering,
            cfg.index.ef_search,
        )?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedMarker {
    pub marker_id: String,
    pub paragraph_indices: Vec<usize>,
    pub similarity: f64,
    pub v_tokens: usize,
    pub is_fallback: bool,
}

/// Stable rendering of a retrieval: no timings, so replay output is byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutput {
    pub config_hash: String,
    pub query: String,
    pub budget_tokens: usize,
    pub ordering: ContextOrdering,
    pub total_tokens: usize,
    pub selected: Vec<SelectedMarker>,
}

impl QueryOutput {
    fn from_retrieval(config_hash: &str, policy: &BudgetPolicy, r: &Retrieved<MetaMarker>) -> Self {
        Self {
            config_hash: config_hash.to_string(),
            query: r.query.clone(),
            budget_tokens: policy.budget_tokens,
            ordering: r.ordering,
            total_tokens: r.total_tokens,
            selected: r
                .selected
                .iter()
                .map(|(m, s)| SelectedMarker {
                    marker_id: m.marker_id.clone(),
                    paragraph_indices: m.paragraph_indices.clone(),
                    similarity: *s,
                    v_tokens: m.v_tokens,
                    is_fallback: m.is_fallback,
                })
                .collect(),
        }
    }
}

pub fn run_query(cfg: &RunConfig, query: &str) -> Result<QueryOutput, PipelineError> {
    let ctx = QueryContext::open(cfg)?;
    let r = ctx.retrieve(query, cfg)?;
    log::info!("embed {:.3} ms, search {:.3} ms", r.embed_latency_ms, r.search_latency_ms);
    Ok(QueryOutput::from_retrieval(&ctx.config_hash, &cfg.budget, &r))
}

fn answer_template(cfg: &RunConfig) -> Result<AnswerTemplate, PipelineError> {
    match &cfg.answer.template_path {
        Some(p) => AnswerTemplate::load(p).map_err(io_err(p)),
        None => Ok(AnswerTemplate::default()),
    }
}

fn generate(
    cfg: &RunConfig,
    template: &AnswerTemplate,
    backend: &dyn ChatBackend,
    query: &str,
    context_blocks: Vec<String>,
) -> Result<Answer, PipelineError> {
    let req = AnswerRequest {
        query: query.to_string(),
        context_blocks,
        model: cfg.answer.model.clone(),
    };
    let mut chat = build_answer_prompt(&req, template);
    chat.max_output_tokens = cfg.answer.max_output_tokens;
    Ok(extract_answer(&backend.complete(&chat)?.text))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerOutput {
    pub config_hash: String,
    pub query: String,
    pub answer: String,
    pub insufficient: bool,
    pub raw: String,
    pub provenance: Vec<SelectedMarker>,
}

pub fn run_answer(cfg: &RunConfig, query: &str, backend: &dyn ChatBackend) -> Result<AnswerOutput, PipelineError> {
    let ctx = QueryContext::open(cfg)?;
    let r = ctx.retrieve(query, cfg)?;
    let answer = generate(cfg, &answer_template(cfg)?, backend, query, r.context_blocks())?;
    let q = QueryOutput::from_retrieval(&ctx.config_hash, &cfg.budget, &r);
    Ok(AnswerOutput {
        config_hash: q.config_hash,
        query: q.query,
        answer: answer.text,
        insufficient: answer.insufficient,
        raw: answer.raw,
        provenance: q.selected,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct StatsOutput {
    pub config_hash: String,
    pub documents: usize,
    pub markers: usize,
    pub coverage: CoverageStats,
    pub lengths: LengthStats,
}

pub fn run_stats(cfg: &RunConfig) -> Result<StatsOutput, PipelineError> {
    let store = load_store(cfg)?;
    let log = read_extraction_log(&cfg.paths.extraction_log)?;
    for e in &log {
        check_hash(&cfg.paths.extraction_log, &e.config_hash, &store.config_hash)?;
    }
    let sets = marker_sets(&store, &log)?;
    Ok(StatsOutput {
        config_hash: store.config_hash.clone(),
        documents: sets.len(),
        markers: store.len(),
        coverage: coverage_stats(&sets)?,
        lengths: length_stats(store.markers())?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    MragPosition,
    MragSimilarity,
    Fixed,
    Dos,
}

impl std::str::FromStr for Strategy {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "mrag-position" => Self::MragPosition,
            "mrag-similarity" => Self::MragSimilarity,
            "fixed" => Self::Fixed,
            "dos" => Self::Dos,
            other => return Err(PipelineError::UnknownStrategy(other.to_string())),
        })
    }
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Self::MragPosition => "mrag-position",
            Self::MragSimilarity => "mrag-similarity",
            Self::Fixed => "fixed",
            Self::Dos => "dos",
        }
    }

    fn ordering(self) -> &'static str {
        match self {
            Self::MragPosition => "position",
            Self::MragSimilarity | Self::Fixed => "similarity",
            // chunk retrieval followed by document-order context, an approximation of DOS RAG
            Self::Dos => "document-order",
        }
    }
}

/// Per-record retrieval structures: each record is answered from its own context.
struct RecordIndexes {
    markers: HashMap<String, MetaMarker>,
    marker_index: HnswIndex,
    chunks: ChunkIndex,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchFile {
    pub config_hash: String,
    pub budget_tokens: usize,
    pub reports: Vec<RunReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LatencyFile {
    pub config_hash: String,
    pub key_units: usize,
    pub chunk_units: usize,
    pub summaries: Vec<LatencySummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchOutcome {
    pub config_hash: String,
    pub report_files: Vec<PathBuf>,
    pub latency_file: PathBuf,
    pub mean_f1: Vec<(String, usize, f64)>,
}

fn selection_row<T: ContextUnit>(record: &QaRecord, r: &Retrieved<T>, answer: &Answer) -> Result<RecordRow, PipelineError> {
    Ok(RecordRow {
        record_id: record.record_id.clone(),
        prediction: answer.text.clone(),
        best_f1: best_f1_over_golds(&answer.text, &record.gold_answers)?.f1,
        selected_ids: r.unit_ids(),
        total_context_tokens: r.total_tokens,
        embed_ms: r.embed_latency_ms,
        search_ms: r.search_latency_ms,
    })
}

pub fn run_bench(cfg: &RunConfig, backend: &dyn ChatBackend) -> Result<BenchOutcome, PipelineError> {
    let strategies = cfg
        .bench
        .strategies
        .iter()
        .map(|s| s.parse())
        .collect::<Result<Vec<Strategy>, _>>()?;
    let qa_path = cfg.bench.qa_file.clone().unwrap_or_else(|| cfg.paths.corpus.clone());
    if !is_jsonl(&qa_path) {
        return Err(PipelineError::Io {
            path: qa_path.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidInput, "bench needs a LongBench JSONL file"),
        });
    }
    let records = load_longbench_jsonl(&qa_path)?;
    if records.is_empty() {
        return Err(PipelineError::EmptyCorpus(qa_path.display().to_string()));
    }
    let store = load_store(cfg)?;
    let log = read_extraction_log(&cfg.paths.extraction_log)?;
    let sets = marker_sets(&store, &log)?;
    let hash = store.config_hash.clone();
    let tok = tokenizer(cfg)?;
    let embedder = build_embedder(&cfg.embedder)?;
    let template = answer_template(cfg)?;

    let mut per_record = Vec::with_capacity(records.len());
    let mut all_chunks: Vec<Chunk> = Vec::new();
    for rec in &records {
        let doc_markers: Vec<&MetaMarker> = store.markers().iter().filter(|m| m.doc_id == rec.record_id).collect();
        if doc_markers.is_empty() {
            return Err(PipelineError::NoMarkersForRecord(rec.record_id.clone()));
        }
        let marker_index = build_marker_index(doc_markers.iter().copied(), embedder.as_ref(), cfg)?;
        let chunks = fixed_size_chunk(&rec.document("bench"), cfg.bench.chunk_size, tok.as_ref())?;
        all_chunks.extend(chunks.iter().cloned());
        per_record.push(RecordIndexes {
            markers: doc_markers.into_iter().map(|m| (m.marker_id.clone(), m.clone())).collect(),
            marker_index,
            chunks: ChunkIndex::build(chunks, embedder.as_ref(), cfg.index.clone())?,
        });
    }
    let record_sets: Vec<MarkerSet> = sets
        .into_iter()
        .filter(|s| records.iter().any(|r| r.record_id == s.doc_id))
        .collect();

    std::fs::create_dir_all(&cfg.paths.report_dir).map_err(io_err(&cfg.paths.report_dir))?;
    let mut report_files = Vec::new();
    let mut mean_f1 = Vec::new();
    let ef = cfg.index.ef_search;
    for &budget in &cfg.bench.budgets {
        let policy = BudgetPolicy {
            budget_tokens: budget,
            ..cfg.budget.clone()
        };
        let mut reports = Vec::new();
        for &strategy in &strategies {
            let mut rows = Vec::with_capacity(records.len());
            for (rec, ix) in records.iter().zip(&per_record) {
                let row = match strategy {
                    Strategy::MragPosition | Strategy::MragSimilarity => {
                        let ordering = if strategy == Strategy::MragPosition {
                            ContextOrdering::Position
                        } else {
                            ContextOrdering::Similarity
                        };
                        let r = retrieve(&rec.query, embedder.as_ref(), &ix.marker_index, &ix.markers, &policy, ordering, ef)?;
                        let answer = generate(cfg, &template, backend, &rec.query, r.context_blocks())?;
                        selection_row(rec, &r, &answer)?
                    }
                    Strategy::Fixed | Strategy::Dos => {
                        let r = chunk_retrieve(&rec.query, embedder.as_ref(), &ix.chunks, &policy, strategy == Strategy::Dos, ef)?;
                        let answer = generate(cfg, &template, backend, &rec.query, r.context_blocks())?;
                        selection_row(rec, &r, &answer)?
                    }
                };
                rows.push(row);
            }
            let sets = matches!(strategy, Strategy::MragPosition | Strategy::MragSimilarity).then_some(record_sets.as_slice());
            let report = RunReport::build(
                format!("{}-b{budget}", strategy.name()),
                &hash,
                strategy.name(),
                budget,
                strategy.ordering(),
                rows,
                sets,
            )?;
            mean_f1.push((strategy.name().to_string(), budget, report.aggregates.mean_f1));
            let csv_path = cfg.paths.report_dir.join(format!("bench-b{budget}-{}.csv", strategy.name()));
            report.write_csv(&csv_path)?;
            reports.push(report);
        }
        for r in &reports {
            r.check_consistency()?;
        }
        let file = BenchFile {
            config_hash: hash.clone(),
            budget_tokens: budget,
            reports,
        };
        let path = cfg.paths.report_dir.join(format!("bench-b{budget}.json"));
        std::fs::write(&path, serde_json::to_string_pretty(&file)? + "\n").map_err(io_err(&path))?;
        report_files.push(path);
    }

    let queries: Vec<String> = records.iter().map(|r| r.query.clone()).collect();
    let latency = bench_latency(cfg, &hash, store.markers(), &all_chunks, embedder.as_ref(), &queries)?;
    let latency_file = cfg.paths.report_dir.join("latency.json");
    std::fs::write(&latency_file, serde_json::to_string_pretty(&latency)? + "\n").map_err(io_err(&latency_file))?;

    Ok(BenchOutcome {
        config_hash: hash,
        report_files,
        latency_file,
        mean_f1,
    })
}

/// Query-side matching cost of key-based versus chunk-based retrieval over
/// the whole corpus, with both the graph index and the token-proportional
/// on-the-fly matcher.
pub fn bench_latency(
    cfg: &RunConfig,
    config_hash: &str,
    markers: &[MetaMarker],
    chunks: &[Chunk],
    embedder: &dyn Embedder,
    queries: &[String],
) -> Result<LatencyFile, PipelineError> {
    let start = Instant::now();
    let key_index = build_marker_index(markers, embedder, cfg)?;
    let key_ms = start.elapsed().as_secs_f64() * 1e3;
    let start = Instant::now();
    let chunk_index = ChunkIndex::build(chunks.to_vec(), embedder, cfg.index.clone())?;
    let chunk_ms = start.elapsed().as_secs_f64() * 1e3;
    let ef = cfg.index.ef_search;
    let top_k = cfg.budget.candidate_pool;
    let strategy = |name: &str, backend, offline_ms| BenchStrategy {
        name: name.to_string(),
        config_hash: config_hash.to_string(),
        embedder,
        backend,
        top_k,
        offline_ms,
    };
    let strategies = [
        strategy("keys", MatchBackend::Hnsw { index: &key_index, ef }, Some(key_ms)),
        strategy("chunks", MatchBackend::Hnsw { index: &chunk_index.index, ef }, Some(chunk_ms)),
        strategy(
            "keys",
            MatchBackend::OnTheFly {
                texts: markers.iter().map(|m| m.key.clone()).collect(),
            },
            None,
        ),
        strategy(
            "chunks",
            MatchBackend::OnTheFly {
                texts: chunks.iter().map(|c| c.text.clone()).collect(),
            },
            None,
        ),
    ];
    Ok(LatencyFile {
        config_hash: config_hash.to_string(),
        key_units: markers.len(),
        chunk_units: chunks.len(),
        summaries: latency_bench(&strategies, queries, cfg.bench.latency_repetitions.max(1))?,
    })
}
