//! Answer scoring, coverage and length statistics, the query-side latency
//! bench, and machine-readable run reports.
//!
//! Quartiles use the median-exclusive convention: the median splits the
//! sorted sample, the middle element is dropped from both halves when the
//! count is odd, and Q1/Q3 are the medians of the lower/upper halves.
//! Percentiles in latency summaries use nearest rank.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ann_index::{HnswIndex, IndexError};
use crate::embedding::{dot, Embedder, EmbeddingError};
use crate::extraction::{MarkerSet, MetaMarker};

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error("gold answer list is empty")]
    EmptyGolds,
    #[error("{0} is empty")]
    EmptyInput(&'static str),
    #[error("strategy {strategy} has config hash {found}, expected {expected}")]
    ConfigMismatch {
        strategy: String,
        expected: String,
        found: String,
    },
    #[error("report is not self-consistent: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Lowercase, drop ASCII punctuation, drop articles, collapse whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lowered = s.to_lowercase();
    let no_punct: String = lowered.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    no_punct
        .split_whitespace()
        .filter(|t| !ARTICLES.contains(t))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl F1Score {
    pub const ZERO: F1Score = F1Score {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };
}

/// Bag-of-tokens overlap after normalization. Empty on either side scores 0.
pub fn qa_f1(prediction: &str, gold: &str) -> F1Score {
    let pred = normalize_answer(prediction);
    let gold = normalize_answer(gold);
    let p: Vec<&str> = pred.split_whitespace().collect();
    let g: Vec<&str> = gold.split_whitespace().collect();
    if p.is_empty() || g.is_empty() {
        return F1Score::ZERO;
    }
    let mut bag: HashMap<&str, usize> = HashMap::new();
    for t in &g {
        *bag.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &p {
        if let Some(n) = bag.get_mut(t) {
            if *n > 0 {
                *n -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return F1Score::ZERO;
    }
    F1Score {
        precision: common as f64 / p.len() as f64,
        recall: common as f64 / g.len() as f64,
        // same value as the harmonic mean, without the intermediate rounding
        f1: (2 * common) as f64 / (p.len() + g.len()) as f64,
    }
}

/// Highest-F1 reference; ties keep the earliest.
pub fn best_f1_over_golds(prediction: &str, golds: &[String]) -> Result<F1Score, EvaluationError> {
    let mut best: Option<F1Score> = None;
    for gold in golds {
        let s = qa_f1(prediction, gold);
        if best.is_none_or(|b| s.f1 > b.f1) {
            best = Some(s);
        }
    }
    best.ok_or(EvaluationError::EmptyGolds)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn population_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

/// Pre-fallback coverage in percent. Variance is population variance in percent².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageStats {
    pub documents: usize,
    pub mean: f64,
    pub variance: f64,
    pub fallback_pct: f64,
}

pub fn coverage_stats(sets: &[MarkerSet]) -> Result<CoverageStats, EvaluationError> {
    if sets.is_empty() {
        return Err(EvaluationError::EmptyInput("marker set list"));
    }
    let pct: Vec<f64> = sets.iter().map(|s| s.pre_fallback_coverage * 100.0).collect();
    let total: usize = sets.iter().map(|s| s.markers.len()).sum();
    let fallback: usize = sets.iter().map(|s| s.markers.iter().filter(|m| m.is_fallback).count()).sum();
    Ok(CoverageStats {
        documents: sets.len(),
        mean: mean(&pct),
        variance: population_variance(&pct),
        fallback_pct: if total == 0 { 0.0 } else { fallback as f64 * 100.0 / total as f64 },
    })
}

fn median_sorted(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Box-plot summary. Whiskers reach the most extreme samples within
/// 1.5 IQR of the box; anything beyond is listed as an outlier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub count: usize,
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
}

impl Distribution {
    pub fn from_samples(samples: &[f64]) -> Result<Self, EvaluationError> {
        if samples.is_empty() {
            return Err(EvaluationError::EmptyInput("sample"));
        }
        let mut xs = samples.to_vec();
        xs.sort_by(f64::total_cmp);
        let n = xs.len();
        let (lower, upper) = if n == 1 { (&xs[..], &xs[..]) } else { (&xs[..n / 2], &xs[n.div_ceil(2)..]) };
        let q1 = median_sorted(lower);
        let q3 = median_sorted(upper);
        let iqr = q3 - q1;
        let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
        let inside: Vec<f64> = xs.iter().copied().filter(|x| (lo_fence..=hi_fence).contains(x)).collect();
        Ok(Self {
            count: n,
            mean: mean(&xs),
            sd: population_variance(&xs).sqrt(),
            min: xs[0],
            q1,
            median: median_sorted(&xs),
            q3,
            max: xs[n - 1],
            whisker_low: inside.first().copied().unwrap_or(q1),
            whisker_high: inside.last().copied().unwrap_or(q3),
            outliers: xs.iter().copied().filter(|x| !(lo_fence..=hi_fence).contains(x)).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub k: Distribution,
    pub v: Distribution,
}

pub fn length_stats(markers: &[MetaMarker]) -> Result<LengthStats, EvaluationError> {
    if markers.is_empty() {
        return Err(EvaluationError::EmptyInput("marker list"));
    }
    let k: Vec<f64> = markers.iter().map(|m| m.k_tokens as f64).collect();
    let v: Vec<f64> = markers.iter().map(|m| m.v_tokens as f64).collect();
    Ok(LengthStats {
        k: Distribution::from_samples(&k)?,
        v: Distribution::from_samples(&v)?,
    })
}

/// Nearest-rank percentile of an unsorted sample; `p` in (0, 100].
pub fn percentile(samples: &[f64], p: f64) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * xs.len() as f64).ceil() as usize;
    xs[rank.clamp(1, xs.len()) - 1]
}

pub fn median(samples: &[f64]) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    median_sorted(&xs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub median_ms: f64,
    pub p95_ms: f64,
}

impl Percentiles {
    pub fn of(samples: &[f64]) -> Self {
        Self {
            median_ms: median(samples),
            p95_ms: percentile(samples, 95.0),
        }
    }
}

/// How a strategy matches a query vector against its retrieval units.
pub enum MatchBackend<'a> {
    /// Precomputed unit embeddings searched through the graph index.
    Hnsw { index: &'a HnswIndex, ef: usize },
    /// Units are embedded at match time, so the cost grows with the token
    /// length of the retrieval representation.
    OnTheFly { texts: Vec<String> },
}

impl MatchBackend<'_> {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Hnsw { .. } => "hnsw",
            Self::OnTheFly { .. } => "on-the-fly",
        }
    }
}

pub struct BenchStrategy<'a> {
    pub name: String,
    pub config_hash: String,
    pub embedder: &'a dyn Embedder,
    pub backend: MatchBackend<'a>,
    pub top_k: usize,
    /// Offline preparation cost (extraction, indexing), reported beside but never mixed in.
    pub offline_ms: Option<f64>,
}

impl BenchStrategy<'_> {
    fn match_query(&self, query: &str) -> Result<(f64, f64, usize), EvaluationError> {
        let start = Instant::now();
        let q = self.embedder.embed(query)?;
        let embed_ms = start.elapsed().as_secs_f64() * 1e3;

        let start = Instant::now();
        let hits = match &self.backend {
            MatchBackend::Hnsw { index, ef } => index.search(&q, self.top_k, *ef)?.len(),
            MatchBackend::OnTheFly { texts } => {
                let mut sims = Vec::with_capacity(texts.len());
                for t in texts {
                    sims.push(dot(q.values(), self.embedder.embed(t)?.values()));
                }
                sims.sort_by(|a, b| b.total_cmp(a));
                sims.truncate(self.top_k);
                sims.len()
            }
        };
        Ok((embed_ms, start.elapsed().as_secs_f64() * 1e3, hits))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub strategy: String,
    pub backend: String,
    pub config_hash: String,
    pub repetitions: usize,
    pub queries: usize,
    pub embed: Percentiles,
    pub search: Percentiles,
    pub total: Percentiles,
    pub offline_ms: Option<f64>,
}

/// Times query embedding plus matching for each strategy, one strategy at a
/// time. Each repetition contributes the mean per-query latency over all
/// queries; medians and p95 are taken over repetitions.
pub fn latency_bench(
    strategies: &[BenchStrategy<'_>],
    queries: &[String],
    repetitions: usize,
) -> Result<Vec<LatencySummary>, EvaluationError> {
    let first = strategies.first().ok_or(EvaluationError::EmptyInput("strategy list"))?;
    if queries.is_empty() {
        return Err(EvaluationError::EmptyInput("query list"));
    }
    if repetitions == 0 {
        return Err(EvaluationError::EmptyInput("repetition count"));
    }
    for s in strategies {
        if s.config_hash != first.config_hash {
            return Err(EvaluationError::ConfigMismatch {
                strategy: s.name.clone(),
                expected: first.config_hash.clone(),
                found: s.config_hash.clone(),
            });
        }
    }
    let n = queries.len() as f64;
    let mut out = Vec::with_capacity(strategies.len());
    for s in strategies {
        // warm-up pass, untimed
        s.match_query(&queries[0])?;
        let (mut embed, mut search, mut total) = (vec![], vec![], vec![]);
        for _ in 0..repetitions {
            let (mut e, mut m) = (0.0, 0.0);
            for q in queries {
                let (de, dm, _) = s.match_query(q)?;
                e += de;
                m += dm;
            }
            embed.push(e / n);
            search.push(m / n);
            total.push((e + m) / n);
        }
        out.push(LatencySummary {
            strategy: s.name.clone(),
            backend: s.backend.label().to_string(),
            config_hash: s.config_hash.clone(),
            repetitions,
            queries: queries.len(),
            embed: Percentiles::of(&embed),
            search: Percentiles::of(&search),
            total: Percentiles::of(&total),
            offline_ms: s.offline_ms,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordRow {
    pub record_id: String,
    pub prediction: String,
    pub best_f1: f64,
    pub selected_ids: Vec<String>,
    pub total_context_tokens: usize,
    pub embed_ms: f64,
    pub search_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub mean_f1: f64,
    pub mean_context_tokens: f64,
    pub latency: Percentiles,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<CoverageStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_k_tokens: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_v_tokens: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub config_hash: String,
    pub strategy: String,
    pub budget_tokens: usize,
    pub ordering: String,
    pub per_record: Vec<RecordRow>,
    pub aggregates: Aggregates,
}

fn row_aggregates(rows: &[RecordRow]) -> (f64, f64, Percentiles) {
    let f1: Vec<f64> = rows.iter().map(|r| r.best_f1).collect();
    let tokens: Vec<f64> = rows.iter().map(|r| r.total_context_tokens as f64).collect();
    let lat: Vec<f64> = rows.iter().map(|r| r.embed_ms + r.search_ms).collect();
    (mean(&f1), mean(&tokens), Percentiles::of(&lat))
}

impl RunReport {
    /// Aggregates are derived from the rows and, for marker strategies, the
    /// marker sets the rows were answered from.
    pub fn build(
        run_id: impl Into<String>,
        config_hash: impl Into<String>,
        strategy: impl Into<String>,
        budget_tokens: usize,
        ordering: impl Into<String>,
        per_record: Vec<RecordRow>,
        marker_sets: Option<&[MarkerSet]>,
    ) -> Result<Self, EvaluationError> {
        if per_record.is_empty() {
            return Err(EvaluationError::EmptyInput("per-record rows"));
        }
        let (mean_f1, mean_context_tokens, latency) = row_aggregates(&per_record);
        let (coverage, mean_k_tokens, mean_v_tokens) = match marker_sets {
            Some(sets) => {
                let markers: Vec<&MetaMarker> = sets.iter().flat_map(|s| &s.markers).collect();
                let k: Vec<f64> = markers.iter().map(|m| m.k_tokens as f64).collect();
                let v: Vec<f64> = markers.iter().map(|m| m.v_tokens as f64).collect();
                if markers.is_empty() {
                    return Err(EvaluationError::EmptyInput("marker list"));
                }
                (Some(coverage_stats(sets)?), Some(mean(&k)), Some(mean(&v)))
            }
            None => (None, None, None),
        };
        Ok(Self {
            run_id: run_id.into(),
            config_hash: config_hash.into(),
            strategy: strategy.into(),
            budget_tokens,
            ordering: ordering.into(),
            per_record,
            aggregates: Aggregates {
                mean_f1,
                mean_context_tokens,
                latency,
                coverage,
                mean_k_tokens,
                mean_v_tokens,
            },
        })
    }

    /// Recompute the row-derived aggregates and compare.
    pub fn check_consistency(&self) -> Result<(), EvaluationError> {
        if self.per_record.is_empty() {
            return Err(EvaluationError::Inconsistent("no per-record rows".into()));
        }
        let (mean_f1, mean_tokens, latency) = row_aggregates(&self.per_record);
        let a = &self.aggregates;
        if mean_f1 != a.mean_f1 || mean_tokens != a.mean_context_tokens || latency != a.latency {
            return Err(EvaluationError::Inconsistent(format!(
                "row aggregates ({mean_f1}, {mean_tokens}, {latency:?}) differ from recorded ({}, {}, {:?})",
                a.mean_f1, a.mean_context_tokens, a.latency
            )));
        }
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<(), EvaluationError> {
        self.check_consistency()?;
        let mut f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    /// Flat per-record rows; selected ids are `;`-joined.
    pub fn write_csv(&self, path: &Path) -> Result<(), EvaluationError> {
        self.check_consistency()?;
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "config_hash",
            "strategy",
            "budget_tokens",
            "record_id",
            "prediction",
            "best_f1",
            "selected_ids",
            "total_context_tokens",
            "embed_ms",
            "search_ms",
        ])?;
        for r in &self.per_record {
            w.write_record([
                self.config_hash.as_str(),
                &self.strategy,
                &self.budget_tokens.to_string(),
                &r.record_id,
                &r.prediction,
                &r.best_f1.to_string(),
                &r.selected_ids.join(";"),
                &r.total_context_tokens.to_string(),
                &r.embed_ms.to_string(),
                &r.search_ms.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
