//! Query-time path: embed the query, search the key index, select values
//! under a token budget, then order the selected context.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ann_index::{HnswIndex, IndexError};
use crate::embedding::{Embedder, EmbeddingError};
use crate::extraction::MetaMarker;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("no hits to select from")]
    EmptyHits,
    #[error("index returned unknown unit id {0}")]
    UnknownUnit(String),
    #[error("invalid budget policy: {0}")]
    InvalidPolicy(String),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BudgetMode {
    /// Keep adding until the running total reaches the budget; the last unit may cross it.
    Overflow,
    /// Add only while the running total stays within the budget; the first unit is always taken.
    Strict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BudgetPolicy {
    pub budget_tokens: usize,
    pub mode: BudgetMode,
    pub candidate_pool: usize,
}

impl Default for BudgetPolicy {
    fn default() -> Self {
        Self {
            budget_tokens: 128,
            mode: BudgetMode::Overflow,
            candidate_pool: 50,
        }
    }
}

impl BudgetPolicy {
    pub fn new(budget_tokens: usize, mode: BudgetMode) -> Self {
        Self {
            budget_tokens,
            mode,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), RetrievalError> {
        if self.budget_tokens < 1 || self.candidate_pool < 1 {
            return Err(RetrievalError::InvalidPolicy(
                "budget_tokens and candidate_pool must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextOrdering {
    Position,
    Similarity,
}

impl std::str::FromStr for ContextOrdering {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "position" => Ok(Self::Position),
            "similarity" => Ok(Self::Similarity),
            other => Err(format!("unknown ordering `{other}` (expected position|similarity)")),
        }
    }
}

/// Anything that can be retrieved and injected as generation context.
pub trait ContextUnit: Clone {
    fn unit_id(&self) -> &str;
    /// Tokens this unit contributes to the generation context.
    fn context_tokens(&self) -> usize;
    /// Source position used by position ordering.
    fn position(&self) -> usize;
    fn context_text(&self) -> &str;
}

impl ContextUnit for MetaMarker {
    fn unit_id(&self) -> &str {
        &self.marker_id
    }

    fn context_tokens(&self) -> usize {
        self.v_tokens
    }

    fn position(&self) -> usize {
        self.min_paragraph()
    }

    fn context_text(&self) -> &str {
        &self.value
    }
}

/// Length of the ranked prefix selected under `policy` for the given costs.
pub fn budget_prefix_len(costs: impl IntoIterator<Item = usize>, policy: &BudgetPolicy) -> usize {
    let mut total = 0usize;
    let mut taken = 0usize;
    for cost in costs {
        match policy.mode {
            BudgetMode::Overflow => {
                total += cost;
                taken += 1;
                if total >= policy.budget_tokens {
                    break;
                }
            }
            BudgetMode::Strict => {
                if taken > 0 && total + cost > policy.budget_tokens {
                    break;
                }
                total += cost;
                taken += 1;
            }
        }
    }
    taken
}

/// Walk `hits` in rank order and keep the prefix allowed by the budget.
/// Overlapping paragraphs are not deduplicated.
pub fn select_under_budget<T: ContextUnit>(hits: &[(T, f64)], policy: &BudgetPolicy) -> Result<Vec<(T, f64)>, RetrievalError> {
    if hits.is_empty() {
        return Err(RetrievalError::EmptyHits);
    }
    let n = budget_prefix_len(hits.iter().map(|(u, _)| u.context_tokens()), policy);
    Ok(hits[..n].to_vec())
}

/// Reorder the selected units. Position: ascending source position, then
/// unit id. Similarity: descending similarity, then unit id.
pub fn order_context<T: ContextUnit>(mut selected: Vec<(T, f64)>, ordering: ContextOrdering) -> Vec<(T, f64)> {
    match ordering {
        ContextOrdering::Position => selected.sort_by(|(a, _), (b, _)| {
            a.position()
                .cmp(&b.position())
                .then_with(|| a.unit_id().cmp(b.unit_id()))
        }),
        ContextOrdering::Similarity => selected.sort_by(|(a, sa), (b, sb)| {
            sb.partial_cmp(sa)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.unit_id().cmp(b.unit_id()))
        }),
    }
    selected
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieved<T> {
    pub query: String,
    pub selected: Vec<(T, f64)>,
    pub total_tokens: usize,
    pub ordering: ContextOrdering,
    pub embed_latency_ms: f64,
    pub search_latency_ms: f64,
}

impl<T: ContextUnit> Retrieved<T> {
    pub fn context_blocks(&self) -> Vec<String> {
        self.selected.iter().map(|(u, _)| u.context_text().to_string()).collect()
    }

    pub fn unit_ids(&self) -> Vec<String> {
        self.selected.iter().map(|(u, _)| u.unit_id().to_string()).collect()
    }
}

pub type RetrievalResult = Retrieved<MetaMarker>;

/// Resolves index payload ids back to retrievable units.
pub trait UnitLookup<T> {
    fn lookup(&self, id: &str) -> Option<&T>;
}

impl<T> UnitLookup<T> for HashMap<String, T> {
    fn lookup(&self, id: &str) -> Option<&T> {
        self.get(id)
    }
}

/// Embed, search `candidate_pool` hits, select under budget, order.
pub fn retrieve_units<T: ContextUnit>(
    query: &str,
    embedder: &dyn Embedder,
    index: &HnswIndex,
    units: &dyn UnitLookup<T>,
    policy: &BudgetPolicy,
    ordering: ContextOrdering,
    ef: usize,
) -> Result<Retrieved<T>, RetrievalError> {
    policy.validate()?;
    let start = Instant::now();
    let q = embedder.embed(query)?;
    let embed_latency_ms = start.elapsed().as_secs_f64() * 1e3;

    let start = Instant::now();
    let hits = index.search(&q, policy.candidate_pool, ef.max(policy.candidate_pool))?;
    let search_latency_ms = start.elapsed().as_secs_f64() * 1e3;

    let ranked = hits
        .into_iter()
        .map(|h| {
            units
                .lookup(&h.marker_id)
                .cloned()
                .map(|u| (u, h.similarity))
                .ok_or(RetrievalError::UnknownUnit(h.marker_id))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let selected = order_context(select_under_budget(&ranked, policy)?, ordering);
    let total_tokens = selected.iter().map(|(u, _)| u.context_tokens()).sum();
    Ok(Retrieved {
        query: query.to_string(),
        selected,
        total_tokens,
        ordering,
        embed_latency_ms,
        search_latency_ms,
    })
}

pub fn retrieve(
    query: &str,
    embedder: &dyn Embedder,
    index: &HnswIndex,
    store: &dyn UnitLookup<MetaMarker>,
    policy: &BudgetPolicy,
    ordering: ContextOrdering,
    ef: usize,
) -> Result<RetrievalResult, RetrievalError> {
    retrieve_units(query, embedder, index, store, policy, ordering, ef)
}
