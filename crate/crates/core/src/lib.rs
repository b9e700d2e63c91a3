//! Chunk-free retrieval-augmented generation over key/value meta-markers.
//!
//! Documents are split into position-tagged segments, an LLM turns them into
//! markers (a short question-form retrieval key plus a context-rich value),
//! keys are embedded into an HNSW index, and queries select values under a
//! token budget for answer generation.

pub mod ann_index;
pub mod corpus;
pub mod embedding;
pub mod extraction;
pub mod llm_gateway;
pub mod baselines;
pub mod generation;
pub mod retrieval;
pub mod config;
pub mod evaluation;
pub mod mock_llm;
pub mod store;
pub mod pipeline;
