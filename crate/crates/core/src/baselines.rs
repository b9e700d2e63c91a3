//! Chunk-based comparison systems sharing the embedder, index and budget
//! machinery: fixed-size chunk retrieval and a DOS-style variant that restores
//! document order in the assembled context.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::ann_index::{HnswIndex, HnswParams};
use crate::corpus::{segment_document, CorpusError, Document, Tokenizer};
use crate::embedding::Embedder;
use crate::retrieval::{retrieve_units, BudgetPolicy, ContextOrdering, ContextUnit, RetrievalError, Retrieved};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub doc_id: String,
    pub text: String,
    pub start_token: usize,
    pub token_count: usize,
    pub position: usize,
}

impl ContextUnit for Chunk {
    fn unit_id(&self) -> &str {
        &self.chunk_id
    }

    fn context_tokens(&self) -> usize {
        self.token_count
    }

    fn position(&self) -> usize {
        self.position
    }

    fn context_text(&self) -> &str {
        &self.text
    }
}

/// Same partition rule as paragraph segmentation; each chunk is both the
/// retrieval representation and the generation content.
pub fn fixed_size_chunk(doc: &Document, chunk_size: usize, tokenizer: &dyn Tokenizer) -> Result<Vec<Chunk>, CorpusError> {
    let segments = segment_document(doc, chunk_size, tokenizer)?;
    let mut start_token = 0;
    Ok(segments
        .into_iter()
        .map(|s| {
            let chunk = Chunk {
                chunk_id: format!("{}@{:04}", doc.doc_id, s.paragraph_index),
                doc_id: doc.doc_id.clone(),
                text: s.text,
                start_token,
                token_count: s.token_count,
                position: s.paragraph_index,
            };
            start_token += chunk.token_count;
            chunk
        })
        .collect())
}

/// Chunks plus an HNSW index over their full-text embeddings.
pub struct ChunkIndex {
    pub chunks: HashMap<String, Chunk>,
    pub index: HnswIndex,
}

impl ChunkIndex {
    pub fn build(chunks: Vec<Chunk>, embedder: &dyn Embedder, params: HnswParams) -> Result<Self, RetrievalError> {
        let texts: Vec<&str> = chunks.iter().map(|c| c.text.as_str()).collect();
        let vectors = embedder.embed_batch(&texts)?;
        let mut index = HnswIndex::new(embedder.dim(), params)?;
        for (c, v) in chunks.iter().zip(&vectors) {
            index.insert(v, &c.chunk_id)?;
        }
        let chunks = chunks.into_iter().map(|c| (c.chunk_id.clone(), c)).collect();
        Ok(Self { chunks, index })
    }
}

/// Chunk retrieval under the shared budget policy. `dos_order` restores
/// document order; otherwise the context keeps similarity order.
pub fn chunk_retrieve(
    query: &str,
    embedder: &dyn Embedder,
    chunks: &ChunkIndex,
    policy: &BudgetPolicy,
    dos_order: bool,
    ef: usize,
) -> Result<Retrieved<Chunk>, RetrievalError> {
    let ordering = if dos_order {
        ContextOrdering::Position
    } else {
        ContextOrdering::Similarity
    };
    retrieve_units(query, embedder, &chunks.index, &chunks.chunks, policy, ordering, ef)
}
