//! Unit-normalized dense vectors, a pluggable embedder, and a deterministic
//! lexical mock used by all offline tests.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::reference_tokens;

pub const DEFAULT_MOCK_DIM: usize = 64;
pub const DEFAULT_MOCK_SEED: u64 = 0x6d72_6167_5f6b_6579;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("embedding transport error: {0}")]
    TransportError(String),
    #[error("environment variable {0} holding the API key is not set")]
    MissingApiKey(String),
    #[error("invalid embedder config: {0}")]
    InvalidConfig(String),
}

/// A unit-length vector. Degenerate input (all zeros, non-finite) becomes the
/// first basis vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(raw: Vec<f64>) -> Self {
        let dim = raw.len();
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        if dim == 0 || !norm.is_finite() || norm == 0.0 {
            return Self::basis(dim.max(1), 0);
        }
        Self {
            values: raw.into_iter().map(|x| x / norm).collect(),
        }
    }

    /// Wraps values that are already unit length, keeping their exact bits.
    pub fn from_normalized(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn basis(dim: usize, axis: usize) -> Self {
        let mut values = vec![0.0; dim];
        values[axis] = 1.0;
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Plain dot product; equals cosine for unit vectors.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    if a.dim() != b.dim() {
        return Err(EmbeddingError::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    let c = dot(&a.values, &b.values) / (a.norm() * b.norm());
    Ok(c.clamp(-1.0, 1.0))
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError>;

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        Ok(self.embed_batch(&[text])?.remove(0))
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Hashes each lowercased reference token to a pseudo-random unit vector and
/// returns the normalized sum. Integer hashing only, so output is identical
/// on every platform.
#[derive(Debug, Clone, Copy)]
pub struct LexicalMockEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl LexicalMockEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim >= 2, "mock embedder needs dim >= 2");
        Self { dim, seed }
    }

    fn add_token(&self, acc: &mut [f64], token: &str) {
        let mut state = splitmix64(fnv1a(token.as_bytes()) ^ self.seed);
        let mut unit = vec![0.0; self.dim];
        for u in unit.iter_mut() {
            state = splitmix64(state);
            // 53 random bits mapped onto [-1, 1)
            *u = (state >> 11) as f64 * (2.0 / (1u64 << 53) as f64) - 1.0;
        }
        let norm = unit.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (a, u) in acc.iter_mut().zip(&unit) {
            *a += u / norm;
        }
    }

    pub fn embed_text(&self, text: &str) -> EmbeddingVector {
        let lower = text.to_lowercase();
        let tokens = reference_tokens(&lower);
        if tokens.is_empty() {
            return EmbeddingVector::basis(self.dim, 0);
        }
        let mut acc = vec![0.0; self.dim];
        for t in tokens {
            self.add_token(&mut acc, t);
        }
        EmbeddingVector::new(acc)
    }
}

impl Default for LexicalMockEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_MOCK_DIM, DEFAULT_MOCK_SEED)
    }
}

impl Embedder for LexicalMockEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        Ok(texts.iter().map(|t| self.embed_text(t)).collect())
    }
}

pub fn lexical_mock_embed(text: &str, dim: usize) -> EmbeddingVector {
    LexicalMockEmbedder::new(dim, DEFAULT_MOCK_SEED).embed_text(text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    LiveHttp,
    LexicalMock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    pub base_url: String,
    pub model: String,
    pub dim: usize,
    pub api_key_env: String,
    pub seed: u64,
    pub batch_size: usize,
    pub timeout_ms: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            kind: EmbedderKind::LexicalMock,
            base_url: "http://localhost:8001/v1".to_string(),
            model: "BAAI/bge-m3".to_string(),
            dim: DEFAULT_MOCK_DIM,
            api_key_env: "MRAG_EMBED_API_KEY".to_string(),
            seed: DEFAULT_MOCK_SEED,
            batch_size: 64,
            timeout_ms: 60_000,
        }
    }
}

pub fn build_embedder(cfg: &EmbedderConfig) -> Result<Box<dyn Embedder>, EmbeddingError> {
    if cfg.dim < 2 {
        return Err(EmbeddingError::InvalidConfig(format!("dim must be >= 2, got {}", cfg.dim)));
    }
    Ok(match cfg.kind {
        EmbedderKind::LexicalMock => Box::new(LexicalMockEmbedder::new(cfg.dim, cfg.seed)),
        EmbedderKind::LiveHttp => Box::new(HttpEmbedder::new(cfg.clone())?),
    })
}

#[derive(Serialize)]
struct WireEmbeddingRequest<'a> {
    model: &'a str,
    input: &'a [&'a str],
}

#[derive(Deserialize)]
struct WireEmbeddingResponse {
    data: Vec<WireEmbedding>,
}

#[derive(Deserialize)]
struct WireEmbedding {
    embedding: Vec<f64>,
    #[serde(default)]
    index: Option<usize>,
}

/// OpenAI-compatible `/embeddings` client.
pub struct HttpEmbedder {
    cfg: EmbedderConfig,
    client: reqwest::blocking::Client,
}

impl HttpEmbedder {
    pub fn new(cfg: EmbedderConfig) -> Result<Self, EmbeddingError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build()
            .map_err(|e| EmbeddingError::TransportError(e.to_string()))?;
        Ok(Self { cfg, client })
    }

    fn embed_chunk(&self, key: &str, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        let url = format!("{}/embeddings", self.cfg.base_url.trim_end_matches('/'));
        let body = serde_json::to_string(&WireEmbeddingRequest {
            model: &self.cfg.model,
            input: texts,
        })
        .map_err(|e| EmbeddingError::TransportError(e.to_string()))?;
        let resp = self
            .client
            .post(&url)
            .bearer_auth(key)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body)
            .send()
            .map_err(|e| EmbeddingError::TransportError(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| EmbeddingError::TransportError(e.to_string()))?;
        if !status.is_success() {
            return Err(EmbeddingError::TransportError(format!("HTTP {status}: {text}")));
        }
        let mut wire: WireEmbeddingResponse =
            serde_json::from_str(&text).map_err(|e| EmbeddingError::TransportError(e.to_string()))?;
        if wire.data.len() != texts.len() {
            return Err(EmbeddingError::TransportError(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                wire.data.len()
            )));
        }
        wire.data.sort_by_key(|d| d.index.unwrap_or(0));
        wire.data
            .into_iter()
            .map(|d| {
                if d.embedding.len() != self.cfg.dim {
                    return Err(EmbeddingError::DimensionMismatch {
                        expected: self.cfg.dim,
                        actual: d.embedding.len(),
                    });
                }
                Ok(EmbeddingVector::new(d.embedding))
            })
            .collect()
    }
}

impl Embedder for HttpEmbedder {
    fn dim(&self) -> usize {
        self.cfg.dim
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        let key = std::env::var(&self.cfg.api_key_env)
            .map_err(|_| EmbeddingError::MissingApiKey(self.cfg.api_key_env.clone()))?;
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.cfg.batch_size.max(1)) {
            // Empty strings are rejected by most servers; they embed to the basis convention instead.
            let non_empty: Vec<&str> = chunk.iter().copied().filter(|t| !t.trim().is_empty()).collect();
            let mut embedded = if non_empty.is_empty() {
                Vec::new()
            } else {
                self.embed_chunk(&key, &non_empty)?
            }
            .into_iter();
            for t in chunk {
                out.push(if t.trim().is_empty() {
                    EmbeddingVector::basis(self.cfg.dim, 0)
                } else {
                    embedded.next().expect("one embedding per non-empty text")
                });
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_identities() {
        let e1 = EmbeddingVector::basis(4, 0);
        let e2 = EmbeddingVector::basis(4, 1);
        let neg = EmbeddingVector::new(vec![-1.0, 0.0, 0.0, 0.0]);
        assert_eq!(cosine(&e1, &e2).unwrap(), 0.0);
        assert_eq!(cosine(&e1, &neg).unwrap(), -1.0);
        let v = lexical_mock_embed("some words here", 16);
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-9);
        assert!(matches!(
            cosine(&e1, &EmbeddingVector::basis(3, 0)),
            Err(EmbeddingError::DimensionMismatch { expected: 4, actual: 3 })
        ));
    }

    #[test]
    fn mock_properties() {
        let m = LexicalMockEmbedder::default();
        let out = m.embed_batch(&["same text", "same text"]).unwrap();
        assert_eq!(out[0], out[1]);
        assert_eq!(m.embed_text(""), EmbeddingVector::basis(64, 0));
        assert_eq!(m.embed_text("  ,  ").dim(), 64);
        assert_eq!(m.embed_text("Cat SAT"), m.embed_text("cat sat"));
        let single = lexical_mock_embed("x", 8);
        let double = lexical_mock_embed("x x", 8);
        for (a, b) in single.values().iter().zip(double.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_vectors() {
        assert_eq!(EmbeddingVector::new(vec![0.0; 5]), EmbeddingVector::basis(5, 0));
        assert_eq!(EmbeddingVector::new(vec![f64::NAN, 1.0]), EmbeddingVector::basis(2, 0));
    }

    #[test]
    fn invalid_dim_rejected() {
        let cfg = EmbedderConfig {
            dim: 1,
            ..Default::default()
        };
        assert!(build_embedder(&cfg).is_err());
    }
}
