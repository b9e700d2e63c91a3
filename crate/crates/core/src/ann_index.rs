//! Hierarchical navigable small-world graph over unit vectors, an exact
//! brute-force oracle, and the `MRAGIDX1` binary format.
//!
//! Similarity is the dot product of unit vectors (cosine). Every ordering in
//! this module ranks by similarity descending with ties broken by the smaller
//! node id, which makes construction and search fully deterministic.
//!
//! Construction is single-writer; once built, `search` takes `&self` and may
//! be called from many threads. Interleaving `insert` with `search` is not
//! supported.
//!
//! # File format
//!
//! All integers little-endian, floats as IEEE-754 bit patterns.
//!
//! ```text
//! magic            8 bytes  "MRAGIDX1"
//! version          u32      1
//! m, m0            u32, u32
//! ef_construction  u32
//! ef_search        u32
//! level_lambda     f64
//! seed             u64
//! dim              u32
//! node_count       u64
//! entry_point      u64      (u64::MAX when empty)
//! max_level        u32
//! per node:
//!   id_len u32, id bytes (UTF-8)
//!   level u32
//!   dim x f64
//!   per layer 0..=level: count u32, count x u32 neighbor ids
//! checksum         32 bytes SHA-256 of everything above
//! ```

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embedding::{dot, EmbeddingVector};

pub const INDEX_MAGIC: &[u8; 8] = b"MRAGIDX1";
pub const INDEX_VERSION: u32 = 1;
const MAX_LEVEL: usize = 31;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("duplicate marker id: {0}")]
    DuplicateId(String),
    #[error("dimension mismatch: index has {expected}, vector has {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("index is empty")]
    EmptyIndex,
    #[error("invalid search arguments: {0}")]
    InvalidArgument(String),
    #[error("corrupt index: {0}")]
    CorruptIndex(String),
    #[error("unsupported index version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("index i/o error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HnswParams {
    pub m: usize,
    pub m0: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub level_lambda: f64,
    pub seed: u64,
}

impl HnswParams {
    pub fn with_m(m: usize) -> Self {
        Self {
            m,
            m0: 2 * m,
            ef_construction: 200,
            ef_search: 100,
            level_lambda: 1.0 / (m as f64).ln(),
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<(), IndexError> {
        let bad = |msg: &str| Err(IndexError::InvalidArgument(msg.to_string()));
        if self.m < 2 {
            return bad("m must be >= 2");
        }
        if self.m0 < self.m {
            return bad("m0 must be >= m");
        }
        if self.ef_construction < self.m {
            return bad("ef_construction must be >= m");
        }
        if !(self.level_lambda.is_finite() && self.level_lambda > 0.0) {
            return bad("level_lambda must be positive");
        }
        Ok(())
    }
}

impl Default for HnswParams {
    fn default() -> Self {
        Self::with_m(16)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub marker_id: String,
    pub node: u32,
    pub similarity: f64,
    pub rank: usize,
}

/// Similarity paired with a node id. `a > b` means `a` ranks ahead of `b`.
#[derive(Debug, Clone, Copy)]
struct Scored {
    sim: f64,
    id: u32,
}

impl PartialEq for Scored {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scored {}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sim
            .total_cmp(&other.sim)
            .then_with(|| other.id.cmp(&self.id))
    }
}

fn hits_from(scored: impl IntoIterator<Item = Scored>, ids: impl Fn(u32) -> String) -> Vec<SearchHit> {
    scored
        .into_iter()
        .enumerate()
        .map(|(i, s)| SearchHit {
            marker_id: ids(s.id),
            node: s.id,
            similarity: s.sim,
            rank: i + 1,
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct HnswIndex {
    params: HnswParams,
    dim: usize,
    vectors: Vec<f64>,
    /// links[node][layer] -> neighbor node ids
    links: Vec<Vec<Vec<u32>>>,
    entry_point: Option<u32>,
    max_level: usize,
    payload_ids: Vec<String>,
    lookup: HashMap<String, u32>,
}

impl PartialEq for HnswIndex {
    fn eq(&self, other: &Self) -> bool {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        self.params.m == other.params.m
            && self.params.m0 == other.params.m0
            && self.params.ef_construction == other.params.ef_construction
            && self.params.ef_search == other.params.ef_search
            && self.params.level_lambda.to_bits() == other.params.level_lambda.to_bits()
            && self.params.seed == other.params.seed
            && self.dim == other.dim
            && bits(&self.vectors) == bits(&other.vectors)
            && self.links == other.links
            && self.entry_point == other.entry_point
            && self.max_level == other.max_level
            && self.payload_ids == other.payload_ids
    }
}

impl HnswIndex {
    pub fn new(dim: usize, params: HnswParams) -> Result<Self, IndexError> {
        params.validate()?;
        Ok(Self {
            params,
            dim,
            vectors: Vec::new(),
            links: Vec::new(),
            entry_point: None,
            max_level: 0,
            payload_ids: Vec::new(),
            lookup: HashMap::new(),
        })
    }

    pub fn params(&self) -> &HnswParams {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.payload_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payload_ids.is_empty()
    }

    pub fn entry_point(&self) -> Option<u32> {
        self.entry_point
    }

    pub fn max_level(&self) -> usize {
        self.max_level
    }

    pub fn marker_id(&self, node: u32) -> &str {
        &self.payload_ids[node as usize]
    }

    pub fn vector(&self, node: u32) -> &[f64] {
        let start = node as usize * self.dim;
        &self.vectors[start..start + self.dim]
    }

    pub fn level(&self, node: u32) -> usize {
        self.links[node as usize].len() - 1
    }

    pub fn neighbors(&self, node: u32, layer: usize) -> &[u32] {
        self.links[node as usize]
            .get(layer)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    fn cap(&self, layer: usize) -> usize {
        if layer == 0 {
            self.params.m0
        } else {
            self.params.m
        }
    }

    /// Geometric level draw: floor(-ln(U) * level_lambda) with U from a
    /// ChaCha8 stream keyed by (seed, node id).
    fn draw_level(&self, node: u32) -> usize {
        let mut rng = ChaCha8Rng::seed_from_u64(self.params.seed);
        rng.set_stream(node as u64);
        let u: f64 = 1.0 - rng.random::<f64>();
        let level = (-libm::log(u) * self.params.level_lambda).floor();
        (level as usize).min(MAX_LEVEL)
    }

    fn score(&self, query: &[f64], node: u32) -> Scored {
        Scored {
            sim: dot(query, self.vector(node)),
            id: node,
        }
    }

    /// Best-first search within one layer. Returns up to `ef` nodes, best first.
    fn search_layer(&self, query: &[f64], entry: &[Scored], ef: usize, layer: usize) -> Vec<Scored> {
        let mut visited = vec![false; self.len()];
        let mut candidates: BinaryHeap<Scored> = BinaryHeap::new();
        let mut results: BinaryHeap<Reverse<Scored>> = BinaryHeap::new();
        for &e in entry {
            if !std::mem::replace(&mut visited[e.id as usize], true) {
                candidates.push(e);
                results.push(Reverse(e));
            }
        }
        while results.len() > ef {
            results.pop();
        }
        while let Some(c) = candidates.pop() {
            let worst = results.peek().expect("results non-empty").0;
            if c < worst {
                break;
            }
            for &n in self.neighbors(c.id, layer) {
                if std::mem::replace(&mut visited[n as usize], true) {
                    continue;
                }
                let s = self.score(query, n);
                let worst = results.peek().expect("results non-empty").0;
                if results.len() < ef || s > worst {
                    candidates.push(s);
                    results.push(Reverse(s));
                    if results.len() > ef {
                        results.pop();
                    }
                }
            }
        }
        let mut out: Vec<Scored> = results.into_iter().map(|r| r.0).collect();
        out.sort_by(|a, b| b.cmp(a));
        out
    }

    /// Diversity heuristic: accept a candidate only if it is closer to the base
    /// than to every neighbor already accepted, then top up with the best
    /// rejected candidates until `limit` is reached.
    fn select_neighbors(&self, candidates: &[Scored], limit: usize) -> Vec<Scored> {
        let mut selected: Vec<Scored> = Vec::with_capacity(limit);
        let mut rejected = Vec::new();
        for &c in candidates {
            if selected.len() >= limit {
                break;
            }
            let diverse = selected
                .iter()
                .all(|s| dot(self.vector(c.id), self.vector(s.id)) < c.sim);
            if diverse {
                selected.push(c);
            } else {
                rejected.push(c);
            }
        }
        for c in rejected {
            if selected.len() >= limit {
                break;
            }
            selected.push(c);
        }
        selected
    }

    fn greedy_descend(&self, query: &[f64], mut cur: Scored, from: usize, down_to: usize) -> Scored {
        for layer in (down_to..=from).rev() {
            cur = self.search_layer(query, &[cur], 1, layer)[0];
        }
        cur
    }

    pub fn insert(&mut self, vector: &EmbeddingVector, marker_id: &str) -> Result<u32, IndexError> {
        if vector.dim() != self.dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim,
                actual: vector.dim(),
            });
        }
        if self.lookup.contains_key(marker_id) {
            return Err(IndexError::DuplicateId(marker_id.to_string()));
        }
        let id = u32::try_from(self.len()).map_err(|_| IndexError::InvalidArgument("index full".into()))?;
        let level = self.draw_level(id);
        self.vectors.extend_from_slice(vector.values());
        self.links.push(vec![Vec::new(); level + 1]);
        self.payload_ids.push(marker_id.to_string());
        self.lookup.insert(marker_id.to_string(), id);

        let Some(entry) = self.entry_point else {
            self.entry_point = Some(id);
            self.max_level = level;
            return Ok(id);
        };

        let query = vector.values();
        let mut cur = self.score(query, entry);
        if self.max_level > level {
            cur = self.greedy_descend(query, cur, self.max_level, level + 1);
        }
        let mut entries = vec![cur];
        for layer in (0..=level.min(self.max_level)).rev() {
            let found = self.search_layer(query, &entries, self.params.ef_construction, layer);
            let chosen = self.select_neighbors(&found, self.params.m);
            self.links[id as usize][layer] = chosen.iter().map(|s| s.id).collect();
            for s in &chosen {
                self.link_back(s.id, id, layer);
            }
            entries = found;
        }
        if level > self.max_level {
            self.max_level = level;
            self.entry_point = Some(id);
        }
        Ok(id)
    }

    fn link_back(&mut self, node: u32, new: u32, layer: usize) {
        let cap = self.cap(layer);
        let list = &mut self.links[node as usize][layer];
        list.push(new);
        if list.len() <= cap {
            return;
        }
        let base = self.vector(node).to_vec();
        let mut scored: Vec<Scored> = self.links[node as usize][layer]
            .iter()
            .map(|&n| self.score(&base, n))
            .collect();
        scored.sort_by(|a, b| b.cmp(a));
        let kept = self.select_neighbors(&scored, cap);
        self.links[node as usize][layer] = kept.iter().map(|s| s.id).collect();
    }

    /// Top-`k` approximate neighbors, best first. `ef` is raised to `k` if smaller.
    pub fn search(&self, query: &EmbeddingVector, k: usize, ef: usize) -> Result<Vec<SearchHit>, IndexError> {
        let entry = self.entry_point.ok_or(IndexError::EmptyIndex)?;
        if k == 0 {
            return Err(IndexError::InvalidArgument("k must be >= 1".into()));
        }
        if query.dim() != self.dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim,
                actual: query.dim(),
            });
        }
        let q = query.values();
        let mut cur = self.score(q, entry);
        if self.max_level > 0 {
            cur = self.greedy_descend(q, cur, self.max_level, 1);
        }
        let found = self.search_layer(q, &[cur], ef.max(k), 0);
        Ok(hits_from(found.into_iter().take(k), |id| self.payload_ids[id as usize].clone()))
    }

    /// Structural invariants: degree caps, valid ids, single top-layer entry
    /// point and unit-norm vectors.
    pub fn check_invariants(&self) -> Result<(), String> {
        let n = self.len();
        for node in 0..n as u32 {
            for (layer, list) in self.links[node as usize].iter().enumerate() {
                if list.len() > self.cap(layer) {
                    return Err(format!("node {node} layer {layer} degree {} > cap", list.len()));
                }
                if let Some(&bad) = list.iter().find(|&&x| x as usize >= n || x == node) {
                    return Err(format!("node {node} layer {layer} links invalid id {bad}"));
                }
            }
            let norm = dot(self.vector(node), self.vector(node)).sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(format!("node {node} has norm {norm}"));
            }
        }
        match self.entry_point {
            None if n > 0 => return Err("non-empty index without entry point".into()),
            Some(e) if self.level(e) != self.max_level => {
                return Err("entry point is not on the top layer".into())
            }
            _ => {}
        }
        Ok(())
    }

    /// Number of nodes reachable from the entry point over layer-0 links.
    pub fn reachable_at_layer0(&self) -> usize {
        let Some(entry) = self.entry_point else { return 0 };
        let mut seen = vec![false; self.len()];
        let mut stack = vec![entry];
        seen[entry as usize] = true;
        let mut count = 0;
        while let Some(x) = stack.pop() {
            count += 1;
            for &n in self.neighbors(x, 0) {
                if !std::mem::replace(&mut seen[n as usize], true) {
                    stack.push(n);
                }
            }
        }
        count
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.vectors.len() * 8 + self.len() * (self.params.m0 * 4 + 32));
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        for v in [self.params.m, self.params.m0, self.params.ef_construction, self.params.ef_search] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.params.level_lambda.to_bits().to_le_bytes());
        out.extend_from_slice(&self.params.seed.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.entry_point.map_or(u64::MAX, u64::from).to_le_bytes());
        out.extend_from_slice(&(self.max_level as u32).to_le_bytes());
        for node in 0..self.len() as u32 {
            let id = self.payload_ids[node as usize].as_bytes();
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id);
            out.extend_from_slice(&(self.level(node) as u32).to_le_bytes());
            for x in self.vector(node) {
                out.extend_from_slice(&x.to_bits().to_le_bytes());
            }
            for list in &self.links[node as usize] {
                out.extend_from_slice(&(list.len() as u32).to_le_bytes());
                for n in list {
                    out.extend_from_slice(&n.to_le_bytes());
                }
            }
        }
        let checksum = Sha256::digest(&out);
        out.extend_from_slice(&checksum);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IndexError> {
        let corrupt = |m: &str| IndexError::CorruptIndex(m.to_string());
        if bytes.len() < INDEX_MAGIC.len() + 32 || &bytes[..8] != INDEX_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let (body, checksum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != checksum {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != INDEX_VERSION {
            return Err(IndexError::VersionMismatch {
                expected: INDEX_VERSION,
                found: version,
            });
        }
        let params = HnswParams {
            m: r.u32()? as usize,
            m0: r.u32()? as usize,
            ef_construction: r.u32()? as usize,
            ef_search: r.u32()? as usize,
            level_lambda: f64::from_bits(r.u64()?),
            seed: r.u64()?,
        };
        params.validate().map_err(|e| IndexError::CorruptIndex(e.to_string()))?;
        let dim = r.u32()? as usize;
        let n = r.u64()? as usize;
        let entry = r.u64()?;
        let max_level = r.u32()? as usize;
        let mut index = HnswIndex::new(dim, params)?;
        index.max_level = max_level;
        index.entry_point = match entry {
            u64::MAX => None,
            e if (e as usize) < n => Some(e as u32),
            _ => return Err(corrupt("entry point out of range")),
        };
        for _ in 0..n {
            let len = r.u32()? as usize;
            let id = std::str::from_utf8(r.take(len)?)
                .map_err(|_| corrupt("marker id is not UTF-8"))?
                .to_string();
            let level = r.u32()? as usize;
            if level > MAX_LEVEL {
                return Err(corrupt("node level out of range"));
            }
            for _ in 0..dim {
                index.vectors.push(f64::from_bits(r.u64()?));
            }
            let mut layers = Vec::with_capacity(level + 1);
            for _ in 0..=level {
                let count = r.u32()? as usize;
                let list = (0..count).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
                if list.iter().any(|&x| x as usize >= n) {
                    return Err(corrupt("neighbor id out of range"));
                }
                layers.push(list);
            }
            if index.lookup.insert(id.clone(), index.payload_ids.len() as u32).is_some() {
                return Err(corrupt("duplicate marker id"));
            }
            index.payload_ids.push(id);
            index.links.push(layers);
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(index)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), IndexError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|source| IndexError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, IndexError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| IndexError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IndexError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| IndexError::CorruptIndex("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, IndexError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, IndexError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Exact top-`k` by cosine; node ids are positions in `items`.
pub fn brute_force(items: &[(String, EmbeddingVector)], query: &EmbeddingVector, k: usize) -> Vec<SearchHit> {
    let mut scored: Vec<Scored> = items
        .iter()
        .enumerate()
        .map(|(i, (_, v))| Scored {
            sim: dot(query.values(), v.values()),
            id: i as u32,
        })
        .collect();
    scored.sort_by(|a, b| b.cmp(a));
    hits_from(scored.into_iter().take(k), |id| items[id as usize].0.clone())
}

/// Build an index by inserting `items` in order.
pub fn build_index(items: &[(String, EmbeddingVector)], dim: usize, params: HnswParams) -> Result<HnswIndex, IndexError> {
    let mut index = HnswIndex::new(dim, params)?;
    for (id, v) in items {
        index.insert(v, id)?;
    }
    Ok(index)
}
