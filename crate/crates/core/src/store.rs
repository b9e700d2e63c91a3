//! Marker-store and extraction-log persistence.
//!
//! The store is JSONL: a header line
//! `{"format":"mrag-markers","version":1,"config_hash":…,"doc_count":…}`
//! followed by one marker object per line in canonical field order. Files
//! written here reload and re-save byte for byte.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extraction::{AttemptRecord, MarkerSet, MetaMarker};
use crate::retrieval::UnitLookup;

pub const STORE_FORMAT: &str = "mrag-markers";
pub const STORE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("marker store header mismatch: expected {STORE_FORMAT} version {STORE_VERSION}, found {found}")]
    VersionMismatch { found: String },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate marker id {0}")]
    DuplicateMarker(String),
    #[error("header declares {declared} documents but markers reference {found}")]
    DocCountMismatch { declared: usize, found: usize },
    #[error("extraction log has no entry for document {0}")]
    MissingLogEntry(String),
    #[error("i/o error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct StoreHeader {
    format: String,
    version: u32,
    config_hash: String,
    doc_count: usize,
}

/// In-memory marker store: markers in file order plus an id lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkerStore {
    pub config_hash: String,
    pub doc_count: usize,
    markers: Vec<MetaMarker>,
    by_id: HashMap<String, usize>,
}

impl MarkerStore {
    pub fn new(config_hash: impl Into<String>, markers: Vec<MetaMarker>) -> Result<Self, StoreError> {
        let mut by_id = HashMap::with_capacity(markers.len());
        for (i, m) in markers.iter().enumerate() {
            if by_id.insert(m.marker_id.clone(), i).is_some() {
                return Err(StoreError::DuplicateMarker(m.marker_id.clone()));
            }
        }
        let doc_count = markers.iter().map(|m| m.doc_id.as_str()).collect::<BTreeSet<_>>().len();
        Ok(Self {
            config_hash: config_hash.into(),
            doc_count,
            markers,
            by_id,
        })
    }

    /// Markers of every set, in set order.
    pub fn from_sets(config_hash: impl Into<String>, sets: &[MarkerSet]) -> Result<Self, StoreError> {
        Self::new(config_hash, sets.iter().flat_map(|s| s.markers.iter().cloned()).collect())
    }

    pub fn markers(&self) -> &[MetaMarker] {
        &self.markers
    }

    pub fn len(&self) -> usize {
        self.markers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.markers.is_empty()
    }

    pub fn get(&self, marker_id: &str) -> Option<&MetaMarker> {
        self.by_id.get(marker_id).map(|&i| &self.markers[i])
    }

    /// Markers sorted by marker id, the index insertion order.
    pub fn in_id_order(&self) -> Vec<&MetaMarker> {
        let mut v: Vec<&MetaMarker> = self.markers.iter().collect();
        v.sort_by(|a, b| a.marker_id.cmp(&b.marker_id));
        v
    }

    pub fn to_jsonl(&self) -> String {
        let header = StoreHeader {
            format: STORE_FORMAT.into(),
            version: STORE_VERSION,
            config_hash: self.config_hash.clone(),
            doc_count: self.doc_count,
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for m in &self.markers {
            out.push_str(&serde_json::to_string(m).expect("marker serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(reader: impl BufRead) -> Result<Self, StoreError> {
        let mut lines = reader.lines();
        let read = |r: std::io::Result<String>, line: usize| {
            r.map_err(|e| StoreError::Malformed {
                line,
                message: e.to_string(),
            })
        };
        let header_line = match lines.next() {
            Some(l) => read(l, 1)?,
            None => return Err(StoreError::VersionMismatch { found: "empty file".into() }),
        };
        let header: StoreHeader = serde_json::from_str(&header_line).map_err(|_| StoreError::VersionMismatch {
            found: format!("unreadable header {header_line:?}"),
        })?;
        if header.format != STORE_FORMAT || header.version != STORE_VERSION {
            return Err(StoreError::VersionMismatch {
                found: format!("{} version {}", header.format, header.version),
            });
        }
        let mut markers = Vec::new();
        for (i, l) in lines.enumerate() {
            let line = i + 2;
            let text = read(l, line)?;
            let m: MetaMarker = serde_json::from_str(&text).map_err(|e| StoreError::Malformed {
                line,
                message: e.to_string(),
            })?;
            markers.push(m);
        }
        let store = Self::new(header.config_hash, markers)?;
        if store.doc_count != header.doc_count {
            return Err(StoreError::DocCountMismatch {
                declared: header.doc_count,
                found: store.doc_count,
            });
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        std::fs::write(path, self.to_jsonl()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        let f = std::fs::File::open(path).map_err(io_err(path))?;
        Self::from_jsonl(BufReader::new(f))
    }
}

impl UnitLookup<MetaMarker> for MarkerStore {
    fn lookup(&self, id: &str) -> Option<&MetaMarker> {
        self.get(id)
    }
}

/// One line of the extraction log: everything about a document's attempt
/// loop except the markers themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionLogEntry {
    pub config_hash: String,
    pub doc_id: String,
    pub segment_count: usize,
    pub attempts: Vec<AttemptRecord>,
    pub pre_fallback_coverage: f64,
    pub final_coverage: f64,
    pub fallback_count: usize,
    pub violation_count: usize,
    pub fully_fallback: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl ExtractionLogEntry {
    pub fn from_set(config_hash: &str, set: &MarkerSet) -> Self {
        Self {
            config_hash: config_hash.to_string(),
            doc_id: set.doc_id.clone(),
            segment_count: set.segment_count,
            attempts: set.attempts.clone(),
            pre_fallback_coverage: set.pre_fallback_coverage,
            final_coverage: set.coverage(),
            fallback_count: set.fallback_count,
            violation_count: set.violation_count,
            fully_fallback: set.fully_fallback(),
            warnings: set.warnings.clone(),
        }
    }
}

pub fn write_extraction_log(path: &Path, entries: &[ExtractionLogEntry]) -> Result<(), StoreError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    for e in entries {
        let line = serde_json::to_string(e).expect("log entry serializes");
        writeln!(f, "{line}").map_err(io_err(path))?;
    }
    Ok(())
}

pub fn read_extraction_log(path: &Path) -> Result<Vec<ExtractionLogEntry>, StoreError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| StoreError::Malformed {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Rebuild per-document marker sets from a store and its extraction log,
/// in log order.
pub fn marker_sets(store: &MarkerStore, log: &[ExtractionLogEntry]) -> Result<Vec<MarkerSet>, StoreError> {
    let mut by_doc: HashMap<&str, Vec<MetaMarker>> = HashMap::new();
    for m in store.markers() {
        by_doc.entry(m.doc_id.as_str()).or_default().push(m.clone());
    }
    let mut sets = Vec::with_capacity(log.len());
    for e in log {
        let markers = by_doc.remove(e.doc_id.as_str()).unwrap_or_default();
        sets.push(MarkerSet {
            doc_id: e.doc_id.clone(),
            segment_count: e.segment_count,
            markers,
            attempts: e.attempts.clone(),
            pre_fallback_coverage: e.pre_fallback_coverage,
            fallback_count: e.fallback_count,
            violation_count: e.violation_count,
            warnings: e.warnings.clone(),
        });
    }
    if let Some(doc) = by_doc.keys().min() {
        return Err(StoreError::MissingLogEntry(doc.to_string()));
    }
    Ok(sets)
}
