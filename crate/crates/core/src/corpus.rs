//! Documents, QA records, token counting and position-tagged segmentation.
//!
//! The reference tokenizer splits text into maximal runs of alphanumeric
//! characters (Unicode `char::is_alphanumeric`) and single-character tokens for
//! every other non-whitespace character. Whitespace separates tokens and is
//! never a token itself. A segment's text is the exact slice of the source
//! document from its first token's start to its last token's end, so joining
//! segment texts with a single space yields a string with the same token
//! sequence as the document (whitespace between segments is normalized to one
//! space; whitespace inside a segment is preserved verbatim).

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const REFERENCE_TOKENIZER: &str = "reference";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("unknown tokenizer: {0}")]
    UnknownTokenizer(String),
    #[error("document {0} is empty")]
    EmptyDocument(String),
    #[error("segment size must be at least 1")]
    InvalidSegmentSize,
    #[error("paragraph indices are not consecutive from 0 (expected {expected}, found {found})")]
    NonConsecutiveIndices { expected: usize, found: usize },
    #[error("malformed record on line {0}: {1}")]
    MalformedRecord(usize, String),
    #[error("missing field `{0}` on line {1}")]
    MissingField(String, usize),
    #[error("duplicate document id: {0}")]
    DuplicateDocId(String),
    #[error("i/o error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
    pub source: String,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, text: impl Into<String>, source: impl Into<String>) -> Self {
        Self {
            doc_id: doc_id.into(),
            text: text.into(),
            source: source.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRecord {
    pub record_id: String,
    pub query: String,
    pub context: String,
    pub gold_answers: Vec<String>,
}

impl QaRecord {
    /// The record's context as a document keyed by the record id.
    pub fn document(&self, source: &str) -> Document {
        Document::new(self.record_id.clone(), self.context.clone(), source)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub paragraph_index: usize,
    pub text: String,
    pub token_count: usize,
}

/// Byte span of one token inside the text it was produced from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
}

/// A token-counting scheme. Implementations must be deterministic and
/// shareable across threads.
pub trait Tokenizer: Send + Sync {
    fn name(&self) -> &str;

    /// Token spans in order. Spans never overlap and must fall on UTF-8
    /// character boundaries.
    fn spans(&self, text: &str) -> Vec<TokenSpan>;

    fn count(&self, text: &str) -> usize {
        self.spans(text).len()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ReferenceTokenizer;

impl Tokenizer for ReferenceTokenizer {
    fn name(&self) -> &str {
        REFERENCE_TOKENIZER
    }

    fn spans(&self, text: &str) -> Vec<TokenSpan> {
        let mut spans = Vec::new();
        let mut word_start: Option<usize> = None;
        for (i, c) in text.char_indices() {
            if c.is_alphanumeric() {
                if word_start.is_none() {
                    word_start = Some(i);
                }
                continue;
            }
            if let Some(start) = word_start.take() {
                spans.push(TokenSpan { start, end: i });
            }
            if !c.is_whitespace() {
                spans.push(TokenSpan {
                    start: i,
                    end: i + c.len_utf8(),
                });
            }
        }
        if let Some(start) = word_start {
            spans.push(TokenSpan {
                start,
                end: text.len(),
            });
        }
        spans
    }

    fn count(&self, text: &str) -> usize {
        let mut n = 0;
        let mut in_word = false;
        for c in text.chars() {
            if c.is_alphanumeric() {
                if !in_word {
                    n += 1;
                    in_word = true;
                }
            } else {
                in_word = false;
                if !c.is_whitespace() {
                    n += 1;
                }
            }
        }
        n
    }
}

/// The reference tokenizer's tokens as owned strings.
pub fn reference_tokens(text: &str) -> Vec<&str> {
    ReferenceTokenizer
        .spans(text)
        .into_iter()
        .map(|s| &text[s.start..s.end])
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerHandle {
    pub name: String,
    #[serde(default)]
    pub vocab_hint: String,
}

impl TokenizerHandle {
    pub fn reference() -> Self {
        Self {
            name: REFERENCE_TOKENIZER.to_string(),
            vocab_hint: String::new(),
        }
    }
}

impl Default for TokenizerHandle {
    fn default() -> Self {
        Self::reference()
    }
}

/// Name → tokenizer lookup. The reference tokenizer is always registered;
/// model-specific BPE counters are plugged in through [`TokenizerRegistry::register`].
#[derive(Clone)]
pub struct TokenizerRegistry {
    inner: Arc<RwLock<HashMap<String, Arc<dyn Tokenizer>>>>,
}

impl Default for TokenizerRegistry {
    fn default() -> Self {
        let mut map: HashMap<String, Arc<dyn Tokenizer>> = HashMap::new();
        map.insert(REFERENCE_TOKENIZER.to_string(), Arc::new(ReferenceTokenizer));
        Self {
            inner: Arc::new(RwLock::new(map)),
        }
    }
}

impl TokenizerRegistry {
    pub fn register(&self, tokenizer: Arc<dyn Tokenizer>) {
        let mut map = self.inner.write().expect("tokenizer registry poisoned");
        map.insert(tokenizer.name().to_string(), tokenizer);
    }

    pub fn resolve(&self, handle: &TokenizerHandle) -> Result<Arc<dyn Tokenizer>, CorpusError> {
        let map = self.inner.read().expect("tokenizer registry poisoned");
        map.get(&handle.name)
            .cloned()
            .ok_or_else(|| CorpusError::UnknownTokenizer(handle.name.clone()))
    }
}

pub fn count_tokens(
    text: &str,
    tok: &TokenizerHandle,
    registry: &TokenizerRegistry,
) -> Result<usize, CorpusError> {
    Ok(registry.resolve(tok)?.count(text))
}

/// Split a document into consecutive segments of at most `segment_size` tokens.
pub fn segment_document(
    doc: &Document,
    segment_size: usize,
    tokenizer: &dyn Tokenizer,
) -> Result<Vec<Segment>, CorpusError> {
    if segment_size == 0 {
        return Err(CorpusError::InvalidSegmentSize);
    }
    let spans = tokenizer.spans(&doc.text);
    if spans.is_empty() {
        return Err(CorpusError::EmptyDocument(doc.doc_id.clone()));
    }
    Ok(spans
        .chunks(segment_size)
        .enumerate()
        .map(|(paragraph_index, window)| {
            let start = window[0].start;
            let end = window[window.len() - 1].end;
            Segment {
                paragraph_index,
                text: doc.text[start..end].to_string(),
                token_count: window.len(),
            }
        })
        .collect())
}

pub fn paragraph_tag(index: usize) -> String {
    format!("[Paragraph {index}]")
}

/// `[Paragraph N]\n{text}\n\n` for every segment, in order.
pub fn render_tagged_document(segments: &[Segment]) -> Result<String, CorpusError> {
    let mut out = String::new();
    for (expected, seg) in segments.iter().enumerate() {
        if seg.paragraph_index != expected {
            return Err(CorpusError::NonConsecutiveIndices {
                expected,
                found: seg.paragraph_index,
            });
        }
        let _ = write!(out, "[Paragraph {}]\n{}\n\n", seg.paragraph_index, seg.text);
    }
    Ok(out)
}

#[derive(Deserialize)]
struct RawLongBench {
    #[serde(rename = "_id")]
    id: Option<serde_json::Value>,
    input: Option<String>,
    context: Option<String>,
    answers: Option<Vec<String>>,
}

/// Load LongBench-style JSONL (`input`, `context`, `answers`, optional `_id`).
///
/// Records without `_id` get `line-{n}` (1-based). Every line must be a
/// well-formed record.
pub fn load_longbench_jsonl(path: impl AsRef<Path>) -> Result<Vec<QaRecord>, CorpusError> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io_err)?;
        let raw: RawLongBench = serde_json::from_str(&line)
            .map_err(|e| CorpusError::MalformedRecord(line_no, e.to_string()))?;
        let missing = |name: &str| CorpusError::MissingField(name.to_string(), line_no);
        let record_id = match raw.id {
            Some(serde_json::Value::String(s)) => s,
            Some(serde_json::Value::Null) | None => format!("line-{line_no}"),
            Some(other) => other.to_string(),
        };
        records.push(QaRecord {
            record_id,
            query: raw.input.ok_or_else(|| missing("input"))?,
            context: raw.context.ok_or_else(|| missing("context"))?,
            gold_answers: raw.answers.ok_or_else(|| missing("answers"))?,
        });
    }
    Ok(records)
}

/// Documents for every record context, rejecting duplicate ids.
pub fn documents_from_records(records: &[QaRecord], source: &str) -> Result<Vec<Document>, CorpusError> {
    let mut seen = HashSet::new();
    records
        .iter()
        .map(|r| {
            if !seen.insert(r.record_id.as_str()) {
                return Err(CorpusError::DuplicateDocId(r.record_id.clone()));
            }
            Ok(r.document(source))
        })
        .collect()
}

/// A plain-text file as a document whose id is the file stem.
pub fn load_text_document(path: impl AsRef<Path>) -> Result<Document, CorpusError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let doc_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    Ok(Document::new(doc_id, text, path.display().to_string()))
}
