//! Meta-marker extraction: prompt construction, response parsing, coverage
//! validation, retries and the fallback that fills uncovered paragraphs.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::{render_tagged_document, segment_document, CorpusError, Document, Segment, Tokenizer};
use crate::llm_gateway::{ChatBackend, ChatRequest, GatewayError};

pub const DEFAULT_EXTRACTION_TEMPLATE: &str = include_str!("../assets/extraction_prompt.txt");

/// Markers with more source paragraphs than this are kept but counted as violations.
pub const MAX_PARAGRAPHS_PER_MARKER: usize = 3;

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error("prompt template not found: {0}")]
    MissingTemplate(String),
    #[error("few-shot prompting requires an examples file")]
    MissingExamples,
    #[error("invalid few-shot examples file {path}: {message}")]
    InvalidExamples { path: String, message: String },
    #[error("tagged document has no [Paragraph 0] tag")]
    UntaggedDocument,
    #[error("no JSON object with a `marker` array found in response")]
    NoJsonFound,
    #[error("response contains an empty `marker` array")]
    EmptyMarkerArray,
    #[error("invalid extraction config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaMarker {
    pub marker_id: String,
    pub doc_id: String,
    #[serde(rename = "k")]
    pub key: String,
    #[serde(rename = "v")]
    pub value: String,
    pub paragraph_indices: Vec<usize>,
    pub is_fallback: bool,
    pub k_tokens: usize,
    pub v_tokens: usize,
    /// Additional `k` entries returned by the model. Kept for audit, never indexed.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub k_extra: Vec<String>,
}

impl MetaMarker {
    pub fn min_paragraph(&self) -> usize {
        self.paragraph_indices.first().copied().unwrap_or(usize::MAX)
    }
}

pub fn marker_id(doc_id: &str, ordinal: usize) -> String {
    format!("{doc_id}#{ordinal:04}")
}

/// One LLM call inside the attempt loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub coverage: f64,
    pub markers: usize,
    pub violations: usize,
    pub discarded: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerSet {
    pub doc_id: String,
    pub segment_count: usize,
    pub markers: Vec<MetaMarker>,
    pub attempts: Vec<AttemptRecord>,
    /// Coverage of the kept attempt, before any fallback markers were added.
    pub pre_fallback_coverage: f64,
    pub fallback_count: usize,
    pub violation_count: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl MarkerSet {
    pub fn attempts_used(&self) -> usize {
        self.attempts.len()
    }

    /// Recomputed from the markers; never stored.
    pub fn coverage(&self) -> f64 {
        compute_coverage(&self.markers, self.segment_count)
    }

    /// True when no attempt produced usable markers and every segment fell back.
    pub fn fully_fallback(&self) -> bool {
        !self.markers.is_empty() && self.markers.iter().all(|m| m.is_fallback)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prompting {
    ZeroShot,
    FewShot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractionConfig {
    pub segment_size: usize,
    pub coverage_threshold: f64,
    /// Total LLM calls per document, including the first.
    pub max_attempts: u32,
    pub prompting: Prompting,
    pub examples_path: Option<PathBuf>,
    /// `None` uses the bundled template.
    pub prompt_template_path: Option<PathBuf>,
    pub model: String,
    pub max_output_tokens: Option<u32>,
    pub workers: usize,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            segment_size: 128,
            coverage_threshold: 0.95,
            max_attempts: 3,
            prompting: Prompting::ZeroShot,
            examples_path: None,
            prompt_template_path: None,
            model: "deepseek-chat".to_string(),
            max_output_tokens: None,
            workers: 4,
        }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<(), ExtractionError> {
        if !(self.coverage_threshold > 0.0 && self.coverage_threshold <= 1.0) {
            return Err(ExtractionError::InvalidConfig(format!(
                "coverage_threshold must be in (0, 1], got {}",
                self.coverage_threshold
            )));
        }
        if self.max_attempts < 1 {
            return Err(ExtractionError::InvalidConfig("max_attempts must be >= 1".into()));
        }
        if self.segment_size < 1 {
            return Err(ExtractionError::InvalidConfig("segment_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Few-shot example entry, in the same shape the model is asked to produce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub v: String,
    pub k: Vec<String>,
    pub paragraph_indices: Vec<usize>,
}

pub fn load_examples(path: &Path) -> Result<Vec<FewShotExample>, ExtractionError> {
    let invalid = |message: String| ExtractionError::InvalidExamples {
        path: path.display().to_string(),
        message,
    };
    let raw = std::fs::read_to_string(path).map_err(|e| invalid(e.to_string()))?;
    serde_json::from_str(&raw).map_err(|e| invalid(e.to_string()))
}

fn render_examples(examples: &[FewShotExample]) -> String {
    examples
        .iter()
        .map(|e| serde_json::to_string_pretty(e).expect("examples serialize"))
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Replace `{name}` placeholders in one left-to-right pass, so substituted
/// values are never rescanned. Unknown braces are left untouched.
pub fn fill_placeholders(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open..];
        let hit = values.iter().find(|(name, _)| {
            tail.len() > name.len() + 1
                && tail[1..].starts_with(name)
                && tail.as_bytes()[name.len() + 1] == b'}'
        });
        match hit {
            Some((name, value)) => {
                out.push_str(value);
                rest = &tail[name.len() + 2..];
            }
            None => {
                out.push('{');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

/// Template and rendered examples, loaded once per run.
#[derive(Debug, Clone)]
pub struct ExtractionPrompt {
    template: String,
    examples: String,
    model: String,
    segment_size: usize,
    max_output_tokens: Option<u32>,
}

impl ExtractionPrompt {
    pub fn from_config(cfg: &ExtractionConfig) -> Result<Self, ExtractionError> {
        let template = match &cfg.prompt_template_path {
            None => DEFAULT_EXTRACTION_TEMPLATE.to_string(),
            Some(p) => std::fs::read_to_string(p)
                .map_err(|_| ExtractionError::MissingTemplate(p.display().to_string()))?,
        };
        let examples = match cfg.prompting {
            Prompting::ZeroShot => String::new(),
            Prompting::FewShot => {
                let path = cfg.examples_path.as_deref().ok_or(ExtractionError::MissingExamples)?;
                render_examples(&load_examples(path)?)
            }
        };
        Ok(Self {
            template,
            examples,
            model: cfg.model.clone(),
            segment_size: cfg.segment_size.max(1),
            max_output_tokens: cfg.max_output_tokens,
        })
    }

    /// floor(total_tokens / segment_size), at least 1.
    pub fn expected_marker_count(&self, total_tokens: usize) -> usize {
        (total_tokens / self.segment_size).max(1)
    }

    pub fn build(&self, tagged_doc: &str, total_tokens: usize) -> Result<ChatRequest, ExtractionError> {
        if !tagged_doc.contains("[Paragraph 0]") {
            return Err(ExtractionError::UntaggedDocument);
        }
        let count = self.expected_marker_count(total_tokens).to_string();
        let user_text = fill_placeholders(
            &self.template,
            &[
                ("content", tagged_doc),
                ("expected_marker_count", &count),
                ("examples", &self.examples),
            ],
        );
        let mut req = ChatRequest::new(self.model.clone(), "", user_text);
        req.max_output_tokens = self.max_output_tokens;
        Ok(req)
    }
}

pub fn build_extraction_prompt(
    tagged_doc: &str,
    total_tokens: usize,
    cfg: &ExtractionConfig,
) -> Result<ChatRequest, ExtractionError> {
    ExtractionPrompt::from_config(cfg)?.build(tagged_doc, total_tokens)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedMarkers {
    pub markers: Vec<MetaMarker>,
    /// Markers kept despite citing more than three paragraphs.
    pub violations: usize,
    /// Entries dropped for missing fields or no in-range paragraph index.
    pub discarded: usize,
}

fn find_marker_array(text: &str) -> Option<Vec<Value>> {
    for (i, _) in text.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<Value>();
        if let Some(Ok(Value::Object(mut obj))) = stream.next() {
            if let Some(Value::Array(items)) = obj.remove("marker") {
                return Some(items);
            }
        }
    }
    None
}

fn as_index(v: &Value) -> Option<usize> {
    match v {
        Value::Number(n) => n.as_u64().map(|n| n as usize),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

/// Parse the model's marker JSON, tolerating code fences and surrounding prose.
pub fn parse_marker_response(
    text: &str,
    doc_id: &str,
    segment_count: usize,
    tokenizer: &dyn Tokenizer,
) -> Result<ParsedMarkers, ExtractionError> {
    let items = find_marker_array(text).ok_or(ExtractionError::NoJsonFound)?;
    if items.is_empty() {
        return Err(ExtractionError::EmptyMarkerArray);
    }
    let mut markers = Vec::with_capacity(items.len());
    let mut violations = 0;
    let mut discarded = 0;
    for item in &items {
        let value = item.get("v").and_then(Value::as_str).filter(|s| !s.trim().is_empty());
        let mut keys: Vec<String> = match item.get("k") {
            Some(Value::Array(ks)) => ks.iter().filter_map(Value::as_str).map(str::to_string).collect(),
            Some(Value::String(k)) => vec![k.clone()],
            _ => Vec::new(),
        };
        let indices: BTreeSet<usize> = item
            .get("paragraph_indices")
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(as_index).filter(|&i| i < segment_count).collect())
            .unwrap_or_default();
        let (Some(value), false, false) = (
            value,
            keys.first().is_none_or(|k| k.trim().is_empty()),
            indices.is_empty(),
        ) else {
            discarded += 1;
            continue;
        };
        let key = keys.remove(0);
        if indices.len() > MAX_PARAGRAPHS_PER_MARKER {
            violations += 1;
        }
        markers.push(MetaMarker {
            marker_id: marker_id(doc_id, markers.len()),
            doc_id: doc_id.to_string(),
            k_tokens: tokenizer.count(&key),
            v_tokens: tokenizer.count(value),
            key,
            value: value.to_string(),
            paragraph_indices: indices.into_iter().collect(),
            is_fallback: false,
            k_extra: keys,
        });
    }
    Ok(ParsedMarkers {
        markers,
        violations,
        discarded,
    })
}

/// Fraction of segments cited by at least one marker.
pub fn compute_coverage(markers: &[MetaMarker], segment_count: usize) -> f64 {
    if segment_count == 0 {
        return 0.0;
    }
    let covered: BTreeSet<usize> = markers
        .iter()
        .flat_map(|m| m.paragraph_indices.iter().copied())
        .filter(|&i| i < segment_count)
        .collect();
    covered.len() as f64 / segment_count as f64
}

/// Append one fallback marker (key = value = segment text) per uncovered segment.
pub fn fill_uncovered(markers: &mut Vec<MetaMarker>, segments: &[Segment], doc_id: &str) -> usize {
    let covered: BTreeSet<usize> = markers
        .iter()
        .flat_map(|m| m.paragraph_indices.iter().copied())
        .collect();
    let mut added = 0;
    for seg in segments.iter().filter(|s| !covered.contains(&s.paragraph_index)) {
        markers.push(MetaMarker {
            marker_id: marker_id(doc_id, markers.len()),
            doc_id: doc_id.to_string(),
            key: seg.text.clone(),
            value: seg.text.clone(),
            paragraph_indices: vec![seg.paragraph_index],
            is_fallback: true,
            k_tokens: seg.token_count,
            v_tokens: seg.token_count,
            k_extra: Vec::new(),
        });
        added += 1;
    }
    added
}

/// Run the attempt loop for one document.
///
/// Stops at the first attempt whose coverage reaches the threshold. If none
/// does, the best attempt (earliest on ties) is kept and every uncovered
/// segment becomes a fallback marker. Gateway failures are fatal; parse
/// failures only count as a zero-coverage attempt.
pub fn extract_markers(
    doc: &Document,
    cfg: &ExtractionConfig,
    prompt: &ExtractionPrompt,
    backend: &dyn ChatBackend,
    tokenizer: &dyn Tokenizer,
) -> Result<MarkerSet, ExtractionError> {
    cfg.validate()?;
    let segments = segment_document(doc, cfg.segment_size, tokenizer)?;
    let tagged = render_tagged_document(&segments)?;
    let total_tokens: usize = segments.iter().map(|s| s.token_count).sum();
    let req = prompt.build(&tagged, total_tokens)?;
    let n = segments.len();

    let mut attempts = Vec::new();
    let mut best: Option<(f64, ParsedMarkers)> = None;
    for attempt in 1..=cfg.max_attempts {
        let resp = backend.complete(&req)?;
        match parse_marker_response(&resp.text, &doc.doc_id, n, tokenizer) {
            Ok(parsed) => {
                let coverage = compute_coverage(&parsed.markers, n);
                log::debug!("{} attempt {attempt}: coverage {coverage:.4}", doc.doc_id);
                attempts.push(AttemptRecord {
                    coverage,
                    markers: parsed.markers.len(),
                    violations: parsed.violations,
                    discarded: parsed.discarded,
                    error: None,
                });
                if best.as_ref().is_none_or(|(c, _)| coverage > *c) {
                    best = Some((coverage, parsed));
                }
                if coverage >= cfg.coverage_threshold {
                    break;
                }
            }
            Err(e) => {
                log::warn!("{} attempt {attempt}: {e}", doc.doc_id);
                attempts.push(AttemptRecord {
                    coverage: 0.0,
                    markers: 0,
                    violations: 0,
                    discarded: 0,
                    error: Some(e.to_string()),
                });
            }
        }
    }

    let mut warnings = Vec::new();
    let (pre_fallback_coverage, mut markers, violation_count) = match best {
        Some((c, parsed)) => (c, parsed.markers, parsed.violations),
        None => {
            warnings.push(format!(
                "all {} attempts unparseable; every segment uses a fallback marker",
                attempts.len()
            ));
            (0.0, Vec::new(), 0)
        }
    };
    let fallback_count = if pre_fallback_coverage >= cfg.coverage_threshold {
        0
    } else {
        fill_uncovered(&mut markers, &segments, &doc.doc_id)
    };

    Ok(MarkerSet {
        doc_id: doc.doc_id.clone(),
        segment_count: n,
        markers,
        attempts,
        pre_fallback_coverage,
        fallback_count,
        violation_count,
        warnings,
    })
}

/// Extract every document on a bounded worker pool. Output order matches input order.
pub fn extract_corpus(
    docs: &[Document],
    cfg: &ExtractionConfig,
    backend: &dyn ChatBackend,
    tokenizer: &dyn Tokenizer,
) -> Result<Vec<Result<MarkerSet, ExtractionError>>, ExtractionError> {
    cfg.validate()?;
    let prompt = ExtractionPrompt::from_config(cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| ExtractionError::InvalidConfig(e.to_string()))?;
    Ok(pool.install(|| {
        docs.par_iter()
            .map(|d| extract_markers(d, cfg, &prompt, backend, tokenizer))
            .collect()
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ReferenceTokenizer;

    fn parse(text: &str, n: usize) -> Result<ParsedMarkers, ExtractionError> {
        parse_marker_response(text, "d", n, &ReferenceTokenizer)
    }

    #[test]
    fn parse_direct() {
        let p = parse(r#"{"marker":[{"v":"V","k":["K?"],"paragraph_indices":[0,1]}]}"#, 3).unwrap();
        assert_eq!(p.markers.len(), 1);
        assert_eq!(p.markers[0].key, "K?");
        assert_eq!(p.markers[0].value, "V");
        assert_eq!(p.markers[0].paragraph_indices, [0, 1]);
        assert_eq!(p.markers[0].k_tokens, 2);
        assert_eq!(p.violations, 0);
    }

    #[test]
    fn parse_fenced_and_prose() {
        let bare = r#"{"marker":[{"v":"V","k":["K?"],"paragraph_indices":[0,1]}]}"#;
        let fenced = format!("```json\n{bare}\n```");
        let prose = format!("Here are the markers:\n{fenced}\nHope this helps {{:)");
        assert_eq!(parse(&fenced, 3).unwrap(), parse(bare, 3).unwrap());
        assert_eq!(parse(&prose, 3).unwrap(), parse(bare, 3).unwrap());
    }

    #[test]
    fn parse_violation_kept() {
        let p = parse(r#"{"marker":[{"v":"V","k":["K"],"paragraph_indices":[0,1,2,3]}]}"#, 10).unwrap();
        assert_eq!(p.markers.len(), 1);
        assert_eq!(p.violations, 1);
    }

    #[test]
    fn parse_filters_indices() {
        let text = r#"{"marker":[
            {"v":"a","k":["ka","kb"],"paragraph_indices":[2,9,2,0]},
            {"v":"b","k":["kb"],"paragraph_indices":[7,8]},
            {"v":"","k":["kc"],"paragraph_indices":[1]},
            {"v":"d","k":"kd","paragraph_indices":["1"]}
        ]}"#;
        let p = parse(text, 3).unwrap();
        assert_eq!(p.markers.len(), 2);
        assert_eq!(p.markers[0].paragraph_indices, [0, 2]);
        assert_eq!(p.markers[0].k_extra, ["kb"]);
        assert_eq!(p.markers[1].key, "kd");
        assert_eq!(p.markers[1].marker_id, "d#0001");
        assert_eq!(p.discarded, 2);
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(parse("no json here", 3), Err(ExtractionError::NoJsonFound)));
        assert!(matches!(parse(r#"{"markers":[]}"#, 3), Err(ExtractionError::NoJsonFound)));
        assert!(matches!(parse(r#"{"marker":[]}"#, 3), Err(ExtractionError::EmptyMarkerArray)));
    }

    fn covering(indices: &[&[usize]]) -> Vec<MetaMarker> {
        indices
            .iter()
            .enumerate()
            .map(|(i, idx)| MetaMarker {
                marker_id: marker_id("d", i),
                doc_id: "d".into(),
                key: "k".into(),
                value: "v".into(),
                paragraph_indices: idx.to_vec(),
                is_fallback: false,
                k_tokens: 1,
                v_tokens: 1,
                k_extra: vec![],
            })
            .collect()
    }

    #[test]
    fn coverage_values() {
        let all: Vec<usize> = (0..10).collect();
        assert_eq!(compute_coverage(&covering(&[&all]), 10), 1.0);
        assert_eq!(compute_coverage(&covering(&[&all[..5], &all[4..9]]), 10), 0.9);
        assert_eq!(compute_coverage(&[], 10), 0.0);
    }

    #[test]
    fn placeholders_single_pass() {
        let out = fill_placeholders(
            "A {content} B {examples} {x} {",
            &[("content", "{examples}"), ("examples", "E")],
        );
        assert_eq!(out, "A {examples} B E {x} {");
    }

    #[test]
    fn expected_count_clamped() {
        let p = ExtractionPrompt::from_config(&ExtractionConfig::default()).unwrap();
        assert_eq!(p.expected_marker_count(1280), 10);
        assert_eq!(p.expected_marker_count(100), 1);
        assert_eq!(p.expected_marker_count(255), 1);
        let req = p.build("[Paragraph 0]\nx\n\n", 100).unwrap();
        assert!(req.user_text.contains("approximately 1 markers"));
        assert_eq!(req.temperature, 0.0);
        assert!(matches!(p.build("untagged", 100), Err(ExtractionError::UntaggedDocument)));
    }

    #[test]
    fn prompt_config_errors() {
        let cfg = ExtractionConfig {
            prompting: Prompting::FewShot,
            ..Default::default()
        };
        assert!(matches!(ExtractionPrompt::from_config(&cfg), Err(ExtractionError::MissingExamples)));
        let cfg = ExtractionConfig {
            prompt_template_path: Some("/nonexistent/template.txt".into()),
            ..Default::default()
        };
        assert!(matches!(ExtractionPrompt::from_config(&cfg), Err(ExtractionError::MissingTemplate(_))));
    }
}
