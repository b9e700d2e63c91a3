//! Deterministic scripted stand-in for the chat model.
//!
//! Extraction prompts get one marker per pair of consecutive sentences in
//! every tagged paragraph: the value is the pair and the key a short question,
//! "What is X?" for each "X is Y." sentence or a question over the leading
//! words when the pair states no such fact. Answer prompts get the
//! words of the best-matching context sentence that do not occur in the
//! question. Nothing here tries to be clever; it exists so the whole pipeline
//! runs offline and replay fixtures can be produced without an endpoint.

use std::collections::HashSet;
use std::time::Instant;

use serde_json::json;

use crate::corpus::reference_tokens;
use crate::llm_gateway::{ChatBackend, ChatRequest, ChatResponse, GatewayError};

const DOC_START: &str = "INPUT DOCUMENT:\n";
const DOC_END: &str = "\n\nREFERENCE EXAMPLES:";
const QUESTION_PREFIX: &str = "User Question: ";
const CONTEXT_START: &str = "Retrieved Marker:\n";
const CONTEXT_END: &str = "\n\nYou MUST answer strictly based on the marker.";
const CUE_WORDS: usize = 5;
const MAX_SUBJECT_WORDS: usize = 10;
const COPULAS: [&str; 4] = ["is", "are", "was", "were"];

#[derive(Debug, Clone, Copy, Default)]
pub struct ScriptedLlm;

/// `(index, text)` for every `[Paragraph N]` block in `doc`.
pub fn tagged_paragraphs(doc: &str) -> Vec<(usize, String)> {
    let mut out = Vec::new();
    let mut rest = doc;
    while let Some(start) = rest.find("[Paragraph ") {
        let after = &rest[start + "[Paragraph ".len()..];
        let Some(close) = after.find("]\n") else { break };
        let Ok(idx) = after[..close].parse::<usize>() else {
            rest = after;
            continue;
        };
        let body = &after[close + 2..];
        let end = body.find("\n\n[Paragraph ").unwrap_or(body.len());
        out.push((idx, body[..end].trim().to_string()));
        rest = &body[end..];
    }
    out
}

/// Split on `.`, `!` or `?` followed by whitespace.
fn sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        cur.push(c);
        if matches!(c, '.' | '!' | '?') && chars.peek().is_none_or(|n| n.is_whitespace()) {
            let s = cur.trim();
            if !s.is_empty() {
                out.push(s.to_string());
            }
            cur.clear();
        }
    }
    if !cur.trim().is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

/// "What is X?" for a sentence of the form "X is Y."
fn fact_question(sentence: &str) -> Option<String> {
    let words: Vec<&str> = sentence.trim_end_matches(['.', '!', '?']).split_whitespace().collect();
    let pos = words.iter().position(|w| COPULAS.contains(w))?;
    if pos == 0 || pos > MAX_SUBJECT_WORDS || pos + 1 == words.len() {
        return None;
    }
    let mut subject = words[..pos].join(" ");
    if let Some(first) = subject.get(..1) {
        subject = first.to_lowercase() + &subject[1..];
    }
    Some(format!("What {} {subject}?", words[pos]))
}

fn key_for(pair: &[String]) -> String {
    let facts: Vec<String> = pair.iter().filter_map(|s| fact_question(s)).collect();
    if !facts.is_empty() {
        return facts.join(" ");
    }
    let cue: Vec<&str> = pair[0].trim_end_matches(['.', '!', '?']).split_whitespace().take(CUE_WORDS).collect();
    format!("What about {}?", cue.join(" "))
}

pub fn scripted_extraction(tagged_doc: &str) -> String {
    let mut markers = Vec::new();
    for (idx, text) in tagged_paragraphs(tagged_doc) {
        for pair in sentences(&text).chunks(2) {
            markers.push(json!({"v": pair.join(" "), "k": [key_for(pair)], "paragraph_indices": [idx]}));
        }
    }
    json!({ "marker": markers }).to_string()
}

fn lower_tokens(s: &str) -> Vec<String> {
    reference_tokens(s)
        .into_iter()
        .filter(|t| t.chars().all(char::is_alphanumeric))
        .map(str::to_lowercase)
        .collect()
}

pub fn scripted_answer(question: &str, context: &str) -> String {
    let q: HashSet<String> = lower_tokens(question).into_iter().collect();
    let mut best: Option<(usize, String)> = None;
    for s in sentences(context) {
        let overlap = lower_tokens(&s).iter().filter(|t| q.contains(*t)).count();
        if overlap > 0 && best.as_ref().is_none_or(|(b, _)| overlap > *b) {
            best = Some((overlap, s));
        }
    }
    let Some((_, sentence)) = best else {
        return "Insufficient information".to_string();
    };
    let rest: Vec<&str> = reference_tokens(&sentence)
        .into_iter()
        .filter(|t| t.chars().all(char::is_alphanumeric) && !q.contains(&t.to_lowercase()))
        .collect();
    if rest.is_empty() {
        return "Insufficient information".to_string();
    }
    rest.join(" ")
}

fn between<'a>(text: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let s = text.find(start)? + start.len();
    let e = text.rfind(end).filter(|&e| e >= s).unwrap_or(text.len());
    Some(&text[s..e])
}

impl ChatBackend for ScriptedLlm {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let start = Instant::now();
        let text = if let Some(doc) = between(&req.user_text, DOC_START, DOC_END) {
            scripted_extraction(doc)
        } else if req.user_text.starts_with(QUESTION_PREFIX) {
            let question = req.user_text[QUESTION_PREFIX.len()..].lines().next().unwrap_or("");
            let context = between(&req.user_text, CONTEXT_START, CONTEXT_END).unwrap_or("");
            scripted_answer(question, context)
        } else {
            return Err(GatewayError::MalformedResponse(
                "scripted model only understands extraction and answer prompts".into(),
            ));
        };
        Ok(ChatResponse {
            usage_prompt_tokens: reference_tokens(&req.user_text).len() as u64,
            usage_output_tokens: reference_tokens(&text).len() as u64,
            text,
            latency_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}
