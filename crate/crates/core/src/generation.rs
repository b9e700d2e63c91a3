//! Answer-generation prompt and final-answer post-processing.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::extraction::fill_placeholders;
use crate::llm_gateway::ChatRequest;

pub const DEFAULT_ANSWER_TEMPLATE: &str = include_str!("../assets/answer_prompt.txt");
pub const INSUFFICIENT: &str = "insufficient information";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRequest {
    pub query: String,
    /// Selected values, already in context order.
    pub context_blocks: Vec<String>,
    pub model: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    pub text: String,
    pub raw: String,
    pub insufficient: bool,
}

/// `{question}` / `{marker_text}` template. Chunk baselines reuse it with
/// chunk text in the marker slot.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerTemplate(String);

impl Default for AnswerTemplate {
    fn default() -> Self {
        Self(DEFAULT_ANSWER_TEMPLATE.to_string())
    }
}

impl AnswerTemplate {
    pub fn load(path: &Path) -> std::io::Result<Self> {
        std::fs::read_to_string(path).map(Self)
    }

    pub fn render(&self, query: &str, context_blocks: &[String]) -> String {
        let marker_text = context_blocks.join("\n\n");
        fill_placeholders(&self.0, &[("question", query), ("marker_text", &marker_text)])
    }
}

pub fn build_answer_prompt(req: &AnswerRequest, template: &AnswerTemplate) -> ChatRequest {
    ChatRequest::new(req.model.clone(), "", template.render(&req.query, &req.context_blocks))
}

fn strip_answer_prefix(s: &str) -> &str {
    let mut s = s.trim();
    while s.len() >= 7 && s.is_char_boundary(7) && s[..7].eq_ignore_ascii_case("answer:") {
        s = s[7..].trim_start();
    }
    s
}

/// Strip leading `Answer:` prefixes, trim, and collapse internal whitespace.
pub fn extract_answer(raw: &str) -> Answer {
    let text = strip_answer_prefix(raw).split_whitespace().collect::<Vec<_>>().join(" ");
    let insufficient = text.eq_ignore_ascii_case(INSUFFICIENT);
    Answer {
        text,
        raw: raw.to_string(),
        insufficient,
    }
}
