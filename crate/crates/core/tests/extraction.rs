mod common;

use std::collections::BTreeSet;

use common::{extraction_request, read_fixture, replay_with, words};
use mrag::corpus::{Document, ReferenceTokenizer};
use mrag::extraction::{
    compute_coverage, extract_corpus, extract_markers, parse_marker_response, ExtractionConfig, ExtractionError,
    ExtractionPrompt, Prompting,
};
use mrag::llm_gateway::{GatewayError, Recorder};
use mrag::mock_llm::ScriptedLlm;
use proptest::prelude::*;
use serde_json::json;

fn run(doc: &Document, replies: &[&str]) -> Result<mrag::extraction::MarkerSet, ExtractionError> {
    let cfg = ExtractionConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let gw = replay_with(dir.path(), &extraction_request(doc, &cfg), replies);
    let prompt = ExtractionPrompt::from_config(&cfg).unwrap();
    extract_markers(doc, &cfg, &prompt, &gw, &ReferenceTokenizer)
}

#[test]
fn full_first_attempt_needs_one_call() {
    let doc = Document::new("fx", read_fixture("doc_1280.txt"), "fixture");
    let set = run(&doc, &[&read_fixture("coverage/full_first_attempt.json")]).unwrap();
    assert_eq!(set.segment_count, 10);
    assert_eq!(set.attempts_used(), 1);
    assert_eq!(set.fallback_count, 0);
    assert_eq!(set.pre_fallback_coverage, 1.0);
    assert_eq!(set.markers.len(), 10);
    assert!(set.markers.iter().all(|m| !m.is_fallback));
}

#[test]
fn below_threshold_keeps_best_and_fills_exact_gap() {
    let doc = Document::new("big", words(12_800), "synthetic");
    let replies = ["attempt1.txt", "attempt2.txt", "attempt3.txt"].map(|f| read_fixture(&format!("coverage/{f}")));
    let set = run(&doc, &replies.each_ref().map(String::as_str)).unwrap();
    assert_eq!(set.segment_count, 100);
    assert_eq!(set.attempts_used(), 3);
    let per_attempt: Vec<f64> = set.attempts.iter().map(|a| a.coverage).collect();
    assert_eq!(per_attempt, [0.90, 0.92, 0.93]);
    assert_eq!(set.pre_fallback_coverage, 0.93);
    let fallback: BTreeSet<usize> = set
        .markers
        .iter()
        .filter(|m| m.is_fallback)
        .map(|m| m.paragraph_indices[0])
        .collect();
    assert_eq!(fallback, BTreeSet::from([5, 17, 33, 50, 71, 88, 99]));
    assert_eq!(set.fallback_count, 7);
    // the kept attempt is the third one: its markers cite ledger entries
    assert_eq!(set.markers.iter().filter(|m| !m.is_fallback).count(), 93);
    assert_eq!(set.coverage(), 1.0);
    for m in set.markers.iter().filter(|m| m.is_fallback) {
        assert_eq!(m.key, m.value);
        assert_eq!(m.k_tokens, 128);
    }
}

#[test]
fn second_attempt_can_succeed() {
    let doc = Document::new("fx", read_fixture("doc_1280.txt"), "fixture");
    let set = run(&doc, &["no json here", &read_fixture("coverage/full_first_attempt.json")]).unwrap();
    assert_eq!(set.attempts_used(), 2);
    assert!(set.attempts[0].error.is_some());
    assert_eq!(set.fallback_count, 0);
}

#[test]
fn unparseable_everywhere_is_fully_fallback() {
    let doc = Document::new("fx", read_fixture("doc_1280.txt"), "fixture");
    let set = run(&doc, &["sorry, I cannot help", "```\n{]\n```", "{\"marker\": []}"]).unwrap();
    assert_eq!(set.attempts_used(), 3);
    assert!(set.fully_fallback());
    assert_eq!(set.markers.len(), 10);
    assert_eq!(set.warnings.len(), 1);
    assert_eq!(set.coverage(), 1.0);
}

#[test]
fn fixture_miss_is_fatal() {
    let doc = Document::new("fx", words(300), "synthetic");
    let err = run(&doc, &[]).unwrap_err();
    assert!(matches!(err, ExtractionError::Gateway(GatewayError::FixtureMiss(_))));
}

#[test]
fn few_shot_prompt_carries_example() {
    let cfg = ExtractionConfig {
        prompting: Prompting::FewShot,
        examples_path: Some(concat!(env!("CARGO_MANIFEST_DIR"), "/assets/few_shot/qasper.json").into()),
        ..Default::default()
    };
    let req = extraction_request(&Document::new("d", words(200), "t"), &cfg);
    assert!(req.user_text.contains("How do the authors evidence the claim"));
    assert!(req.user_text.contains("[Paragraph 1]\n"));
    let zero = extraction_request(&Document::new("d", words(200), "t"), &ExtractionConfig::default());
    assert!(!zero.user_text.contains("How do the authors evidence the claim"));
    assert!(zero.user_text.contains("approximately 1 markers"));
}

#[test]
fn corpus_extraction_keeps_order_and_records_fixtures() {
    let docs: Vec<Document> = (0..6)
        .map(|i| Document::new(format!("d{i}"), format!("Doc {i} opens here. {}. It ends.", words(150 + i * 40)), "t"))
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExtractionConfig::default();
    let recorder = Recorder::new(ScriptedLlm, dir.path());
    let sets: Vec<_> = extract_corpus(&docs, &cfg, &recorder, &ReferenceTokenizer)
        .unwrap()
        .into_iter()
        .map(Result::unwrap)
        .collect();
    assert_eq!(sets.iter().map(|s| s.doc_id.as_str()).collect::<Vec<_>>(), ["d0", "d1", "d2", "d3", "d4", "d5"]);
    assert!(sets.iter().all(|s| s.coverage() == 1.0 && s.fallback_count == 0));
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 6);
}

fn marker_json() -> impl Strategy<Value = serde_json::Value> {
    (
        "[A-Za-z ,.\"]{1,40}",
        prop::collection::vec("[A-Za-z ?]{1,20}", 0..3),
        prop::collection::vec(0usize..30, 0..5),
        any::<bool>(),
    )
        .prop_map(|(v, ks, idx, k_as_string)| {
            let k = if k_as_string && !ks.is_empty() { json!(ks[0]) } else { json!(ks) };
            json!({"v": v, "k": k, "paragraph_indices": idx})
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn parse_is_idempotent(items in prop::collection::vec(marker_json(), 1..12), n in 1usize..25, prose in "[a-z ]{0,20}") {
        let text = format!("{prose}\n```json\n{}\n```", json!({"marker": items}));
        let Ok(first) = parse_marker_response(&text, "d", n, &ReferenceTokenizer) else {
            return Ok(());
        };
        if first.markers.is_empty() {
            prop_assert_eq!(first.discarded, items.len());
            return Ok(());
        }
        let reserialized = json!({"marker": first.markers.iter().map(|m| {
            let mut ks = vec![m.key.clone()];
            ks.extend(m.k_extra.iter().cloned());
            json!({"v": m.value, "k": ks, "paragraph_indices": m.paragraph_indices})
        }).collect::<Vec<_>>()});
        let second = parse_marker_response(&reserialized.to_string(), "d", n, &ReferenceTokenizer).unwrap();
        prop_assert_eq!(&second.markers, &first.markers);
        prop_assert_eq!(second.violations, first.violations);
        prop_assert_eq!(second.discarded, 0);
        for m in &first.markers {
            prop_assert!(!m.paragraph_indices.is_empty());
            prop_assert!(m.paragraph_indices.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(m.paragraph_indices.iter().all(|&i| i < n));
        }
        let cov = compute_coverage(&first.markers, n);
        prop_assert!((0.0..=1.0).contains(&cov));
    }
}
