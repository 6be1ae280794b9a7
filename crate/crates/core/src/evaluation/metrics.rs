//! Answer similarity and claim-based answer correctness.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine_similarity, embed_batch, EmbeddingError, EmbeddingProvider, VectorError};
use crate::llm::{ChatMessage, ChatProvider, ChatRequest, Purpose};
use crate::prompts::{slots, PromptSet, Template};
use crate::provider::ProviderError;

/// Default weight of the claim F1 in the correctness blend.
pub const DEFAULT_CORRECTNESS_WEIGHT: f64 = 0.75;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("{0} text is empty")]
    EmptyText(&'static str),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Vector(#[from] VectorError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("{what} reply could not be parsed after one re-prompt")]
    Unparseable { what: &'static str, raw_reply: String },
    #[error("correctness weight must be within [0, 1]")]
    InvalidWeight,
}

/// Cosine of the two texts' embeddings, mapped to [0, 1] by `max(0, ·)`.
pub fn answer_similarity(generated: &str, truth: &str, embedder: &dyn EmbeddingProvider) -> Result<f64, MetricError> {
    if generated.trim().is_empty() {
        return Err(MetricError::EmptyText("generated"));
    }
    if truth.trim().is_empty() {
        return Err(MetricError::EmptyText("ground truth"));
    }
    let v = embed_batch(&[generated.to_string(), truth.to_string()], embedder, 2)?;
    Ok(similarity_from_cosine(cosine_similarity(&v[0], &v[1])?))
}

pub fn similarity_from_cosine(cosine: f64) -> f64 {
    cosine.max(0.0).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClaimCounts {
    /// Generated claims supported by the reference.
    pub tp: usize,
    /// Generated claims the reference does not support.
    pub fp: usize,
    /// Reference claims missing from the generated answer.
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// `TP / (TP + ½(FP + FN))`, defined as 1 when there are no claims at all.
pub fn factual_f1(c: ClaimCounts) -> f64 {
    if c.tp + c.fp + c.fn_ == 0 {
        return 1.0;
    }
    c.tp as f64 / (c.tp as f64 + 0.5 * (c.fp + c.fn_) as f64)
}

/// `w·F1 + (1 − w)·similarity`, clamped to [0, 1].
pub fn blend_correctness(f1: f64, similarity: f64, weight: f64) -> f64 {
    (weight * f1 + (1.0 - weight) * similarity).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectnessBreakdown {
    pub answer_claims: Vec<String>,
    pub reference_claims: Vec<String>,
    pub counts: ClaimCounts,
    pub f1: f64,
    pub similarity: f64,
    pub weight: f64,
    pub score: f64,
}

/// Items of a `1. text` / `1) text` numbered list.
pub fn parse_numbered_list(reply: &str) -> Vec<String> {
    reply
        .lines()
        .filter_map(|l| {
            let l = l.trim();
            let digits = l.chars().take_while(char::is_ascii_digit).count();
            if digits == 0 {
                return None;
            }
            let rest = l[digits..].strip_prefix(['.', ')'])?.trim();
            (!rest.is_empty()).then(|| rest.to_string())
        })
        .collect()
}

fn parse_claims(reply: &str) -> Option<Vec<String>> {
    if reply.trim().eq_ignore_ascii_case("none") {
        return Some(Vec::new());
    }
    let items = parse_numbered_list(reply);
    (!items.is_empty()).then_some(items)
}

fn parse_verdicts(reply: &str, answers: usize, references: usize) -> Option<ClaimCounts> {
    let mut seen: BTreeMap<(char, usize), bool> = BTreeMap::new();
    for line in reply.lines() {
        let Some((tag, verdict)) = line.trim().split_once(':') else { continue };
        let tag = tag.trim();
        let kind = tag.chars().next()?;
        let Ok(index) = tag[kind.len_utf8()..].parse::<usize>() else { continue };
        let verdict = verdict.trim().trim_end_matches('.').to_ascii_uppercase();
        let positive = match (kind, verdict.as_str()) {
            ('A', "SUPPORTED") | ('R', "PRESENT") => true,
            ('A', "UNSUPPORTED") | ('R', "MISSING") => false,
            _ => continue,
        };
        seen.insert((kind, index), positive);
    }
    let mut c = ClaimCounts::default();
    for i in 1..=answers {
        if *seen.get(&('A', i))? {
            c.tp += 1;
        } else {
            c.fp += 1;
        }
    }
    for i in 1..=references {
        if !*seen.get(&('R', i))? {
            c.fn_ += 1;
        }
    }
    Some(c)
}

/// One call, and on a parse failure one more with the format reminder.
fn ask_parsed<T>(
    llm: &dyn ChatProvider,
    prompts: &PromptSet,
    template: &Template,
    purpose: Purpose,
    values: BTreeMap<String, String>,
    what: &'static str,
    parse: impl Fn(&str) -> Option<T>,
) -> Result<T, MetricError> {
    let mut request = ChatRequest::new(llm.model_name(), purpose, template.render(&values)).with_slots(values);
    let first = llm.complete(&request)?.content;
    if let Some(v) = parse(&first) {
        return Ok(v);
    }
    request.messages.push(ChatMessage::assistant(first));
    request.messages.push(ChatMessage::user(prompts.format_retry.text()));
    let second = llm.complete(&request)?.content;
    parse(&second).ok_or(MetricError::Unparseable { what, raw_reply: second })
}

pub fn extract_claims(text: &str, llm: &dyn ChatProvider, prompts: &PromptSet) -> Result<Vec<String>, MetricError> {
    let values = BTreeMap::from([(slots::TEXT.to_string(), text.to_string())]);
    ask_parsed(llm, prompts, &prompts.claims, Purpose::ClaimExtraction, values, "claim extraction", parse_claims)
}

fn numbered(claims: &[String]) -> String {
    if claims.is_empty() {
        return "(none)".to_string();
    }
    claims.iter().enumerate().map(|(i, c)| format!("{}. {c}", i + 1)).collect::<Vec<_>>().join("\n")
}

pub fn classify_claims(
    answer_claims: &[String],
    reference_claims: &[String],
    llm: &dyn ChatProvider,
    prompts: &PromptSet,
) -> Result<ClaimCounts, MetricError> {
    if answer_claims.is_empty() && reference_claims.is_empty() {
        return Ok(ClaimCounts::default());
    }
    let values = BTreeMap::from([
        (slots::ANSWER_CLAIMS.to_string(), numbered(answer_claims)),
        (slots::REFERENCE_CLAIMS.to_string(), numbered(reference_claims)),
    ]);
    let (a, r) = (answer_claims.len(), reference_claims.len());
    ask_parsed(llm, prompts, &prompts.verdicts, Purpose::ClaimVerdicts, values, "claim verdicts", |reply| {
        parse_verdicts(reply, a, r)
    })
}

/// Claim decomposition of both texts, TP/FP/FN classification, then the
/// weighted blend of claim F1 and answer similarity.
pub fn answer_correctness(
    generated: &str,
    truth: &str,
    llm: &dyn ChatProvider,
    embedder: &dyn EmbeddingProvider,
    prompts: &PromptSet,
    weight: f64,
) -> Result<CorrectnessBreakdown, MetricError> {
    if !(0.0..=1.0).contains(&weight) {
        return Err(MetricError::InvalidWeight);
    }
    let similarity = answer_similarity(generated, truth, embedder)?;
    let answer_claims = extract_claims(generated, llm, prompts)?;
    let reference_claims = extract_claims(truth, llm, prompts)?;
    let counts = classify_claims(&answer_claims, &reference_claims, llm, prompts)?;
    let f1 = factual_f1(counts);
    Ok(CorrectnessBreakdown {
        answer_claims,
        reference_claims,
        counts,
        f1,
        similarity,
        weight,
        score: blend_correctness(f1, similarity, weight),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::MockEmbedder;
    use crate::llm::{FnChat, MockChat};

    #[test]
    fn hand_computed_blend() {
        let f1 = factual_f1(ClaimCounts { tp: 2, fp: 1, fn_: 1 });
        assert!((f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((blend_correctness(f1, 0.8, DEFAULT_CORRECTNESS_WEIGHT) - 0.70).abs() < 1e-9);
    }

    #[test]
    fn f1_boundaries() {
        assert_eq!(factual_f1(ClaimCounts::default()), 1.0);
        assert_eq!(factual_f1(ClaimCounts { tp: 0, fp: 3, fn_: 0 }), 0.0);
        assert_eq!(factual_f1(ClaimCounts { tp: 0, fp: 0, fn_: 2 }), 0.0);
        assert_eq!(blend_correctness(factual_f1(ClaimCounts { tp: 0, fp: 2, fn_: 1 }), 0.0, 0.75), 0.0);
    }

    #[test]
    fn identical_texts_score_one() {
        let e = MockEmbedder::new(1, 128).unwrap();
        let chat = MockChat::new("judge");
        let t = "Press the orange tip against the outer thigh. Hold it for three seconds.";
        assert!((answer_similarity(t, t, &e).unwrap() - 1.0).abs() < 1e-9);
        let b = answer_correctness(t, t, &chat, &e, &PromptSet::default(), 0.75).unwrap();
        assert_eq!(b.counts, ClaimCounts { tp: 2, fp: 0, fn_: 0 });
        assert_eq!(b.f1, 1.0);
        assert!((b.score - 1.0).abs() < 1e-9);
    }

    #[test]
    fn verdict_parsing_requires_every_claim() {
        assert_eq!(parse_verdicts("A1: SUPPORTED\nA2: unsupported.\nR1: MISSING", 2, 1), Some(ClaimCounts { tp: 1, fp: 1, fn_: 1 }));
        assert_eq!(parse_verdicts("A1: SUPPORTED", 1, 1), None);
        assert_eq!(parse_claims("NONE"), Some(vec![]));
        assert_eq!(parse_claims("prose only"), None);
    }

    #[test]
    fn unparseable_claims_fail_after_one_retry() {
        let e = MockEmbedder::new(1, 64).unwrap();
        let chat = FnChat::constant("judge", "I cannot do that.");
        let err = answer_correctness("a b c.", "d e f.", &chat, &e, &PromptSet::default(), 0.75).unwrap_err();
        assert!(matches!(err, MetricError::Unparseable { what: "claim extraction", .. }));
        assert_eq!(chat.calls(), 2);
    }

    #[test]
    fn empty_inputs_rejected() {
        let e = MockEmbedder::new(1, 64).unwrap();
        assert!(matches!(answer_similarity(" ", "x", &e), Err(MetricError::EmptyText(_))));
    }
}
