//! Deterministic, extractive stand-in for a chat model.
//!
//! `MockChat` answers every [`Purpose`] from the request slots using simple
//! word-overlap heuristics, so the whole pipeline runs offline and its
//! outputs satisfy the same parsers a real model's replies must pass.

use std::collections::{BTreeMap, BTreeSet};

use crate::llm::{ChatProvider, ChatReply, ChatRequest, Purpose};
use crate::prompts::slots;
use crate::provider::ProviderError;
use crate::retrieval::NO_RELEVANT_CONTENT;
use crate::text;

const MEDICATION_CUES: &[&str] = &[
    "advised", "call", "continue", "discharged", "discontinue", "dose", "epipen", "follow",
    "instructed", "instruction", "medication", "medications", "mg", "prescribed", "prescription",
    "recommended", "return", "tablet", "take", "therapy", "treatment",
];
const DIAGNOSTIC_CUES: &[&str] = &[
    "assessment", "blood", "ct", "diagnosed", "diagnosis", "ekg", "exam", "examination",
    "impression", "inr", "lab", "mri", "murmur", "performed", "pressure", "pulse", "rast",
    "revealed", "showed", "temperature", "test", "testing", "ultrasound", "vital", "xray",
];

pub struct MockChat {
    model: String,
    answer_sentences: usize,
}

impl MockChat {
    /// The model name determines answer length (1 to 3 sentences), so two
    /// mock models produce measurably different answers.
    pub fn new(model: impl Into<String>) -> Self {
        let model = model.into();
        let spread = model.bytes().fold(0usize, |acc, b| acc.wrapping_mul(31).wrapping_add(b as usize));
        MockChat { answer_sentences: 1 + spread % 3, model }
    }

    fn reply(&self, request: &ChatRequest) -> String {
        match request.purpose {
            Purpose::Annotation => annotate(request.slot(slots::TRANSCRIPT)),
            Purpose::Compression => compress(request.slot(slots::QUESTION), request.slot(slots::DOCUMENT)),
            Purpose::Answer => self.answer(request),
            Purpose::QuestionGeneration => {
                let n = request.slot(slots::COUNT).parse().unwrap_or(2);
                questions(request.slot(slots::CONTEXT), n)
            }
            Purpose::ClaimExtraction => claims(request.slot(slots::TEXT)),
            Purpose::ClaimVerdicts => verdicts(
                &numbered_items(request.slot(slots::ANSWER_CLAIMS)),
                &numbered_items(request.slot(slots::REFERENCE_CLAIMS)),
            ),
            Purpose::Other => format!("Received {} characters.", request.last_user_message().len()),
        }
    }

    fn answer(&self, request: &ChatRequest) -> String {
        let question = request.slot(slots::QUESTION);
        let qwords: BTreeSet<String> = text::content_words(question).into_iter().collect();
        let mut scored: Vec<(usize, usize, String, String)> = Vec::new();
        let blocks = labeled_blocks(request.slot(slots::PATIENT_CONTEXT))
            .into_iter()
            .chain(labeled_blocks(request.slot(slots::MEDICAL_KNOWLEDGE)));
        for (label, body) in blocks {
            for s in text::split_sentences(&body) {
                let overlap = text::content_words(s).iter().filter(|w| qwords.contains(*w)).count();
                if overlap > 0 {
                    scored.push((overlap, scored.len(), label.clone(), s.to_string()));
                }
            }
        }
        scored.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        if scored.is_empty() {
            return "The available records do not address this question directly; please ask your care team."
                .to_string();
        }
        let parts: Vec<String> = scored
            .into_iter()
            .take(self.answer_sentences)
            .map(|(_, _, label, s)| format!("{s} [{label}]"))
            .collect();
        format!("Based on your records: {}", parts.join(" "))
    }
}

impl ChatProvider for MockChat {
    fn model_name(&self) -> &str {
        &self.model
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatReply, ProviderError> {
        Ok(ChatReply { content: self.reply(request), model: self.model.clone() })
    }
}

fn has_cue(sentence: &str, cues: &[&str]) -> bool {
    text::tokens(sentence).iter().any(|t| cues.binary_search(&t.as_str()).is_ok())
}

fn annotate(transcript: &str) -> String {
    let mut groups: [Vec<&str>; 3] = Default::default();
    for s in text::split_sentences(transcript) {
        let slot = if has_cue(s, MEDICATION_CUES) {
            2
        } else if has_cue(s, DIAGNOSTIC_CUES) {
            1
        } else {
            0
        };
        groups[slot].push(s);
    }
    let headings = ["Patient history and symptom", "Executed diagnostics", "Prescribed medications & Instruction"];
    let mut out = String::new();
    for (heading, lines) in headings.iter().zip(&groups) {
        out.push_str(heading);
        out.push_str(":\n");
        if lines.is_empty() {
            out.push_str("- The transcript does not mention this category.\n");
        }
        for l in lines {
            out.push_str("- ");
            out.push_str(&text::normalize_whitespace(l));
            out.push('\n');
        }
        out.push('\n');
    }
    out.trim_end().to_string()
}

fn compress(question: &str, document: &str) -> String {
    let qwords: BTreeSet<String> = text::content_words(question).into_iter().collect();
    let kept: Vec<&str> = text::split_sentences(document)
        .into_iter()
        .filter(|s| text::content_words(s).iter().any(|w| qwords.contains(w)))
        .collect();
    if kept.is_empty() {
        NO_RELEVANT_CONTENT.to_string()
    } else {
        kept.join(" ")
    }
}

fn questions(context: &str, n: usize) -> String {
    let mut freq: BTreeMap<String, usize> = BTreeMap::new();
    for w in text::content_words(context) {
        if w.chars().count() > 3 && !w.chars().all(|c| c.is_ascii_digit()) {
            *freq.entry(w).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let templates = [
        "What should I know about my {w}?",
        "How should I manage the {w} mentioned in my records?",
        "Is my {w} something to worry about?",
    ];
    (0..n)
        .map(|i| {
            let word = ranked.get(i).map(|(w, _)| w.as_str()).unwrap_or("condition");
            format!("{}. {}", i + 1, templates[i % templates.len()].replace("{w}", word))
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn claims(text_in: &str) -> String {
    let sentences = text::split_sentences(text_in);
    if sentences.is_empty() {
        return "NONE".to_string();
    }
    sentences
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {}", i + 1, text::normalize_whitespace(s)))
        .collect::<Vec<_>>()
        .join("\n")
}

fn covered(claim: &str, pool: &BTreeSet<String>) -> bool {
    let words = text::content_words(claim);
    if words.is_empty() {
        return true;
    }
    let hits = words.iter().filter(|w| pool.contains(*w)).count();
    hits * 2 >= words.len()
}

fn verdicts(answer_claims: &[String], reference_claims: &[String]) -> String {
    let pool = |claims: &[String]| -> BTreeSet<String> {
        claims.iter().flat_map(|c| text::content_words(c)).collect()
    };
    let (answer_pool, reference_pool) = (pool(answer_claims), pool(reference_claims));
    let mut lines = Vec::new();
    for (i, c) in answer_claims.iter().enumerate() {
        let v = if covered(c, &reference_pool) { "SUPPORTED" } else { "UNSUPPORTED" };
        lines.push(format!("A{}: {v}", i + 1));
    }
    for (i, c) in reference_claims.iter().enumerate() {
        let v = if covered(c, &answer_pool) { "PRESENT" } else { "MISSING" };
        lines.push(format!("R{}: {v}", i + 1));
    }
    lines.join("\n")
}

/// Items of a `1. text` style list; anything else is ignored.
fn numbered_items(list: &str) -> Vec<String> {
    list.lines()
        .filter_map(|l| {
            let l = l.trim();
            let digits = l.chars().take_while(char::is_ascii_digit).count();
            if digits == 0 {
                return None;
            }
            let rest = l[digits..].strip_prefix(['.', ')'])?;
            Some(rest.trim().to_string())
        })
        .collect()
}

/// Splits `[P1] text` style evidence blocks.
fn labeled_blocks(section: &str) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = Vec::new();
    for line in section.lines() {
        let trimmed = line.trim_start();
        if let Some(rest) = trimmed.strip_prefix('[') {
            if let Some((label, body)) = rest.split_once(']') {
                if !label.is_empty() && label.chars().all(|c| c.is_ascii_alphanumeric()) {
                    out.push((label.to_string(), body.trim().to_string()));
                    continue;
                }
            }
        }
        if let Some(last) = out.last_mut() {
            last.1.push('\n');
            last.1.push_str(line);
        }
    }
    out
}
