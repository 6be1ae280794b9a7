//! Synthetic patient questions for building evaluation datasets.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::metrics::parse_numbered_list;
use crate::llm::{ChatMessage, ChatProvider, ChatRequest, Purpose};
use crate::prompts::{slots, PromptSet};
use crate::provider::ProviderError;
use crate::text;

#[derive(Debug, Error)]
pub enum QuestionError {
    #[error("question count must be at least 1")]
    InvalidCount,
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("expected {expected} questions, got {found} after one re-prompt")]
    TooFew { expected: usize, found: usize, raw_reply: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedQuestion {
    pub text: String,
    /// Whether the question shares at least one content word with the
    /// context it was generated from.
    pub grounded: bool,
}

/// Exactly `n` questions about `context`, parsed from a numbered list.
pub fn generate_questions(
    context: &str,
    n: usize,
    llm: &dyn ChatProvider,
    prompts: &PromptSet,
) -> Result<Vec<GeneratedQuestion>, QuestionError> {
    if n == 0 {
        return Err(QuestionError::InvalidCount);
    }
    let values = BTreeMap::from([
        (slots::CONTEXT.to_string(), context.to_string()),
        (slots::COUNT.to_string(), n.to_string()),
    ]);
    let mut request =
        ChatRequest::new(llm.model_name(), Purpose::QuestionGeneration, prompts.questions.render(&values)).with_slots(values);
    let mut reply = llm.complete(&request)?.content;
    let mut items = parse_numbered_list(&reply);
    if items.len() < n {
        request.messages.push(ChatMessage::assistant(reply));
        request.messages.push(ChatMessage::user(prompts.format_retry.text()));
        reply = llm.complete(&request)?.content;
        items = parse_numbered_list(&reply);
        if items.len() < n {
            return Err(QuestionError::TooFew { expected: n, found: items.len(), raw_reply: reply });
        }
    }
    let vocabulary: BTreeSet<String> = text::content_words(context).into_iter().collect();
    Ok(items
        .into_iter()
        .take(n)
        .map(|q| GeneratedQuestion {
            grounded: text::content_words(&q).iter().any(|w| vocabulary.contains(w)),
            text: q,
        })
        .collect())
}
