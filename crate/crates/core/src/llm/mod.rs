//! Chat-completion provider port.
//!
//! Requests carry, besides the OpenAI-compatible wire fields, a [`Purpose`]
//! and the template slots they were rendered from. Neither is sent over the
//! wire or hashed for replay; they let offline implementations answer
//! without re-parsing prompt text.

mod http;
mod mock;
mod replay;

pub use http::HttpChat;
pub use mock::MockChat;
pub use replay::{RecordingChat, ReplayChat};

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::provider::{ProviderError, Reachability};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    Annotation,
    Compression,
    Answer,
    QuestionGeneration,
    ClaimExtraction,
    ClaimVerdicts,
    Other,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: Option<u32>,
    pub purpose: Purpose,
    pub slots: BTreeMap<String, String>,
}

impl ChatRequest {
    pub fn new(model: impl Into<String>, purpose: Purpose, prompt: impl Into<String>) -> Self {
        ChatRequest {
            model: model.into(),
            messages: vec![ChatMessage::user(prompt)],
            temperature: 0.0,
            max_tokens: None,
            purpose,
            slots: BTreeMap::new(),
        }
    }

    pub fn with_slots(mut self, slots: BTreeMap<String, String>) -> Self {
        self.slots = slots;
        self
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = Some(max_tokens);
        self
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn slot(&self, name: &str) -> &str {
        self.slots.get(name).map(String::as_str).unwrap_or("")
    }

    pub fn last_user_message(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }

    /// OpenAI-compatible chat-completion request body.
    pub fn wire_json(&self) -> serde_json::Value {
        let mut body = json!({
            "model": self.model,
            "messages": self.messages,
            "temperature": self.temperature,
        });
        if let Some(max) = self.max_tokens {
            body["max_tokens"] = json!(max);
        }
        body
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatReply {
    pub content: String,
    pub model: String,
}

/// Generation port. Implementations must be callable from many threads.
pub trait ChatProvider: Send + Sync {
    fn model_name(&self) -> &str;

    fn complete(&self, request: &ChatRequest) -> Result<ChatReply, ProviderError>;

    fn probe(&self) -> Reachability {
        Reachability::Offline
    }
}

impl<T: ChatProvider + ?Sized> ChatProvider for std::sync::Arc<T> {
    fn model_name(&self) -> &str {
        (**self).model_name()
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatReply, ProviderError> {
        (**self).complete(request)
    }

    fn probe(&self) -> Reachability {
        (**self).probe()
    }
}

type ReplyFn = dyn Fn(&ChatRequest) -> Result<String, ProviderError> + Send + Sync;

/// Chat provider backed by a closure, with a call counter. Used for
/// scripted fixtures and failure injection.
pub struct FnChat {
    model: String,
    reply: Box<ReplyFn>,
    calls: AtomicUsize,
}

impl FnChat {
    pub fn new(
        model: impl Into<String>,
        reply: impl Fn(&ChatRequest) -> Result<String, ProviderError> + Send + Sync + 'static,
    ) -> Self {
        FnChat { model: model.into(), reply: Box::new(reply), calls: AtomicUsize::new(0) }
    }

    /// Always answers with `text`.
    pub fn constant(model: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        FnChat::new(model, move |_| Ok(text.clone()))
    }

    /// Always fails with `message`.
    pub fn failing(model: impl Into<String>, message: impl Into<String>) -> Self {
        let message = message.into();
        FnChat::new(model, move |_| Err(ProviderError::Injected(message.clone())))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatProvider for FnChat {
    fn model_name(&self) -> &str {
        &self.model
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatReply, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let content = (self.reply)(request)?;
        Ok(ChatReply { content, model: self.model.clone() })
    }
}
