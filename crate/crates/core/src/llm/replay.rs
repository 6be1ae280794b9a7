use std::sync::Arc;

use serde_json::json;

use crate::llm::{ChatProvider, ChatReply, ChatRequest};
use crate::provider::ProviderError;
use crate::replay::{request_key, FixtureBook, FixtureKind, FixtureRecord};

/// Serves chat replies recorded earlier, keyed by the hash of the wire request.
pub struct ReplayChat {
    model: String,
    book: Arc<FixtureBook>,
}

impl ReplayChat {
    pub fn new(model: impl Into<String>, book: Arc<FixtureBook>) -> Self {
        ReplayChat { model: model.into(), book }
    }
}

impl ChatProvider for ReplayChat {
    fn model_name(&self) -> &str {
        &self.model
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatReply, ProviderError> {
        let key = request_key(&request.wire_json());
        let record = self.book.get(FixtureKind::Chat, &key).ok_or(ProviderError::ReplayMiss { key })?;
        let content = record.response["content"]
            .as_str()
            .ok_or_else(|| ProviderError::Protocol("chat fixture lacks a content string".into()))?;
        Ok(ChatReply { content: content.to_string(), model: request.model.clone() })
    }
}

/// Forwards to an inner provider and records every reply into a book.
pub struct RecordingChat<P> {
    inner: P,
    book: Arc<FixtureBook>,
}

impl<P: ChatProvider> RecordingChat<P> {
    pub fn new(inner: P, book: Arc<FixtureBook>) -> Self {
        RecordingChat { inner, book }
    }
}

impl<P: ChatProvider> ChatProvider for RecordingChat<P> {
    fn model_name(&self) -> &str {
        self.inner.model_name()
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatReply, ProviderError> {
        let reply = self.inner.complete(request)?;
        let wire = request.wire_json();
        self.book.insert(FixtureRecord {
            kind: FixtureKind::Chat,
            key: request_key(&wire),
            request: wire,
            response: json!({ "content": reply.content }),
        });
        Ok(reply)
    }
}
