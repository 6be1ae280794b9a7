use std::sync::Arc;

use serde_json::json;

use crate::embedding::{EmbeddingProvider, EmbeddingVector};
use crate::provider::ProviderError;
use crate::replay::{request_key, FixtureBook, FixtureKind, FixtureRecord};

/// Canonical request recorded for a single embedded text. Texts are keyed
/// one by one so replay is independent of how inputs were batched.
pub fn embedding_request(model: &str, text: &str) -> serde_json::Value {
    json!({ "model": model, "input": text })
}

/// Serves embeddings previously captured by [`RecordingEmbedder`].
pub struct ReplayEmbedder {
    model: String,
    book: Arc<FixtureBook>,
}

impl ReplayEmbedder {
    pub fn new(model: impl Into<String>, book: Arc<FixtureBook>) -> Self {
        ReplayEmbedder { model: model.into(), book }
    }
}

impl EmbeddingProvider for ReplayEmbedder {
    fn model_name(&self) -> &str {
        &self.model
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        texts
            .iter()
            .map(|t| {
                let key = request_key(&embedding_request(&self.model, t));
                let record = self
                    .book
                    .get(FixtureKind::Embedding, &key)
                    .ok_or(ProviderError::ReplayMiss { key })?;
                serde_json::from_value(record.response)
                    .map_err(|e| ProviderError::Protocol(format!("bad embedding fixture: {e}")))
            })
            .collect()
    }
}

/// Forwards to an inner provider and records every response into a book.
pub struct RecordingEmbedder<P> {
    inner: P,
    book: Arc<FixtureBook>,
}

impl<P: EmbeddingProvider> RecordingEmbedder<P> {
    pub fn new(inner: P, book: Arc<FixtureBook>) -> Self {
        RecordingEmbedder { inner, book }
    }
}

impl<P: EmbeddingProvider> EmbeddingProvider for RecordingEmbedder<P> {
    fn model_name(&self) -> &str {
        self.inner.model_name()
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        let vectors = self.inner.embed(texts)?;
        for (t, v) in texts.iter().zip(&vectors) {
            let request = embedding_request(self.inner.model_name(), t);
            self.book.insert(FixtureRecord {
                kind: FixtureKind::Embedding,
                key: request_key(&request),
                request,
                response: serde_json::to_value(v).expect("vectors serialize"),
            });
        }
        Ok(vectors)
    }
}
