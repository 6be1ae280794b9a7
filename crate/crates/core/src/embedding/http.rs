use serde::Deserialize;
use serde_json::json;

use crate::embedding::{EmbeddingProvider, EmbeddingVector};
use crate::provider::{HttpSettings, ProviderError, Reachability};

/// Client for an OpenAI-compatible `/embeddings` endpoint.
///
/// Request: `{"model": ..., "input": [...]}`. Response: `{"data": [{"index":
/// i, "embedding": [...]}, ...]}`; items are reordered by `index`.
pub struct HttpEmbedder {
    model: String,
    settings: HttpSettings,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingItem>,
}

#[derive(Deserialize)]
struct EmbeddingItem {
    #[serde(default)]
    index: Option<usize>,
    embedding: Vec<f64>,
}

impl HttpEmbedder {
    pub fn new(model: impl Into<String>, settings: HttpSettings) -> Result<Self, ProviderError> {
        let client = settings.client()?;
        Ok(HttpEmbedder { model: model.into(), settings, client })
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn model_name(&self) -> &str {
        &self.model
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        let body = json!({ "model": self.model, "input": texts });
        let raw = self.settings.post_json(&self.client, &body)?;
        let parsed: EmbeddingResponse = serde_json::from_value(raw)
            .map_err(|e| ProviderError::Protocol(format!("unexpected embeddings response: {e}")))?;
        if parsed.data.len() != texts.len() {
            return Err(ProviderError::Protocol(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                parsed.data.len()
            )));
        }
        let mut items: Vec<(usize, Vec<f64>)> = parsed
            .data
            .into_iter()
            .enumerate()
            .map(|(pos, item)| (item.index.unwrap_or(pos), item.embedding))
            .collect();
        items.sort_by_key(|(i, _)| *i);
        items
            .into_iter()
            .map(|(_, v)| EmbeddingVector::new(v).map_err(|e| ProviderError::Protocol(e.to_string())))
            .collect()
    }

    fn probe(&self) -> Reachability {
        self.settings.probe()
    }
}
