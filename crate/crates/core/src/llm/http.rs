use serde::Deserialize;

use crate::llm::{ChatProvider, ChatReply, ChatRequest};
use crate::provider::{HttpSettings, ProviderError, Reachability};

/// Client for an OpenAI-compatible `/chat/completions` endpoint.
pub struct HttpChat {
    model: String,
    settings: HttpSettings,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    model: Option<String>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

impl HttpChat {
    pub fn new(model: impl Into<String>, settings: HttpSettings) -> Result<Self, ProviderError> {
        let client = settings.client()?;
        Ok(HttpChat { model: model.into(), settings, client })
    }
}

impl ChatProvider for HttpChat {
    fn model_name(&self) -> &str {
        &self.model
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatReply, ProviderError> {
        let raw = self.settings.post_json(&self.client, &request.wire_json())?;
        let parsed: CompletionResponse = serde_json::from_value(raw)
            .map_err(|e| ProviderError::Protocol(format!("unexpected completion response: {e}")))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| ProviderError::Protocol("completion has no choices".into()))?;
        Ok(ChatReply {
            content: choice.message.content.unwrap_or_default(),
            model: parsed.model.unwrap_or_else(|| request.model.clone()),
        })
    }

    fn probe(&self) -> Reachability {
        self.settings.probe()
    }
}
