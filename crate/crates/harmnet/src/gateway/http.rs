//! OpenAI-compatible HTTP transport: `/chat/completions` and `/embeddings`.

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use crate::error::{Error, Result};
use crate::gateway::{Backend, BackendChatRequest, ModelEndpoint};

pub struct HttpBackend {
    client: reqwest::blocking::Client,
    base_url: String,
    api_key: Option<String>,
}

#[derive(Deserialize)]
struct ChatCompletionResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    content: String,
}

#[derive(Deserialize)]
struct EmbeddingsResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

impl HttpBackend {
    pub fn new(config: &ModelEndpoint) -> Result<Self> {
        let base_url = config
            .base_url
            .as_deref()
            .ok_or_else(|| {
                Error::EndpointMisconfigured(format!("endpoint '{}' has no base_url", config.name))
            })?
            .trim_end_matches('/')
            .to_string();
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::transport(&config.name, format!("client construction: {e}")))?;
        let api_key = std::env::var(config.api_key_var()).ok();
        Ok(Self {
            client,
            base_url,
            api_key,
        })
    }

    fn post(&self, endpoint: &ModelEndpoint, path: &str, body: serde_json::Value) -> Result<String> {
        let url = format!("{}{path}", self.base_url);
        let mut req = self.client.post(&url).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| Error::transport(&endpoint.name, e.to_string()))?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| Error::transport(&endpoint.name, e.to_string()))?;
        if status.is_success() {
            Ok(text)
        } else if status.as_u16() == 429 || status.is_server_error() {
            Err(Error::transport(
                &endpoint.name,
                format!("HTTP {status}: {}", truncate(&text, 200)),
            ))
        } else {
            Err(Error::EndpointMisconfigured(format!(
                "endpoint '{}': HTTP {status}: {}",
                endpoint.name,
                truncate(&text, 200)
            )))
        }
    }
}

fn truncate(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((idx, _)) => &s[..idx],
        None => s,
    }
}

impl Backend for HttpBackend {
    fn chat(&self, req: &BackendChatRequest<'_>) -> Result<String> {
        let messages: Vec<serde_json::Value> = req
            .history
            .iter()
            .map(|m| json!({"role": m.role.as_str(), "content": m.text}))
            .collect();
        let body = json!({
            "model": req.endpoint.model_id,
            "messages": messages,
            "seed": req.seed,
        });
        let text = self.post(req.endpoint, "/chat/completions", body)?;
        let parsed: ChatCompletionResponse = serde_json::from_str(&text)
            .map_err(|e| Error::transport(&req.endpoint.name, format!("bad response body: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| Error::transport(&req.endpoint.name, "response had no choices"))
    }

    fn embed(&self, endpoint: &ModelEndpoint, text: &str) -> Result<Vec<f64>> {
        let body = json!({
            "model": endpoint.model_id,
            "input": text,
        });
        let resp = self.post(endpoint, "/embeddings", body)?;
        let parsed: EmbeddingsResponse = serde_json::from_str(&resp)
            .map_err(|e| Error::transport(&endpoint.name, format!("bad response body: {e}")))?;
        parsed
            .data
            .into_iter()
            .next()
            .map(|d| d.embedding)
            .ok_or_else(|| Error::transport(&endpoint.name, "response had no embedding data"))
    }
}
