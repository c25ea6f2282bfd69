//! Chat-completions client for OpenAI-compatible endpoints.

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{Backend, CompletionRequest, GatewayError};

pub const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";
/// Environment variable holding the bearer token.
pub const API_KEY_ENV: &str = "PROCUT_API_KEY";

pub struct OpenAiBackend {
    base_url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: Option<String>,
}

impl OpenAiBackend {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .http_status_as_error(false)
            .build()
            .into();
        OpenAiBackend {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
            agent,
        }
    }

    /// Reads the token from [`API_KEY_ENV`].
    pub fn from_env(base_url: impl Into<String>) -> Self {
        Self::new(base_url, std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()))
    }

    pub fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.base_url)
    }
}

impl Backend for OpenAiBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<String, GatewayError> {
        let body = json!({
            "model": req.model,
            "messages": [{"role": "user", "content": req.prompt}],
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        });
        let mut call = self.agent.post(self.endpoint());
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = call.send_json(&body).map_err(|e| match e {
            ureq::Error::Timeout(_) => GatewayError::Timeout,
            other => GatewayError::Transport(other.to_string()),
        })?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| GatewayError::Malformed(e.to_string()))?;
        match status {
            200..=299 => {}
            429 => return Err(GatewayError::RateLimited),
            _ => return Err(GatewayError::Http { status, body: text }),
        }
        let parsed: ChatResponse =
            serde_json::from_str(&text).map_err(|e| GatewayError::Malformed(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| GatewayError::Malformed("response has no message content".into()))
    }
}
