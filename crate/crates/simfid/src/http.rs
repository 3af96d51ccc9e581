//! Blocking chat-completion client with bounded retries.
//!
//! One endpoint shape is supported: POST `{base_url}/chat/completions` with a
//! JSON body of `model`, `messages`, `temperature`, and optional
//! `max_tokens`, answering `{"choices": [{"message": {"content": ...}}]}`.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("request to {url} failed after {attempts} attempts: {detail}")]
    Failed {
        url: String,
        attempts: u32,
        detail: String,
    },
    #[error("endpoint returned a malformed payload: {0}")]
    BadPayload(String),
    #[error("endpoint config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    /// Retries after the first attempt; 0 means fail fast.
    pub max_retries: u32,
    pub timeout_secs: u64,
    /// Environment variable read for a bearer token. Unset or empty env means
    /// anonymous requests.
    pub api_key_env: String,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            base_url: "http://localhost:8000/v1".to_string(),
            model: String::new(),
            max_retries: 3,
            timeout_secs: 60,
            api_key_env: "SIMFID_API_KEY".to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, Serialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: ChatRole, content: impl Into<String>) -> Self {
        ChatMessage {
            role,
            content: content.into(),
        }
    }
}

/// Anything that can answer a chat transcript with a completion. Lets the
/// classifier and the dialogue agents swap the HTTP client for test doubles.
pub trait ChatBackend: Send + Sync {
    fn complete(
        &self,
        messages: &[ChatMessage],
        temperature: f64,
        max_tokens: Option<u32>,
    ) -> Result<String, TransportError>;

    /// Stable identifier recorded with every label this backend produces.
    fn id(&self) -> String;
}

pub struct ChatClient {
    config: EndpointConfig,
    http: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
}

#[derive(Deserialize)]
struct ChatResponse {
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

impl ChatClient {
    pub fn new(config: EndpointConfig) -> Result<Self, TransportError> {
        if config.model.is_empty() {
            return Err(TransportError::Config("model must be set".to_string()));
        }
        if config.timeout_secs == 0 {
            return Err(TransportError::Config(
                "timeout_secs must be positive".to_string(),
            ));
        }
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| TransportError::Config(e.to_string()))?;
        Ok(ChatClient { config, http })
    }

    fn url(&self) -> String {
        format!(
            "{}/chat/completions",
            self.config.base_url.trim_end_matches('/')
        )
    }

    fn api_key(&self) -> Option<String> {
        if self.config.api_key_env.is_empty() {
            return None;
        }
        std::env::var(&self.config.api_key_env)
            .ok()
            .filter(|k| !k.is_empty())
    }
}

impl ChatBackend for ChatClient {
    fn complete(
        &self,
        messages: &[ChatMessage],
        temperature: f64,
        max_tokens: Option<u32>,
    ) -> Result<String, TransportError> {
        let url = self.url();
        let body = ChatRequest {
            model: &self.config.model,
            messages,
            temperature,
            max_tokens,
        };
        let attempts = self.config.max_retries + 1;
        let mut last_error = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                // capped exponential backoff; transient 429/5xx usually clear fast
                let millis = (100u64 << (attempt - 1).min(4)).min(2000);
                std::thread::sleep(Duration::from_millis(millis));
            }
            let mut request = self.http.post(&url).json(&body);
            if let Some(key) = self.api_key() {
                request = request.bearer_auth(key);
            }
            match request.send() {
                Ok(response) => {
                    let status = response.status();
                    if status.is_success() {
                        let payload: ChatResponse = response
                            .json()
                            .map_err(|e| TransportError::BadPayload(e.to_string()))?;
                        let choice = payload
                            .choices
                            .into_iter()
                            .next()
                            .ok_or_else(|| {
                                TransportError::BadPayload("no choices in response".to_string())
                            })?;
                        return Ok(choice.message.content);
                    }
                    let retryable = status.as_u16() == 429 || status.is_server_error();
                    last_error = format!("status {status}");
                    if !retryable {
                        return Err(TransportError::Failed {
                            url,
                            attempts: attempt + 1,
                            detail: last_error,
                        });
                    }
                }
                Err(e) => {
                    last_error = e.to_string();
                }
            }
        }
        Err(TransportError::Failed {
            url,
            attempts,
            detail: last_error,
        })
    }

    fn id(&self) -> String {
        self.config.model.clone()
    }
}
