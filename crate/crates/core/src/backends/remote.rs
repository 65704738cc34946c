//! Generic HTTP adapter for chat-with-image APIs.
//!
//! One wire client covers every provider: the request body is a JSON
//! template from config with `$MESSAGES`, `$TEMPERATURE`, `$MAX_TOKENS` and
//! `$SEED` placeholders, and the reply text is pulled out with a slash path
//! such as `choices/0/message/content`. Credentials come from an environment
//! variable named in config, never from the config file itself.

use std::sync::Arc;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::clock::Clock;
use super::limiter::RateLimiter;
use super::{
    media_type, request_digest, BackendError, ChatBackend, Conversation, GenerationParams,
    ModelResponse, Role,
};

fn default_rate_limit() -> u32 {
    60
}
fn default_retry_cap() -> u32 {
    4
}
fn default_timeout_ms() -> u64 {
    30_000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RemoteBackendConfig {
    pub backend_id: String,
    pub endpoint: String,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default = "default_auth_header")]
    pub auth_header: String,
    #[serde(default = "default_auth_prefix")]
    pub auth_prefix: String,
    /// JSON body with placeholder strings; `$SEED` keys are dropped when the
    /// request has no seed.
    pub request_template: Value,
    /// Slash-separated path to the reply text, e.g. `choices/0/message/content`.
    pub response_path: String,
    #[serde(default = "default_rate_limit")]
    pub rate_limit_per_minute: u32,
    #[serde(default = "default_retry_cap")]
    pub retry_cap: u32,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_auth_header() -> String {
    "Authorization".to_string()
}
fn default_auth_prefix() -> String {
    "Bearer ".to_string()
}

/// A config file holding one or more remote backend definitions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendConfigFile {
    pub backends: Vec<RemoteBackendConfig>,
}

impl BackendConfigFile {
    pub fn load(path: &std::path::Path) -> Result<Self, BackendError> {
        let content = std::fs::read_to_string(path)?;
        serde_json::from_str(&content)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))
    }
}

pub struct RemoteBackend {
    config: RemoteBackendConfig,
    client: reqwest::blocking::Client,
    limiter: RateLimiter,
    clock: Arc<dyn Clock>,
}

impl RemoteBackend {
    pub fn new(config: RemoteBackendConfig, clock: Arc<dyn Clock>) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        let limiter = RateLimiter::new(config.rate_limit_per_minute, clock.clone());
        Ok(RemoteBackend {
            config,
            client,
            limiter,
            clock,
        })
    }

    fn auth_value(&self) -> Result<Option<String>, BackendError> {
        let Some(var) = &self.config.auth_env else {
            return Ok(None);
        };
        match std::env::var(var) {
            Ok(key) if !key.is_empty() => Ok(Some(format!("{}{key}", self.config.auth_prefix))),
            _ => Err(BackendError::Auth(format!(
                "credential variable {var} is not set"
            ))),
        }
    }

    fn send_once(&self, body: &Value) -> Result<String, BackendError> {
        let mut request = self
            .client
            .post(&self.config.endpoint)
            .header("content-type", "application/json")
            .json(body);
        if let Some(value) = self.auth_value()? {
            request = request.header(&self.config.auth_header, value);
        }
        let response = request
            .send()
            .map_err(|e| BackendError::Network(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .text()
            .map_err(|e| BackendError::Network(e.to_string()))?;
        match status {
            200..=299 => {
                let value: Value = serde_json::from_str(&text).map_err(|_| {
                    BackendError::MalformedReply {
                        path: self.config.response_path.clone(),
                        snippet: snippet(&text),
                    }
                })?;
                extract_path(&value, &self.config.response_path).ok_or_else(|| {
                    BackendError::MalformedReply {
                        path: self.config.response_path.clone(),
                        snippet: snippet(&text),
                    }
                })
            }
            401 | 403 => Err(BackendError::Auth(format!("HTTP {status}: {}", snippet(&text)))),
            _ => Err(BackendError::Http {
                status,
                snippet: snippet(&text),
            }),
        }
    }
}

impl ChatBackend for RemoteBackend {
    fn id(&self) -> &str {
        &self.config.backend_id
    }

    fn complete(
        &self,
        conversation: &Conversation,
        params: &GenerationParams,
    ) -> Result<ModelResponse, BackendError> {
        let digest = request_digest(&self.config.backend_id, conversation, params);
        let body = instantiate_template(
            &self.config.request_template,
            &build_messages(conversation),
            params,
        );
        let started = self.clock.now_ms();
        let mut attempt: u32 = 0;
        loop {
            self.limiter.acquire();
            match self.send_once(&body) {
                Ok(raw_text) => {
                    return Ok(ModelResponse {
                        raw_text,
                        backend_id: self.config.backend_id.clone(),
                        params: params.clone(),
                        latency_ms: self.clock.now_ms().saturating_sub(started),
                        retries: attempt,
                        cache_hit: false,
                        request_digest: digest,
                    })
                }
                Err(err) if err.is_transient() => {
                    if attempt >= self.config.retry_cap {
                        return Err(BackendError::RetriesExhausted {
                            attempts: attempt + 1,
                            last: err.to_string(),
                        });
                    }
                    attempt += 1;
                    self.clock.sleep_ms(backoff_ms(attempt));
                }
                Err(err) => return Err(err),
            }
        }
    }
}

/// Exponential backoff: 250 ms doubling per retry, capped at 8 s.
fn backoff_ms(attempt: u32) -> u64 {
    (250u64 << (attempt - 1).min(10)).min(8_000)
}

fn snippet(text: &str) -> String {
    let trimmed = text.trim();
    let mut end = trimmed.len().min(200);
    while !trimmed.is_char_boundary(end) {
        end -= 1;
    }
    trimmed[..end].to_string()
}

/// Turns a conversation into chat-completion style messages. Image turns
/// become a two-part content array with the image as a base64 data URL.
pub fn build_messages(conversation: &Conversation) -> Value {
    let messages: Vec<Value> = conversation
        .turns
        .iter()
        .map(|turn| {
            let role = match turn.role {
                Role::User => "user",
                Role::Assistant => "assistant",
            };
            let content = match &turn.image {
                None => json!(turn.text),
                Some(bytes) => json!([
                    {"type": "text", "text": turn.text},
                    {"type": "image_url", "image_url": {"url": format!(
                        "data:{};base64,{}",
                        media_type(bytes),
                        BASE64.encode(bytes)
                    )}}
                ]),
            };
            json!({"role": role, "content": content})
        })
        .collect();
    Value::Array(messages)
}

/// Fills template placeholders. Object keys whose value is `"$SEED"` are
/// dropped entirely when the request carries no seed.
pub fn instantiate_template(template: &Value, messages: &Value, params: &GenerationParams) -> Value {
    match template {
        Value::String(s) => match s.as_str() {
            "$MESSAGES" => messages.clone(),
            "$TEMPERATURE" => json!(params.temperature),
            "$MAX_TOKENS" => json!(params.max_tokens),
            "$SEED" => params.seed.map_or(Value::Null, |seed| json!(seed)),
            _ => template.clone(),
        },
        Value::Object(map) => Value::Object(
            map.iter()
                .filter(|(_, v)| !(params.seed.is_none() && v.as_str() == Some("$SEED")))
                .map(|(k, v)| (k.clone(), instantiate_template(v, messages, params)))
                .collect(),
        ),
        Value::Array(items) => Value::Array(
            items
                .iter()
                .map(|v| instantiate_template(v, messages, params))
                .collect(),
        ),
        _ => template.clone(),
    }
}

/// Walks a slash path through a JSON value; numeric segments index arrays.
pub fn extract_path(value: &Value, path: &str) -> Option<String> {
    let mut current = value;
    for segment in path.split('/') {
        current = match segment.parse::<usize>() {
            Ok(index) => current.as_array()?.get(index)?,
            Err(_) => current.as_object()?.get(segment)?,
        };
    }
    current.as_str().map(str::to_string)
}
