//! Chat-with-image backends behind one trait, plus the plumbing every run
//! shares: request digests, a response cache, a rate limiter, retries, and a
//! call ledger.

mod cache;
mod clock;
mod ledger;
mod limiter;
mod mock;
mod remote;

pub use cache::ResponseCache;
pub use clock::{Clock, SystemClock, VirtualClock};
pub use ledger::{LedgerEntry, LedgerOutcome, RunLedger};
pub use limiter::RateLimiter;
pub use mock::MockBackend;
pub use remote::{
    build_messages, extract_path, instantiate_template, BackendConfigFile, RemoteBackend,
    RemoteBackendConfig,
};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Sampling settings for one request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl GenerationParams {
    /// Preset for scored evaluation runs: seeded for cache-friendly replay.
    pub fn evaluation() -> Self {
        GenerationParams {
            temperature: 1.0,
            max_tokens: 512,
            seed: Some(123),
        }
    }

    /// Preset for occlusion probing: deliberately seedless so repeated
    /// queries sample the model's genuine response distribution.
    pub fn tilense() -> Self {
        GenerationParams {
            temperature: 1.0,
            max_tokens: 300,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

/// One message in a conversation. At most one turn in a conversation may
/// carry an image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<Vec<u8>>,
}

impl Turn {
    pub fn text(text: impl Into<String>) -> Self {
        Turn {
            role: Role::User,
            text: text.into(),
            image: None,
        }
    }

    pub fn with_image(text: impl Into<String>, image: Vec<u8>) -> Self {
        Turn {
            role: Role::User,
            text: text.into(),
            image: Some(image),
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Turn {
            role: Role::Assistant,
            text: text.into(),
            image: None,
        }
    }
}

/// An ordered multi-turn exchange within one chat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub turns: Vec<Turn>,
}

impl Conversation {
    /// Validates: at least one turn, no empty text, at most one image.
    pub fn new(turns: Vec<Turn>) -> Result<Self, BackendError> {
        if turns.is_empty() {
            return Err(BackendError::InvalidConversation(
                "conversation needs at least one turn".into(),
            ));
        }
        if let Some(i) = turns.iter().position(|t| t.text.trim().is_empty()) {
            return Err(BackendError::InvalidConversation(format!(
                "turn {i} has empty text"
            )));
        }
        let images = turns.iter().filter(|t| t.image.is_some()).count();
        if images > 1 {
            return Err(BackendError::InvalidConversation(format!(
                "{images} images attached; at most one allowed"
            )));
        }
        Ok(Conversation { turns })
    }

    /// Appends the model's reply and a follow-up question.
    pub fn extended(&self, reply: &str, follow_up: Turn) -> Result<Self, BackendError> {
        let mut turns = self.turns.clone();
        turns.push(Turn::assistant(reply));
        turns.push(follow_up);
        Conversation::new(turns)
    }
}

/// One completed request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub raw_text: String,
    pub backend_id: String,
    pub params: GenerationParams,
    pub latency_ms: u64,
    pub retries: u32,
    pub cache_hit: bool,
    pub request_digest: String,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("invalid conversation: {0}")]
    InvalidConversation(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("HTTP {status}: {snippet}")]
    Http { status: u16, snippet: String },
    #[error("network error: {0}")]
    Network(String),
    #[error("reply did not contain text at {path}: {snippet}")]
    MalformedReply { path: String, snippet: String },
    #[error("unscripted request: no reply for digest {digest}")]
    Unscripted { digest: String },
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl BackendError {
    /// Worth retrying: timeouts, connection failures, HTTP 408/429/5xx.
    pub fn is_transient(&self) -> bool {
        match self {
            BackendError::Network(_) => true,
            BackendError::Http { status, .. } => {
                matches!(status, 408 | 429) || (500..=599).contains(status)
            }
            _ => false,
        }
    }
}

/// A chat backend accepting a conversation (optionally with one image) and
/// returning free text.
pub trait ChatBackend: Send + Sync {
    fn id(&self) -> &str;
    fn complete(
        &self,
        conversation: &Conversation,
        params: &GenerationParams,
    ) -> Result<ModelResponse, BackendError>;
}

/// Content hash identifying a request: backend id, sampling params, and
/// every turn's role, text, and attached image bytes. Stable across runs.
pub fn request_digest(
    backend_id: &str,
    conversation: &Conversation,
    params: &GenerationParams,
) -> String {
    let mut hasher = Sha256::new();
    hasher.update(backend_id.as_bytes());
    hasher.update([0]);
    hasher.update(params.temperature.to_le_bytes());
    hasher.update(params.max_tokens.to_le_bytes());
    match params.seed {
        Some(seed) => {
            hasher.update([1]);
            hasher.update(seed.to_le_bytes());
        }
        None => hasher.update([0]),
    }
    for turn in &conversation.turns {
        hasher.update([match turn.role {
            Role::User => b'u',
            Role::Assistant => b'a',
        }]);
        hasher.update((turn.text.len() as u64).to_le_bytes());
        hasher.update(turn.text.as_bytes());
        match &turn.image {
            Some(bytes) => {
                hasher.update((bytes.len() as u64).to_le_bytes());
                hasher.update(bytes);
            }
            None => hasher.update(0u64.to_le_bytes()),
        }
    }
    hex::encode(hasher.finalize())
}

/// Media type by magic bytes; used when encoding images into requests.
pub fn media_type(bytes: &[u8]) -> &'static str {
    if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        "image/png"
    } else if bytes.starts_with(&[0xFF, 0xD8]) {
        "image/jpeg"
    } else {
        "application/octet-stream"
    }
}

/// How the response cache participates in a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CacheMode {
    /// Read hits for seeded requests only; write everything. Seedless
    /// requests stay live so repeated sampling remains stochastic.
    Normal,
    /// Read hits even for seedless requests (deterministic replay).
    Replay,
    /// No reads, no writes.
    Off,
}

/// Completion with caching and ledgering around any backend.
///
/// Every live (non-cache-hit) call lands in the ledger exactly once,
/// including failures.
pub fn cached_complete(
    cache: Option<&ResponseCache>,
    mode: CacheMode,
    backend: &dyn ChatBackend,
    conversation: &Conversation,
    params: &GenerationParams,
    run_ledger: Option<&RunLedger>,
) -> Result<ModelResponse, BackendError> {
    let digest = request_digest(backend.id(), conversation, params);
    let readable = match mode {
        CacheMode::Normal => params.seed.is_some(),
        CacheMode::Replay => true,
        CacheMode::Off => false,
    };
    if readable {
        if let Some(raw_text) = cache.and_then(|c| c.get(&digest)) {
            return Ok(ModelResponse {
                raw_text,
                backend_id: backend.id().to_string(),
                params: params.clone(),
                latency_ms: 0,
                retries: 0,
                cache_hit: true,
                request_digest: digest,
            });
        }
    }
    match backend.complete(conversation, params) {
        Ok(response) => {
            if mode != CacheMode::Off {
                if let Some(cache) = cache {
                    cache.put(&digest, &response.raw_text)?;
                }
            }
            if let Some(ledger) = run_ledger {
                ledger.record(&LedgerEntry::ok(
                    &response.backend_id,
                    &response.request_digest,
                    response.latency_ms,
                    response.retries,
                ))?;
            }
            Ok(response)
        }
        Err(err) => {
            if let Some(ledger) = run_ledger {
                ledger.record(&LedgerEntry::error(backend.id(), &digest, err.to_string()))?;
            }
            Err(err)
        }
    }
}
