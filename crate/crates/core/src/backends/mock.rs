//! Deterministic scripted backend for offline runs and tests.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use super::{
    request_digest, BackendError, ChatBackend, Conversation, GenerationParams, ModelResponse,
};

type DynamicReply = Box<dyn Fn(&Conversation, &GenerationParams) -> Option<String> + Send + Sync>;

/// Scripted backend. Replies resolve in order: exact digest script, dynamic
/// closure, default reply. A request nothing answers is an "unscripted
/// request" error, so a mock without a default is strict by construction.
pub struct MockBackend {
    id: String,
    script: HashMap<String, String>,
    dynamic: Option<DynamicReply>,
    default_reply: Option<String>,
    calls: AtomicUsize,
}

impl MockBackend {
    /// Strict mock: only scripted digests (added via [`MockBackend::script`])
    /// are answered.
    pub fn new(id: impl Into<String>) -> Self {
        MockBackend {
            id: id.into(),
            script: HashMap::new(),
            dynamic: None,
            default_reply: None,
            calls: AtomicUsize::new(0),
        }
    }

    /// Mock that answers everything with one fixed reply.
    pub fn with_default(reply: impl Into<String>) -> Self {
        let mut mock = MockBackend::new("mock");
        mock.default_reply = Some(reply.into());
        mock
    }

    /// Mock driven by a closure over the whole conversation (e.g. inspecting
    /// attached image bytes). Returning `None` falls through to the default.
    pub fn with_fn(
        f: impl Fn(&Conversation, &GenerationParams) -> Option<String> + Send + Sync + 'static,
    ) -> Self {
        let mut mock = MockBackend::new("mock");
        mock.dynamic = Some(Box::new(f));
        mock
    }

    /// Scripts an exact reply for one request digest.
    pub fn script(mut self, digest: impl Into<String>, reply: impl Into<String>) -> Self {
        self.script.insert(digest.into(), reply.into());
        self
    }

    /// Adds a fallback reply to an existing mock.
    pub fn default_reply(mut self, reply: impl Into<String>) -> Self {
        self.default_reply = Some(reply.into());
        self
    }

    /// How many completions this mock has served (or refused).
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatBackend for MockBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(
        &self,
        conversation: &Conversation,
        params: &GenerationParams,
    ) -> Result<ModelResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let digest = request_digest(&self.id, conversation, params);
        let reply = self
            .script
            .get(&digest)
            .cloned()
            .or_else(|| self.dynamic.as_ref().and_then(|f| f(conversation, params)))
            .or_else(|| self.default_reply.clone())
            .ok_or_else(|| BackendError::Unscripted {
                digest: digest.clone(),
            })?;
        Ok(ModelResponse {
            raw_text: reply,
            backend_id: self.id.clone(),
            params: params.clone(),
            latency_ms: 0,
            retries: 0,
            cache_hit: false,
            request_digest: digest,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::Turn;

    fn conv(text: &str) -> Conversation {
        Conversation::new(vec![Turn::text(text)]).unwrap()
    }

    #[test]
    fn scripted_digest_lookup() {
        let params = GenerationParams::evaluation();
        let request = conv("What is this image?");
        let digest = request_digest("m1", &request, &params);
        let mock = MockBackend::new("m1").script(&digest, "1. normal");
        let response = mock.complete(&request, &params).unwrap();
        assert_eq!(response.raw_text, "1. normal");
        assert_eq!(response.request_digest, digest);
        assert!(!response.cache_hit);
    }

    #[test]
    fn strict_mock_rejects_unscripted_request() {
        let mock = MockBackend::new("m1");
        let err = mock
            .complete(&conv("anything"), &GenerationParams::evaluation())
            .unwrap_err();
        assert!(err.to_string().contains("unscripted request"), "{err}");
        assert_eq!(mock.calls(), 1);
    }

    #[test]
    fn dynamic_closure_sees_conversation() {
        let mock = MockBackend::with_fn(|conversation, _| {
            Some(format!("echo: {}", conversation.turns[0].text))
        });
        let response = mock
            .complete(&conv("hello"), &GenerationParams::tilense())
            .unwrap();
        assert_eq!(response.raw_text, "echo: hello");
    }

    #[test]
    fn closure_none_falls_back_to_default() {
        let mock = MockBackend::with_fn(|c, _| {
            c.turns[0].text.contains("polyp").then(|| "Polyp".to_string())
        })
        .default_reply("Normal");
        let params = GenerationParams::evaluation();
        assert_eq!(mock.complete(&conv("a polyp?"), &params).unwrap().raw_text, "Polyp");
        assert_eq!(mock.complete(&conv("else"), &params).unwrap().raw_text, "Normal");
        assert_eq!(mock.calls(), 2);
    }
}
