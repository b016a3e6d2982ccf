//! LLM provider abstraction and a scripted mock provider for hermetic runs.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub text: String,
}

impl Message {
    pub fn system(text: impl Into<String>) -> Self {
        Message {
            role: Role::System,
            text: text.into(),
        }
    }

    pub fn user(text: impl Into<String>) -> Self {
        Message {
            role: Role::User,
            text: text.into(),
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Message {
            role: Role::Assistant,
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

impl Default for SamplingParams {
    /// Greedy decoding, as used for every reference run.
    fn default() -> Self {
        SamplingParams {
            temperature: 0.0,
            top_p: None,
            max_tokens: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub messages: Vec<Message>,
    #[serde(default)]
    pub sampling: SamplingParams,
}

impl LlmRequest {
    pub fn new(messages: Vec<Message>) -> Self {
        LlmRequest {
            messages,
            sampling: SamplingParams::default(),
        }
    }

    /// All message texts concatenated, used for substring matching.
    pub fn full_text(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.text.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Stable hex digest of the ordered messages.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for m in &self.messages {
            let role = match m.role {
                Role::System => "system",
                Role::User => "user",
                Role::Assistant => "assistant",
            };
            hasher.update(role.as_bytes());
            hasher.update([0x1f]);
            hasher.update(m.text.as_bytes());
            hasher.update([0x1e]);
        }
        hex::encode(hasher.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{provider} provider error: {message}")]
pub struct ProviderError {
    pub provider: String,
    pub message: String,
    pub retriable: bool,
}

impl ProviderError {
    pub fn retriable(provider: impl Into<String>, message: impl Into<String>) -> Self {
        ProviderError {
            provider: provider.into(),
            message: message.into(),
            retriable: true,
        }
    }

    pub fn fatal(provider: impl Into<String>, message: impl Into<String>) -> Self {
        ProviderError {
            provider: provider.into(),
            message: message.into(),
            retriable: false,
        }
    }
}

pub trait LlmProvider: Send + Sync {
    fn complete(&self, request: &LlmRequest) -> Result<String, ProviderError>;
}

impl<T: LlmProvider + ?Sized> LlmProvider for &T {
    fn complete(&self, request: &LlmRequest) -> Result<String, ProviderError> {
        (**self).complete(request)
    }
}

impl<T: LlmProvider + ?Sized> LlmProvider for Box<T> {
    fn complete(&self, request: &LlmRequest) -> Result<String, ProviderError> {
        (**self).complete(request)
    }
}

impl<T: LlmProvider + ?Sized> LlmProvider for Arc<T> {
    fn complete(&self, request: &LlmRequest) -> Result<String, ProviderError> {
        (**self).complete(request)
    }
}

/// A rule answers any request whose text contains every `contains` needle.
/// Successive matches walk through `responses`; the last one repeats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRule {
    pub contains: Vec<String>,
    pub responses: Vec<String>,
}

/// On-disk transcript for [`MockLlm`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    #[serde(default)]
    pub fingerprints: BTreeMap<String, String>,
    #[serde(default)]
    pub rules: Vec<TranscriptRule>,
    #[serde(default)]
    pub turns: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum TranscriptError {
    #[error("reading transcript {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing transcript {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
}

impl Transcript {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, TranscriptError> {
        let path = path.as_ref();
        let display = path.display().to_string();
        let raw = std::fs::read_to_string(path).map_err(|source| TranscriptError::Io {
            path: display.clone(),
            source,
        })?;
        serde_json::from_str(&raw).map_err(|source| TranscriptError::Parse {
            path: display,
            source,
        })
    }

    pub fn rule(mut self, contains: &[&str], responses: &[&str]) -> Self {
        self.rules.push(TranscriptRule {
            contains: contains.iter().map(|s| s.to_string()).collect(),
            responses: responses.iter().map(|s| s.to_string()).collect(),
        });
        self
    }

    pub fn turn(mut self, response: &str) -> Self {
        self.turns.push(response.to_string());
        self
    }
}

#[derive(Debug, Default)]
struct MockState {
    rule_hits: Vec<usize>,
    next_turn: usize,
    log: Vec<LlmRequest>,
}

/// Scripted provider. Lookup order: exact request fingerprint, then the first
/// matching rule, then the next ordinal turn.
#[derive(Debug)]
pub struct MockLlm {
    transcript: Transcript,
    state: Mutex<MockState>,
}

impl MockLlm {
    pub fn new(transcript: Transcript) -> Self {
        let rule_hits = vec![0; transcript.rules.len()];
        MockLlm {
            transcript,
            state: Mutex::new(MockState {
                rule_hits,
                ..MockState::default()
            }),
        }
    }

    /// Every request seen so far, in arrival order.
    pub fn requests(&self) -> Vec<LlmRequest> {
        self.state.lock().expect("mock state poisoned").log.clone()
    }
}

impl LlmProvider for MockLlm {
    fn complete(&self, request: &LlmRequest) -> Result<String, ProviderError> {
        let mut state = self.state.lock().expect("mock state poisoned");
        state.log.push(request.clone());

        if let Some(reply) = self.transcript.fingerprints.get(&request.fingerprint()) {
            return Ok(reply.clone());
        }
        let text = request.full_text();
        for (i, rule) in self.transcript.rules.iter().enumerate() {
            if rule.responses.is_empty() || !rule.contains.iter().all(|n| text.contains(n.as_str()))
            {
                continue;
            }
            let hit = state.rule_hits[i];
            state.rule_hits[i] += 1;
            let idx = hit.min(rule.responses.len() - 1);
            return Ok(rule.responses[idx].clone());
        }
        if let Some(reply) = self.transcript.turns.get(state.next_turn) {
            state.next_turn += 1;
            return Ok(reply.clone());
        }
        Err(ProviderError::fatal(
            "mock",
            format!("no scripted response for request {}", request.fingerprint()),
        ))
    }
}
