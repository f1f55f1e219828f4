//! Paraphrase generation through an OpenAI-compatible chat-completions
//! endpoint, and a provider that turns the paraphrases into embeddings.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use prss_core::diffusion::{ConditionEmbedding, EmbeddingRole};
use prss_core::semantic_search::AlternativeProvider;

use crate::wire::RemoteDenoiser;

/// Shipped verbatim; the request must carry these exact bytes.
pub const SYSTEM_INSTRUCTION: &str = include_str!("../resources/system_instruction.txt");
pub const API_KEY_ENV: &str = "PRSS_LLM_API_KEY";
pub const DEFAULT_BASE_URL: &str = "https://api.openai.com";
pub const MAX_TOKENS: u32 = 750;
pub const TEMPERATURE: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LlmError {
    #[error("provider unavailable (offline mode)")]
    ProviderUnavailable,
    #[error("API key missing: set {0}")]
    MissingApiKey(String),
    #[error("authentication rejected (HTTP {status}): {body}")]
    Auth { status: u16, body: String },
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("transport: {0}")]
    Transport(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlmConfig {
    pub base_url: String,
    pub model: String,
    pub api_key_env: String,
    pub offline: bool,
    /// Retries after the first attempt for transient failures.
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub timeout_ms: u64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            base_url: DEFAULT_BASE_URL.to_string(),
            model: "gpt-4".to_string(),
            api_key_env: API_KEY_ENV.to_string(),
            offline: false,
            max_retries: 3,
            backoff_ms: 500,
            timeout_ms: 60_000,
        }
    }
}

pub fn request_body(model: &str, prompt: &str) -> serde_json::Value {
    json!({
        "model": model,
        "messages": [
            {"role": "system", "content": SYSTEM_INSTRUCTION},
            {"role": "user", "content": prompt},
        ],
        "max_tokens": MAX_TOKENS,
        "temperature": TEMPERATURE,
        "n": 1,
    })
}

#[derive(Deserialize)]
struct Completion {
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

enum Attempt {
    Done(String),
    Transient(LlmError),
    Fatal(LlmError),
}

pub struct LlmClient {
    config: LlmConfig,
    api_key: String,
    agent: ureq::Agent,
}

impl LlmClient {
    pub fn new(config: LlmConfig, api_key: String) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build();
        Self { config, api_key, agent }
    }

    pub fn from_env(config: LlmConfig) -> Result<Self, LlmError> {
        let key = std::env::var(&config.api_key_env)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| LlmError::MissingApiKey(config.api_key_env.clone()))?;
        Ok(Self::new(config, key))
    }

    fn endpoint(&self) -> String {
        format!("{}/v1/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn attempt(&self, body: &serde_json::Value) -> Attempt {
        let resp = self
            .agent
            .post(&self.endpoint())
            .set("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(body.clone());
        match resp {
            Ok(r) => match r.into_json::<Completion>() {
                Ok(c) => {
                    let text = c
                        .choices
                        .into_iter()
                        .next()
                        .and_then(|ch| ch.message.content)
                        .map(|s| s.trim().to_string())
                        .unwrap_or_default();
                    if text.is_empty() {
                        Attempt::Fatal(LlmError::Malformed("no completion text".into()))
                    } else {
                        Attempt::Done(text)
                    }
                }
                Err(e) => Attempt::Fatal(LlmError::Malformed(e.to_string())),
            },
            Err(ureq::Error::Status(status, r)) => {
                let body = r.into_string().unwrap_or_default();
                match status {
                    401 | 403 => Attempt::Fatal(LlmError::Auth { status, body }),
                    429 => Attempt::Transient(LlmError::RateLimited { attempts: 0 }),
                    500..=599 => Attempt::Transient(LlmError::Http { status, body }),
                    _ => Attempt::Fatal(LlmError::Http { status, body }),
                }
            }
            Err(ureq::Error::Transport(t)) => Attempt::Transient(LlmError::Transport(t.to_string())),
        }
    }

    /// One paraphrase; transient failures back off `backoff_ms * 2^k`.
    pub fn paraphrase(&self, prompt: &str) -> Result<String, LlmError> {
        let body = request_body(&self.config.model, prompt);
        let attempts = self.config.max_retries + 1;
        let mut last = LlmError::Transport("no attempt made".into());
        for k in 0..attempts {
            if k > 0 {
                std::thread::sleep(Duration::from_millis(self.config.backoff_ms << (k - 1)));
            }
            match self.attempt(&body) {
                Attempt::Done(text) => return Ok(text),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Transient(e) => last = e,
            }
        }
        Err(match last {
            LlmError::RateLimited { .. } => LlmError::RateLimited { attempts },
            other => other,
        })
    }

    pub fn generate(&self, prompt: &str, count: usize) -> Result<Vec<String>, LlmError> {
        (0..count).map(|_| self.paraphrase(prompt)).collect()
    }
}

/// Issues `count` requests, one paraphrase each.
pub fn llm_generate_alternatives(prompt: &str, count: usize, config: &LlmConfig) -> Result<Vec<String>, LlmError> {
    if count == 0 {
        return Ok(Vec::new());
    }
    if config.offline {
        return Err(LlmError::ProviderUnavailable);
    }
    LlmClient::from_env(config.clone())?.generate(prompt, count)
}

/// Text to embedding, e.g. the `encode` op of a remote denoiser.
pub trait TextEncoder {
    fn encode_text(&self, text: &str) -> prss_core::Result<Vec<f64>>;
}

impl TextEncoder for RemoteDenoiser {
    fn encode_text(&self, text: &str) -> prss_core::Result<Vec<f64>> {
        self.encode(text).map_err(|e| prss_core::Error::Backend(e.to_string()))
    }
}

/// Yields paraphrases in order, encoding each only when the search asks for it.
pub struct TextProvider<'a, E: TextEncoder + ?Sized> {
    texts: Vec<String>,
    encoder: &'a E,
}

impl<'a, E: TextEncoder + ?Sized> TextProvider<'a, E> {
    pub fn new(texts: Vec<String>, encoder: &'a E) -> Self {
        Self { texts, encoder }
    }
}

impl<E: TextEncoder + ?Sized> AlternativeProvider for TextProvider<'_, E> {
    fn next_alternative(&mut self, index: usize) -> prss_core::Result<Option<ConditionEmbedding>> {
        match self.texts.get(index) {
            None => Ok(None),
            Some(text) => {
                let v = self.encoder.encode_text(text)?;
                Ok(Some(ConditionEmbedding::new(v, EmbeddingRole::Alternative)?))
            }
        }
    }
}
