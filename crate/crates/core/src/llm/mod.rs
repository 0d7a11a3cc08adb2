//! Chat-completion clients: live HTTP, cassette replay, and cassette recording.

mod cassette;
mod live;
mod rate_limit;

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use crate::prompting::{Conversation, Role, Turn};
pub use cassette::{Cassette, CassetteEntry, RecordingClient, ReplayClient};
pub use live::{LiveClient, API_KEY_ENV};
pub use rate_limit::TokenBucket;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("endpoint returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("unexpected response shape: {0}")]
    Protocol(String),
    #[error("replay miss: no cassette entry for fingerprint {0}")]
    ReplayMiss(String),
    #[error("cassette {path}: {message}")]
    Cassette { path: String, message: String },
    #[error("invalid model config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub endpoint_url: String,
    pub model_name: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub request_timeout: Duration,
    pub max_retries: u32,
    /// Token-bucket refill rate for live requests.
    pub requests_per_second: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            endpoint_url: "https://api.openai.com/v1".into(),
            model_name: "gpt-3.5-turbo".into(),
            temperature: 0.0,
            max_tokens: 1024,
            request_timeout: Duration::from_secs(120),
            max_retries: 3,
            requests_per_second: 2.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), LlmError> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(LlmError::Config(format!(
                "temperature must be a finite value >= 0, got {}",
                self.temperature
            )));
        }
        if !(self.requests_per_second.is_finite() && self.requests_per_second > 0.0) {
            return Err(LlmError::Config("requests_per_second must be > 0".into()));
        }
        Ok(())
    }
}

/// Anything that turns a conversation into assistant text.
pub trait ChatClient: Send + Sync {
    fn model_name(&self) -> &str;

    fn temperature(&self) -> f64 {
        0.0
    }

    fn complete(&self, conversation: &Conversation) -> Result<String, LlmError>;

    fn fingerprint(&self, conversation: &Conversation) -> String {
        fingerprint(self.model_name(), conversation, self.temperature())
    }
}

impl<C: ChatClient + ?Sized> ChatClient for &C {
    fn model_name(&self) -> &str {
        (**self).model_name()
    }
    fn temperature(&self) -> f64 {
        (**self).temperature()
    }
    fn complete(&self, conversation: &Conversation) -> Result<String, LlmError> {
        (**self).complete(conversation)
    }
}

impl<C: ChatClient + ?Sized> ChatClient for std::sync::Arc<C> {
    fn model_name(&self) -> &str {
        (**self).model_name()
    }
    fn temperature(&self) -> f64 {
        (**self).temperature()
    }
    fn complete(&self, conversation: &Conversation) -> Result<String, LlmError> {
        (**self).complete(conversation)
    }
}

/// Canonical request document: sorted keys, serde_json's fixed escaping.
pub fn canonical_request(model_name: &str, conversation: &Conversation, temperature: f64) -> serde_json::Value {
    json!({
        "model": model_name,
        "messages": conversation.turns.iter().map(|t| json!({
            "role": t.role.as_str(),
            "content": t.content,
        })).collect::<Vec<_>>(),
        "temperature": temperature,
    })
}

/// SHA-256 (hex) of the canonical request document.
pub fn fingerprint(model_name: &str, conversation: &Conversation, temperature: f64) -> String {
    let doc = canonical_request(model_name, conversation, temperature).to_string();
    hex::encode(Sha256::digest(doc.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(text: &str) -> Conversation {
        Conversation::new(vec![Turn::user(text)]).unwrap()
    }

    #[test]
    fn fingerprint_is_stable_and_sensitive() {
        let a = fingerprint("m", &conv("hi"), 0.0);
        assert_eq!(a, fingerprint("m", &conv("hi"), 0.0));
        assert_eq!(a.len(), 64);
        assert_ne!(a, fingerprint("m2", &conv("hi"), 0.0));
        assert_ne!(a, fingerprint("m", &conv("hi!"), 0.0));
        assert_ne!(a, fingerprint("m", &conv("hi"), 0.5));
    }

    #[test]
    fn canonical_document_has_sorted_keys() {
        let doc = canonical_request("m", &conv("q\"\n"), 0.0).to_string();
        assert_eq!(
            doc,
            r#"{"messages":[{"content":"q\"\n","role":"user"}],"model":"m","temperature":0.0}"#
        );
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.temperature = -0.1;
        assert!(cfg.validate().is_err());
        cfg.temperature = f64::NAN;
        assert!(cfg.validate().is_err());
    }
}
