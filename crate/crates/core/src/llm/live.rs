use std::thread;
use std::time::Duration;

use log::{debug, warn};
use serde_json::{json, Value};

use super::{ChatClient, Conversation, LlmError, ModelConfig, TokenBucket};

/// Environment variable holding the bearer token for live endpoints.
pub const API_KEY_ENV: &str = "COTLOOP_API_KEY";

const BODY_EXCERPT: usize = 500;

/// Client for any OpenAI-compatible chat-completions endpoint.
pub struct LiveClient {
    config: ModelConfig,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
    limiter: TokenBucket,
    backoff: Duration,
}

impl LiveClient {
    /// Reads the API key from [`API_KEY_ENV`] if set.
    pub fn new(config: ModelConfig) -> Result<Self, LlmError> {
        let key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::with_api_key(config, key)
    }

    pub fn with_api_key(config: ModelConfig, api_key: Option<String>) -> Result<Self, LlmError> {
        config.validate()?;
        let http = reqwest::blocking::Client::builder()
            .timeout(config.request_timeout)
            .build()
            .map_err(|e| LlmError::Config(e.to_string()))?;
        Ok(LiveClient {
            limiter: TokenBucket::per_second(config.requests_per_second),
            config,
            api_key,
            http,
            backoff: Duration::from_millis(500),
        })
    }

    /// Base delay for exponential backoff between retries.
    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn url(&self) -> String {
        let base = self.config.endpoint_url.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        }
    }

    fn body(&self, conversation: &Conversation) -> Value {
        json!({
            "model": self.config.model_name,
            "messages": conversation.turns.iter().map(|t| json!({
                "role": t.role.as_str(),
                "content": t.content,
            })).collect::<Vec<_>>(),
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_tokens,
        })
    }
}

enum Attempt {
    Done(String),
    Transient(LlmError),
}

impl LiveClient {
    fn attempt(&self, url: &str, body: &Value, attempt_no: u32) -> Result<Attempt, LlmError> {
        self.limiter.acquire();
        let mut request = self.http.post(url).json(body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = match request.send() {
            Ok(r) => r,
            Err(e) => {
                return Ok(Attempt::Transient(LlmError::Transport {
                    attempts: attempt_no,
                    message: e.to_string(),
                }))
            }
        };
        let status = response.status();
        let text = response.text().map_err(|e| LlmError::Transport {
            attempts: attempt_no,
            message: e.to_string(),
        })?;
        if !status.is_success() {
            let err = LlmError::Status {
                status: status.as_u16(),
                body: text.chars().take(BODY_EXCERPT).collect(),
            };
            return if status.is_server_error() || status.as_u16() == 429 {
                Ok(Attempt::Transient(err))
            } else {
                Err(err)
            };
        }
        extract_content(&text).map(Attempt::Done)
    }
}

impl ChatClient for LiveClient {
    fn model_name(&self) -> &str {
        &self.config.model_name
    }

    fn temperature(&self) -> f64 {
        self.config.temperature
    }

    fn complete(&self, conversation: &Conversation) -> Result<String, LlmError> {
        let url = self.url();
        let body = self.body(conversation);
        let mut attempt_no = 0;
        loop {
            attempt_no += 1;
            match self.attempt(&url, &body, attempt_no)? {
                Attempt::Done(text) => {
                    debug!("completion received after {attempt_no} attempt(s)");
                    return Ok(text);
                }
                Attempt::Transient(err) if attempt_no <= self.config.max_retries => {
                    let delay = self.backoff * 2u32.saturating_pow(attempt_no - 1);
                    warn!("attempt {attempt_no} failed ({err}); retrying in {delay:?}");
                    thread::sleep(delay);
                }
                Attempt::Transient(err) => return Err(err),
            }
        }
    }
}

fn extract_content(body: &str) -> Result<String, LlmError> {
    let value: Value = serde_json::from_str(body)
        .map_err(|e| LlmError::Protocol(format!("response is not JSON: {e}")))?;
    value
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| LlmError::Protocol("missing choices[0].message.content".into()))
}
