//! OpenAI-compatible `chat/completions` client.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::prompt::{DemoSet, TaskSpec, TestCase};

use super::{IclModel, ModelError, Source};

fn default_api_key_env() -> String {
    "OPENAI_API_KEY".to_string()
}

fn default_max_tokens() -> u32 {
    8
}

fn default_timeout_secs() -> f64 {
    60.0
}

fn default_max_retries() -> u32 {
    3
}

fn default_backoff_ms() -> u64 {
    500
}

/// Where and how to query a served model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEndpoint {
    /// e.g. `http://localhost:8000/v1`; `/chat/completions` is appended.
    pub base_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_timeout_secs")]
    pub request_timeout_secs: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// First retry delay; doubles on every further attempt.
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
}

impl ModelEndpoint {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model_name: model_name.into(),
            api_key_env: default_api_key_env(),
            max_tokens: default_max_tokens(),
            temperature: 0.0,
            request_timeout_secs: default_timeout_secs(),
            max_retries: default_max_retries(),
            backoff_base_ms: default_backoff_ms(),
        }
    }

    pub fn completions_url(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }

    /// Decoding parameters as they enter the cache key.
    pub fn decoding_params(&self) -> String {
        format!("temperature={};max_tokens={}", self.temperature, self.max_tokens)
    }

    fn backoff(&self, attempt: u32) -> Duration {
        Duration::from_millis(self.backoff_base_ms.saturating_mul(1u64 << attempt.min(16)))
    }
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    #[serde(default)]
    message: Option<Message>,
    #[serde(default)]
    text: Option<String>,
}

#[derive(Debug, Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

enum Attempt {
    Retry(ModelError),
    Fatal(ModelError),
}

/// Blocking client for one endpoint.
pub struct RemoteModel {
    endpoint: ModelEndpoint,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl RemoteModel {
    /// Reads the API key from the configured environment variable. A missing
    /// variable means requests go out without an `Authorization` header.
    pub fn new(endpoint: ModelEndpoint) -> Result<Self, ModelError> {
        if endpoint.temperature != 0.0 {
            log::warn!(
                "temperature {} is not greedy decoding; kill decisions will not be reproducible",
                endpoint.temperature
            );
        }
        let api_key = std::env::var(&endpoint.api_key_env).ok().filter(|k| !k.is_empty());
        if api_key.is_none() {
            log::warn!("{} is not set; sending unauthenticated requests", endpoint.api_key_env);
        }
        let timeout = Duration::from_secs_f64(endpoint.request_timeout_secs.max(0.001));
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build();
        Ok(Self {
            endpoint,
            api_key,
            agent: ureq::Agent::new_with_config(config),
        })
    }

    pub fn endpoint(&self) -> &ModelEndpoint {
        &self.endpoint
    }

    /// Sends one prompt, retrying transient failures with exponential backoff.
    pub fn complete(&self, prompt: &str) -> Result<String, ModelError> {
        let mut attempt = 0;
        loop {
            match self.attempt(prompt) {
                Ok(text) => return Ok(text),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(e)) => {
                    if attempt >= self.endpoint.max_retries {
                        return Err(e);
                    }
                    let delay = self.endpoint.backoff(attempt);
                    log::debug!("retrying after {delay:?}: {e}");
                    std::thread::sleep(delay);
                    attempt += 1;
                }
            }
        }
    }

    fn attempt(&self, prompt: &str) -> Result<String, Attempt> {
        let body = json!({
            "model": self.endpoint.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.endpoint.temperature,
            "max_tokens": self.endpoint.max_tokens,
        });
        let mut request = self
            .agent
            .post(self.endpoint.completions_url())
            .header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", format!("Bearer {key}"));
        }
        let mut response = match request.send_json(&body) {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => {
                return Err(Attempt::Retry(ModelError::Timeout(Duration::from_secs_f64(
                    self.endpoint.request_timeout_secs,
                ))))
            }
            Err(e) => return Err(Attempt::Retry(ModelError::Endpoint { status: None, message: e.to_string() })),
        };
        let status = response.status().as_u16();
        let text = response.body_mut().read_to_string().map_err(|e| match e {
            ureq::Error::Timeout(_) => Attempt::Retry(ModelError::Timeout(Duration::from_secs_f64(
                self.endpoint.request_timeout_secs,
            ))),
            other => Attempt::Retry(ModelError::Endpoint { status: Some(status), message: other.to_string() }),
        })?;
        match status {
            200..=299 => {}
            401 | 403 => return Err(Attempt::Fatal(ModelError::Auth { status, message: text })),
            408 | 429 | 500..=599 => {
                return Err(Attempt::Retry(ModelError::Endpoint { status: Some(status), message: text }))
            }
            _ => return Err(Attempt::Fatal(ModelError::Endpoint { status: Some(status), message: text })),
        }
        let parsed: CompletionResponse = serde_json::from_str(&text).map_err(|e| {
            Attempt::Fatal(ModelError::Endpoint {
                status: Some(status),
                message: format!("malformed completion body: {e}"),
            })
        })?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.and_then(|m| m.content).or(c.text))
            .ok_or_else(|| {
                Attempt::Fatal(ModelError::Endpoint {
                    status: Some(status),
                    message: "completion has no choices".into(),
                })
            })
    }
}

impl IclModel for RemoteModel {
    fn identity(&self) -> String {
        format!("remote:{}@{}", self.endpoint.model_name, self.endpoint.base_url.trim_end_matches('/'))
    }

    fn decoding_params(&self) -> String {
        self.endpoint.decoding_params()
    }

    fn source(&self) -> Source {
        Source::Remote
    }

    fn respond(&self, _task: &TaskSpec, _demos: &DemoSet, _query: &TestCase, prompt: &str) -> Result<String, ModelError> {
        self.complete(prompt)
    }
}
