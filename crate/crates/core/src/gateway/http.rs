//! Chat-completions client over HTTP.

use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{ChatModel, DecodingMode, DecodingParams, FinishReason, Generation, GatewayError, SamplingStrategy};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            initial_backoff: Duration::from_millis(250),
        }
    }
}

impl RetryPolicy {
    fn backoff(&self, attempt: u32) -> Duration {
        self.initial_backoff * 2u32.saturating_pow(attempt.saturating_sub(1))
    }
}

#[derive(Debug, Clone)]
pub struct HttpConfig {
    /// Full URL of the chat-completions endpoint.
    pub url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub temperature: f64,
    pub top_p: f64,
    pub timeout: Duration,
    pub retry: RetryPolicy,
    /// Ask the server for native beam search (`use_beam_search`, `best_of`)
    /// instead of `n` independent samples.
    pub beam_search: bool,
}

impl HttpConfig {
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            model: model.into(),
            api_key: None,
            temperature: 1.0,
            top_p: 1.0,
            timeout: Duration::from_secs(120),
            retry: RetryPolicy::default(),
            beam_search: false,
        }
    }
}

#[derive(Debug, Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [Message<'a>; 2],
    temperature: f64,
    top_p: f64,
    n: u32,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    use_beam_search: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    best_of: Option<u32>,
}

#[derive(Debug, Serialize)]
struct Message<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ChoiceMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

pub struct HttpChatModel {
    config: HttpConfig,
    client: reqwest::Client,
}

impl HttpChatModel {
    pub fn new(config: HttpConfig) -> Result<Self, GatewayError> {
        let client = reqwest::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| GatewayError::Transport {
                attempts: 0,
                message: format!("building HTTP client: {e}"),
            })?;
        Ok(Self { config, client })
    }

    fn request<'a>(&'a self, system: &'a str, user: &'a str, params: &DecodingParams) -> ChatRequest<'a> {
        let greedy = params.mode == DecodingMode::Greedy;
        let beam = !greedy && self.config.beam_search;
        ChatRequest {
            model: &self.config.model,
            messages: [
                Message { role: "system", content: system },
                Message { role: "user", content: user },
            ],
            temperature: if greedy { 0.0 } else { self.config.temperature },
            top_p: if greedy { 1.0 } else { self.config.top_p },
            n: params.num_return,
            max_tokens: params.max_new_tokens,
            seed: params.seed,
            use_beam_search: beam.then_some(true),
            best_of: beam.then_some(params.beam_size),
        }
    }

    async fn attempt(&self, body: &ChatRequest<'_>) -> Result<Vec<Generation>, Attempt> {
        let mut req = self.client.post(&self.config.url).json(body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().await.map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status();
        let bytes = resp
            .bytes()
            .await
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(Attempt::Retry(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(GatewayError::Status {
                status: status.as_u16(),
                body: String::from_utf8_lossy(&bytes).chars().take(512).collect(),
            }));
        }
        let parsed: ChatResponse = serde_json::from_slice(&bytes)
            .map_err(|e| Attempt::Fatal(GatewayError::Protocol(e.to_string())))?;
        if parsed.choices.is_empty() {
            return Err(Attempt::Fatal(GatewayError::Protocol(
                "response has no choices".into(),
            )));
        }
        Ok(parsed
            .choices
            .into_iter()
            .map(|c| {
                let text = c.message.content.unwrap_or_default();
                match c.finish_reason.as_deref() {
                    Some("length") => Generation {
                        text,
                        finish_reason: FinishReason::Length,
                    },
                    Some("error") | Some("content_filter") => Generation {
                        text,
                        finish_reason: FinishReason::Error,
                    },
                    _ => Generation::stop(text),
                }
            })
            .collect())
    }
}

enum Attempt {
    Retry(String),
    Fatal(GatewayError),
}

#[async_trait]
impl ChatModel for HttpChatModel {
    async fn generate(
        &self,
        system_prompt: &str,
        user_prompt: &str,
        params: &DecodingParams,
    ) -> Result<Vec<Generation>, GatewayError> {
        let body = self.request(system_prompt, user_prompt, params);
        let attempts = self.config.retry.attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=attempts {
            match self.attempt(&body).await {
                Ok(gens) => return Ok(gens),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => {
                    log::debug!("chat request attempt {attempt}/{attempts} failed: {msg}");
                    last = msg;
                    if attempt < attempts {
                        tokio::time::sleep(self.config.retry.backoff(attempt)).await;
                    }
                }
            }
        }
        Err(GatewayError::Transport {
            attempts,
            message: last,
        })
    }

    fn sampling_strategy(&self) -> SamplingStrategy {
        if self.config.beam_search {
            SamplingStrategy::Beam
        } else {
            SamplingStrategy::IndependentSamples
        }
    }
}
