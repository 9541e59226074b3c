//! Uniform access to a chat-completion model.
//!
//! [`Gateway`] wraps any [`ChatModel`] backend, enforces the decoding
//! contract (cardinality, non-empty prompts) and bounds the number of
//! in-flight requests. Two backends ship with the crate: [`HttpChatModel`]
//! for chat-completions servers and [`ScriptedChatModel`] for offline,
//! fully deterministic runs.

mod http;
mod scripted;

use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;

pub use http::{HttpChatModel, HttpConfig, RetryPolicy};
pub use scripted::{prompt_hash, task_tag, FixtureEntry, RecordingChatModel, ScriptedChatModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodingMode {
    Greedy,
    BeamSample,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DecodingParams {
    pub mode: DecodingMode,
    pub num_return: u32,
    pub beam_size: u32,
    pub max_new_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

pub const DEFAULT_MAX_NEW_TOKENS: u32 = 256;

impl DecodingParams {
    pub fn greedy() -> Self {
        Self {
            mode: DecodingMode::Greedy,
            num_return: 1,
            beam_size: 1,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            seed: None,
        }
    }

    pub fn beam_sample(num_return: u32, beam_size: u32) -> Result<Self, GatewayError> {
        let params = Self {
            mode: DecodingMode::BeamSample,
            num_return,
            beam_size,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            seed: None,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_max_new_tokens(mut self, max_new_tokens: u32) -> Self {
        self.max_new_tokens = max_new_tokens;
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.num_return == 0 || self.beam_size == 0 || self.max_new_tokens == 0 {
            return Err(GatewayError::InvalidParams(
                "num_return, beam_size and max_new_tokens must be positive".into(),
            ));
        }
        match self.mode {
            DecodingMode::Greedy if self.num_return != 1 => Err(GatewayError::InvalidParams(
                "greedy decoding returns exactly one generation".into(),
            )),
            DecodingMode::BeamSample if self.num_return > self.beam_size => {
                Err(GatewayError::InvalidParams(format!(
                    "num_return {} exceeds beam size {}",
                    self.num_return, self.beam_size
                )))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    pub text: String,
    pub finish_reason: FinishReason,
}

impl Generation {
    /// A generation that ended normally. Empty text is recorded as an error
    /// since a clean stop always carries output.
    pub fn stop(text: impl Into<String>) -> Self {
        let text = text.into();
        let finish_reason = if text.trim().is_empty() {
            FinishReason::Error
        } else {
            FinishReason::Stop
        };
        Self { text, finish_reason }
    }
}

/// How a backend realizes `beam_sample` decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    /// Native beam search with multinomial sampling.
    Beam,
    /// `n` independent samples.
    IndependentSamples,
    /// Fixture replay.
    Scripted,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    #[error("backend returned HTTP {status}: {body}")]
    Status { status: u16, body: String },

    #[error("malformed backend response: {0}")]
    Protocol(String),

    #[error("invalid decoding parameters: {0}")]
    InvalidParams(String),

    #[error("empty prompt")]
    EmptyPrompt,
}

#[async_trait]
pub trait ChatModel: Send + Sync {
    async fn generate(
        &self,
        system_prompt: &str,
        user_prompt: &str,
        params: &DecodingParams,
    ) -> Result<Vec<Generation>, GatewayError>;

    fn sampling_strategy(&self) -> SamplingStrategy;
}

pub const DEFAULT_IN_FLIGHT: usize = 4;

/// Shareable handle used by every pipeline stage.
#[derive(Clone)]
pub struct Gateway {
    model: Arc<dyn ChatModel>,
    permits: Arc<Semaphore>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("strategy", &self.model.sampling_strategy())
            .field("available_permits", &self.permits.available_permits())
            .finish()
    }
}

impl Gateway {
    pub fn new(model: Arc<dyn ChatModel>, in_flight: usize) -> Self {
        Self {
            model,
            permits: Arc::new(Semaphore::new(in_flight.max(1))),
        }
    }

    pub fn scripted(model: ScriptedChatModel) -> Self {
        Self::new(Arc::new(model), DEFAULT_IN_FLIGHT)
    }

    pub fn sampling_strategy(&self) -> SamplingStrategy {
        self.model.sampling_strategy()
    }

    /// Returns between 1 and `params.num_return` generations.
    pub async fn complete(
        &self,
        system_prompt: &str,
        user_prompt: &str,
        params: &DecodingParams,
    ) -> Result<Vec<Generation>, GatewayError> {
        if system_prompt.trim().is_empty() || user_prompt.trim().is_empty() {
            return Err(GatewayError::EmptyPrompt);
        }
        params.validate()?;
        let _permit = self
            .permits
            .acquire()
            .await
            .expect("gateway semaphore is never closed");
        let mut out = self.model.generate(system_prompt, user_prompt, params).await?;
        if out.is_empty() {
            return Err(GatewayError::Protocol("backend returned no choices".into()));
        }
        out.truncate(params.num_return as usize);
        Ok(out)
    }
}
