//! Inference backends.
//!
//! [`HttpBackend`] speaks the OpenAI-compatible chat-completions protocol
//! that local model servers expose. [`MockBackend`] replays a script keyed
//! by `session_id/item_id` for deterministic tests.

mod http;
mod mock;

use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompting::PromptBundle;

pub use http::HttpBackend;
pub use mock::{MockBackend, MockScript, DEFAULT_MOCK_TEXT};

pub const MAX_RETRIES_LIMIT: u32 = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("request timed out")]
    BackendTimeout,
    #[error("backend unreachable: {0}")]
    BackendUnreachable(String),
    #[error("backend answered with HTTP {0}")]
    HttpStatus(u16),
    #[error("malformed completion response: {0}")]
    MalformedResponse(String),
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted {
        attempts: u32,
        last: Box<BackendError>,
    },
    #[error("invalid backend config: {0}")]
    InvalidConfig(String),
}

impl BackendError {
    /// Transport-level failures that warrant another attempt.
    pub fn is_retryable(&self) -> bool {
        match self {
            Self::BackendTimeout | Self::BackendUnreachable(_) => true,
            Self::HttpStatus(code) => *code >= 500 || *code == 429,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub base_url: Option<String>,
    pub model_id: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub request_timeout_s: f64,
    pub max_retries: u32,
    pub max_in_flight: usize,
    /// First retry delay; each further retry doubles it.
    pub backoff_base_ms: u64,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            base_url: None,
            model_id: "mock".into(),
            temperature: 0.0,
            max_output_tokens: 512,
            request_timeout_s: 120.0,
            max_retries: 3,
            max_in_flight: 4,
            backoff_base_ms: 1000,
            api_key: None,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |m: &str| Err(BackendError::InvalidConfig(m.to_string()));
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return bad("temperature must be >= 0");
        }
        if self.max_retries > MAX_RETRIES_LIMIT {
            return bad("max_retries must be <= 5");
        }
        if self.max_in_flight == 0 {
            return bad("max_in_flight must be positive");
        }
        if self.max_output_tokens == 0 {
            return bad("max_output_tokens must be positive");
        }
        if self.request_timeout_s.is_nan() || self.request_timeout_s <= 0.0 {
            return bad("request_timeout_s must be positive");
        }
        if self.kind == BackendKind::Http && self.base_url.as_deref().unwrap_or("").is_empty() {
            return bad("http backend needs base_url");
        }
        Ok(())
    }

    pub fn request_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.request_timeout_s)
    }

    /// Delay before retry number `retry` (1-based): base * 2^(retry-1).
    pub fn backoff_delay(&self, retry: u32) -> Duration {
        let factor = 1u64 << (retry.saturating_sub(1)).min(20);
        Duration::from_millis(self.backoff_base_ms.saturating_mul(factor))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawCompletion {
    pub item_id: String,
    pub text: String,
    pub latency_ms: u64,
    pub attempt: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "problem", content = "detail", rename_all = "snake_case")]
pub enum HealthProblem {
    ModelNotServed(String),
    BackendUnreachable(String),
    HttpStatus(u16),
    MalformedListing(String),
}

impl HealthReport {
    pub fn describe(&self) -> String {
        match &self.problem {
            Some(p) => p.to_string(),
            None if self.healthy => "healthy".into(),
            None => "unhealthy".into(),
        }
    }
}

impl fmt::Display for HealthProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ModelNotServed(m) => write!(f, "model {m:?} is not served by the backend"),
            Self::BackendUnreachable(d) => write!(f, "backend unreachable: {d}"),
            Self::HttpStatus(c) => write!(f, "model listing returned HTTP {c}"),
            Self::MalformedListing(d) => write!(f, "malformed model listing: {d}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthReport {
    pub healthy: bool,
    pub problem: Option<HealthProblem>,
    pub models: Vec<String>,
}

impl HealthReport {
    pub fn ok(models: Vec<String>) -> Self {
        Self {
            healthy: true,
            problem: None,
            models,
        }
    }

    pub fn unhealthy(problem: HealthProblem) -> Self {
        Self {
            healthy: false,
            problem: Some(problem),
            models: Vec::new(),
        }
    }
}

pub trait Backend: Send + Sync {
    /// Label used in reports, e.g. the served model name.
    fn label(&self) -> String;

    fn complete_text(
        &self,
        session_id: &str,
        item_id: &str,
        prompt: &str,
    ) -> Result<RawCompletion, BackendError>;

    fn complete(&self, bundle: &PromptBundle) -> Result<RawCompletion, BackendError> {
        self.complete_text(&bundle.session_id, &bundle.item_id, &bundle.rendered_text)
    }

    fn healthcheck(&self) -> HealthReport;
}
