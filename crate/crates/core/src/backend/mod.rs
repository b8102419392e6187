//! Vision-language completion backends and structured-output parsing.
//!
//! [`VlmBackend`] is the uniform client contract. [`ChatCompletionsBackend`]
//! talks to a chat-completions style HTTP endpoint; [`MockBackend`] answers
//! deterministically for offline runs and tests.

mod mock;
mod parse;
mod remote;
mod retry;

use std::sync::{Arc, Mutex};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompting::{SchemaId, StrategyId};

pub use mock::{GroundTruth, MockBackend, MockBehavior, MockScript, SampleTruth, ScriptEntry, ScriptMatch};
pub use parse::{
    json_candidates, parse_output, parse_predictions, render_output, render_predictions, ParseReport,
    StageOutput,
};
pub use remote::{ChatCompletionsBackend, RemoteConfig};
pub use retry::RetryPolicy;

/// Path or URL of an input image.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageRef(pub String);

impl ImageRef {
    pub fn new(s: impl Into<String>) -> Self {
        Self(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_url(&self) -> bool {
        let s = self.0.as_str();
        s.starts_with("http://") || s.starts_with("https://") || s.starts_with("data:")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub temperature: f32,
    pub max_output_tokens: u32,
}

impl Default for Decoding {
    /// Deterministic-style decoding with a generous completion cap. The
    /// evaluated models' actual settings are unknown.
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_output_tokens: 4096,
        }
    }
}

/// Pipeline-side description of a request. Remote backends ignore it; mocks
/// use it to decide what to answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestMeta {
    pub sample_id: String,
    pub strategy: StrategyId,
    pub stage: String,
    pub persona: Option<String>,
    pub label_scope: Vec<String>,
    pub schema: SchemaId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VlmRequest {
    /// Unique within a run.
    pub request_id: String,
    pub prompt_text: String,
    /// At most one image per stage call.
    pub images: Vec<ImageRef>,
    pub decoding: Decoding,
    pub meta: RequestMeta,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawResponse {
    pub text: String,
    pub usage: Usage,
    pub latency_ms: u64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend misconfigured: {0}")]
    Config(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("authentication rejected (HTTP {status})")]
    Auth { status: u16 },
    #[error("rate limited after {attempts} attempts")]
    RateLimited {
        attempts: u32,
        retry_after_ms: Option<u64>,
    },
    #[error("request timed out after {attempts} attempts")]
    Timeout { attempts: u32 },
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("unexpected response body: {0}")]
    BadResponse(String),
    #[error("no script entry matches stage `{stage}` of sample `{sample_id}`")]
    NoScriptMatch { stage: String, sample_id: String },
    #[error("oracle mock has no ground truth for sample `{0}`")]
    MissingGroundTruth(String),
}

#[async_trait]
pub trait VlmBackend: Send + Sync {
    /// Short identifier recorded in run artifacts.
    fn name(&self) -> &str;

    async fn complete(&self, request: &VlmRequest) -> Result<RawResponse, BackendError>;
}

#[async_trait]
impl<B: VlmBackend + ?Sized> VlmBackend for Arc<B> {
    fn name(&self) -> &str {
        (**self).name()
    }

    async fn complete(&self, request: &VlmRequest) -> Result<RawResponse, BackendError> {
        (**self).complete(request).await
    }
}

pub(crate) fn check_request(request: &VlmRequest) -> Result<(), BackendError> {
    if request.images.len() > 1 {
        return Err(BackendError::InvalidRequest(format!(
            "request `{}` attaches {} images; at most one is allowed per stage call",
            request.request_id,
            request.images.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RecordedCall {
    pub request_id: String,
    pub sample_id: String,
    pub stage: String,
    pub images: usize,
    pub prompt_text: String,
}

/// Wraps a backend and records every request it sees.
pub struct RecordingBackend<B> {
    inner: B,
    calls: Mutex<Vec<RecordedCall>>,
}

impl<B> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            calls: Mutex::new(Vec::new()),
        }
    }

    /// Recorded calls sorted by request id.
    pub fn calls(&self) -> Vec<RecordedCall> {
        let mut calls = self.calls.lock().expect("call log poisoned").clone();
        calls.sort_by(|a, b| a.request_id.cmp(&b.request_id));
        calls
    }

    pub fn image_submissions(&self) -> usize {
        self.calls.lock().expect("call log poisoned").iter().map(|c| c.images).sum()
    }

    pub fn clear(&self) {
        self.calls.lock().expect("call log poisoned").clear();
    }
}

#[async_trait]
impl<B: VlmBackend> VlmBackend for RecordingBackend<B> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    async fn complete(&self, request: &VlmRequest) -> Result<RawResponse, BackendError> {
        self.calls.lock().expect("call log poisoned").push(RecordedCall {
            request_id: request.request_id.clone(),
            sample_id: request.meta.sample_id.clone(),
            stage: request.meta.stage.clone(),
            images: request.images.len(),
            prompt_text: request.prompt_text.clone(),
        });
        self.inner.complete(request).await
    }
}
