use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;

use super::retry::parse_retry_after;
use super::{check_request, BackendError, ImageRef, RawResponse, RetryPolicy, Usage, VlmBackend, VlmRequest};

fn default_max_in_flight() -> usize {
    4
}

fn default_timeout_secs() -> u64 {
    120
}

/// Connection settings for a chat-completions endpoint. Credentials are read
/// from the environment variable named by `api_key_env`, never from the
/// config itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    /// Full URL of the chat-completions route.
    pub endpoint: String,
    pub model: String,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key_env: None,
            max_in_flight: default_max_in_flight(),
            timeout_secs: default_timeout_secs(),
            retry: RetryPolicy::default(),
        }
    }
}

/// Client for OpenAI-style `/chat/completions` endpoints with image parts.
pub struct ChatCompletionsBackend {
    config: RemoteConfig,
    client: reqwest::Client,
    api_key: Option<String>,
    permits: Arc<Semaphore>,
}

enum Attempt {
    Done(Result<RawResponse, BackendError>),
    Retry {
        error: BackendError,
        retry_after: Option<Duration>,
    },
}

impl ChatCompletionsBackend {
    pub fn new(config: RemoteConfig) -> Result<Self, BackendError> {
        if config.max_in_flight == 0 {
            return Err(BackendError::Config("max_in_flight must be at least 1".into()));
        }
        if config.retry.max_attempts == 0 {
            return Err(BackendError::Config("retry.max_attempts must be at least 1".into()));
        }
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                BackendError::Config(format!("environment variable `{var}` holding the API key is not set"))
            })?),
            None => None,
        };
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(Self {
            permits: Arc::new(Semaphore::new(config.max_in_flight)),
            config,
            client,
            api_key,
        })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn body(&self, request: &VlmRequest) -> Result<Value, BackendError> {
        let mut content = vec![json!({ "type": "text", "text": request.prompt_text })];
        for image in &request.images {
            content.push(json!({ "type": "image_url", "image_url": { "url": image_url(image)? } }));
        }
        Ok(json!({
            "model": self.config.model,
            "temperature": request.decoding.temperature,
            "max_tokens": request.decoding.max_output_tokens,
            "messages": [{ "role": "user", "content": content }],
        }))
    }

    async fn attempt(&self, body: &Value, attempt: u32) -> Attempt {
        let mut req = self.client.post(&self.config.endpoint).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = match req.send().await {
            Ok(r) => r,
            Err(e) if e.is_timeout() => {
                return Attempt::Retry {
                    error: BackendError::Timeout { attempts: attempt },
                    retry_after: None,
                }
            }
            Err(e) => {
                return Attempt::Retry {
                    error: BackendError::Transport {
                        attempts: attempt,
                        message: e.to_string(),
                    },
                    retry_after: None,
                }
            }
        };
        let status = resp.status().as_u16();
        let retry_after = resp
            .headers()
            .get(reqwest::header::RETRY_AFTER)
            .and_then(|v| v.to_str().ok())
            .and_then(parse_retry_after);
        let text = match resp.text().await {
            Ok(t) => t,
            Err(e) => {
                return Attempt::Retry {
                    error: BackendError::Transport {
                        attempts: attempt,
                        message: e.to_string(),
                    },
                    retry_after: None,
                }
            }
        };
        match status {
            200..=299 => Attempt::Done(parse_completion(&text)),
            401 | 403 => Attempt::Done(Err(BackendError::Auth { status })),
            429 => Attempt::Retry {
                error: BackendError::RateLimited {
                    attempts: attempt,
                    retry_after_ms: retry_after.map(|d| d.as_millis() as u64),
                },
                retry_after,
            },
            408 | 500..=599 => Attempt::Retry {
                error: BackendError::Http { status, body: text },
                retry_after,
            },
            _ => Attempt::Done(Err(BackendError::Http { status, body: text })),
        }
    }
}

fn with_attempts(error: BackendError, attempts: u32) -> BackendError {
    match error {
        BackendError::RateLimited { retry_after_ms, .. } => BackendError::RateLimited {
            attempts,
            retry_after_ms,
        },
        BackendError::Timeout { .. } => BackendError::Timeout { attempts },
        BackendError::Transport { message, .. } => BackendError::Transport { attempts, message },
        other => other,
    }
}

fn image_url(image: &ImageRef) -> Result<String, BackendError> {
    if image.is_url() {
        return Ok(image.as_str().to_string());
    }
    let path = Path::new(image.as_str());
    let bytes = std::fs::read(path)
        .map_err(|e| BackendError::InvalidRequest(format!("cannot read image {}: {e}", path.display())))?;
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    let mime = match ext.as_str() {
        "png" => "image/png",
        "jpg" | "jpeg" => "image/jpeg",
        "webp" => "image/webp",
        "gif" => "image/gif",
        _ => "application/octet-stream",
    };
    Ok(format!(
        "data:{mime};base64,{}",
        base64::engine::general_purpose::STANDARD.encode(bytes)
    ))
}

fn parse_completion(body: &str) -> Result<RawResponse, BackendError> {
    let v: Value = serde_json::from_str(body).map_err(|e| BackendError::BadResponse(e.to_string()))?;
    let content = v
        .pointer("/choices/0/message/content")
        .ok_or_else(|| BackendError::BadResponse("missing choices[0].message.content".into()))?;
    let text = match content {
        Value::String(s) => s.clone(),
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join(""),
        Value::Null => String::new(),
        other => return Err(BackendError::BadResponse(format!("unexpected content {other}"))),
    };
    let usage = Usage {
        prompt_tokens: v.pointer("/usage/prompt_tokens").and_then(Value::as_u64),
        completion_tokens: v.pointer("/usage/completion_tokens").and_then(Value::as_u64),
    };
    Ok(RawResponse {
        text,
        usage,
        latency_ms: 0,
    })
}

#[async_trait]
impl VlmBackend for ChatCompletionsBackend {
    fn name(&self) -> &str {
        &self.config.model
    }

    async fn complete(&self, request: &VlmRequest) -> Result<RawResponse, BackendError> {
        check_request(request)?;
        let body = self.body(request)?;
        let _permit = self
            .permits
            .acquire()
            .await
            .map_err(|_| BackendError::Config("request limiter closed".into()))?;
        let started = Instant::now();
        let policy = self.config.retry;
        let mut attempt = 1;
        loop {
            match self.attempt(&body, attempt).await {
                Attempt::Done(result) => {
                    return result.map(|mut r| {
                        r.latency_ms = started.elapsed().as_millis() as u64;
                        r
                    })
                }
                Attempt::Retry { error, retry_after } => {
                    if attempt >= policy.max_attempts {
                        return Err(with_attempts(error, attempt));
                    }
                    let delay = policy.delay(attempt, retry_after);
                    tracing::warn!(
                        request_id = %request.request_id,
                        attempt,
                        delay_ms = delay.as_millis() as u64,
                        "retrying after: {error}"
                    );
                    tokio::time::sleep(delay).await;
                    attempt += 1;
                }
            }
        }
    }
}
