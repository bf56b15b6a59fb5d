//! Errors, retry policy and the JSON-over-HTTP client shared by the remote
//! rewriter, relevance scorer and verifier.

use std::thread;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Failure of a backend, scorer or verifier call.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ServiceError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("service returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed service response: {0}")]
    Protocol(String),
    #[error("service returned empty text")]
    EmptyOutput,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("service unavailable: {0}")]
    Unavailable(String),
}

impl ServiceError {
    /// Transport-level problems are worth another attempt; bad payloads are not.
    pub fn is_retryable(&self) -> bool {
        match self {
            ServiceError::Transport(_) | ServiceError::Unavailable(_) => true,
            ServiceError::Status { status, .. } => *status == 429 || *status >= 500,
            ServiceError::Protocol(_) | ServiceError::EmptyOutput | ServiceError::InvalidRequest(_) => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    /// Delay before the first retry; doubles on every further retry.
    pub base_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 2,
            base_backoff_ms: 250,
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            max_retries: 0,
            base_backoff_ms: 0,
        }
    }

    /// Run `call` until it succeeds, fails with a non-retryable error, or the
    /// retry budget is spent. Returns the last error in the failure case.
    pub fn run<T>(&self, mut call: impl FnMut() -> Result<T, ServiceError>) -> Result<T, ServiceError> {
        let mut attempt = 0;
        loop {
            match call() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < self.max_retries => {
                    let delay = self.base_backoff_ms.saturating_mul(1 << attempt.min(16));
                    tracing::debug!(attempt, delay_ms = delay, error = %e, "retrying service call");
                    if delay > 0 {
                        thread::sleep(Duration::from_millis(delay));
                    }
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Blocking JSON client for the scoring sidecar.
#[derive(Debug, Clone)]
pub struct SidecarClient {
    agent: ureq::Agent,
    base_url: String,
    api_key: Option<String>,
}

impl SidecarClient {
    pub fn new(base_url: impl Into<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(120)))
            .build()
            .into();
        Self {
            agent,
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key: None,
        }
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    /// POST `body` to `{base_url}{path}` and decode a 200 response as `R`.
    pub fn post_json<B: Serialize, R: DeserializeOwned>(&self, path: &str, body: &B) -> Result<R, ServiceError> {
        let url = format!("{}{}", self.base_url, path);
        let mut request = self.agent.post(&url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let payload = serde_json::to_vec(body).map_err(|e| ServiceError::InvalidRequest(e.to_string()))?;
        let mut response = request
            .send(&payload[..])
            .map_err(|e| ServiceError::Transport(format!("{url}: {e}")))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| ServiceError::Transport(format!("{url}: {e}")))?;
        if status != 200 {
            return Err(ServiceError::Status { status, body: text });
        }
        serde_json::from_str(&text).map_err(|e| ServiceError::Protocol(format!("{url}: {e}")))
    }
}
