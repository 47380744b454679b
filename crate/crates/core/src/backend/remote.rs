//! Blocking HTTP client for a logprob-capable scoring server.
//!
//! Request body (`POST {base_url}{score_path}`):
//!
//! ```json
//! {"image": "<base64 png>", "image_format": "png", "prompt": "...",
//!  "max_tokens": 64, "temperature": 0, "logprobs": true}
//! ```
//!
//! Response body:
//!
//! ```json
//! {"tokens": [{"id": 17, "text": "45", "logprob": -0.01}], "finish_reason": "stop"}
//! ```
//!
//! Tokens may carry `"special": true` to mark an end-of-sequence token.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use base64::Engine as _;
use log::{debug, warn};
use serde::{Deserialize, Serialize};

use super::{validate_response, Backend, BackendError, Health, InferenceRequest, InferenceResponse};
use crate::confidence::{FinishReason, ScoredSequence, TokenScore};

pub const ENV_BACKEND_URL: &str = "DOCPATCH_BACKEND_URL";
pub const ENV_BACKEND_TOKEN: &str = "DOCPATCH_BACKEND_TOKEN";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WireRequest {
    pub image: String,
    pub image_format: String,
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: u32,
    pub logprobs: bool,
}

impl WireRequest {
    pub fn from_request(req: &InferenceRequest) -> Result<Self, BackendError> {
        let png = req.encode_png()?;
        Ok(Self {
            image: base64::engine::general_purpose::STANDARD.encode(png),
            image_format: "png".to_string(),
            prompt: req.prompt.clone(),
            max_tokens: req.max_tokens,
            temperature: 0,
            logprobs: true,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WireToken {
    pub id: u32,
    pub text: String,
    pub logprob: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub special: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WireResponse {
    pub tokens: Vec<WireToken>,
    pub finish_reason: FinishReason,
}

impl WireResponse {
    pub fn into_sequence(self) -> Result<ScoredSequence, BackendError> {
        let seq = ScoredSequence::new(
            self.tokens
                .into_iter()
                .map(|t| TokenScore {
                    token_id: t.id,
                    text: t.text,
                    logprob: t.logprob,
                    special: t.special,
                })
                .collect(),
            self.finish_reason,
        );
        validate_response(&seq)?;
        Ok(seq)
    }

    pub fn from_sequence(seq: &ScoredSequence) -> Self {
        Self {
            tokens: seq
                .tokens
                .iter()
                .map(|t| WireToken {
                    id: t.token_id,
                    text: t.text.clone(),
                    logprob: t.logprob,
                    special: t.special,
                })
                .collect(),
            finish_reason: seq.finish_reason,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteConfig {
    pub base_url: String,
    pub score_path: String,
    pub health_path: String,
    pub bearer_token: Option<String>,
    pub timeout: Duration,
    pub health_timeout: Duration,
    /// Extra attempts after the first, for transport failures and 5xx.
    pub retries: u32,
    pub backoff_initial: Duration,
    pub backoff_factor: u32,
    /// Cap on concurrent in-flight requests.
    pub parallelism: usize,
}

impl RemoteConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            score_path: "/v1/score".to_string(),
            health_path: "/health".to_string(),
            bearer_token: None,
            timeout: Duration::from_secs(120),
            health_timeout: Duration::from_secs(5),
            retries: 2,
            backoff_initial: Duration::from_secs(1),
            backoff_factor: 4,
            parallelism: 4,
        }
    }

    /// Base URL and optional bearer token from the environment.
    pub fn from_env() -> Option<Self> {
        let url = std::env::var(ENV_BACKEND_URL).ok().filter(|u| !u.trim().is_empty())?;
        let mut cfg = Self::new(url);
        cfg.bearer_token = std::env::var(ENV_BACKEND_TOKEN).ok().filter(|t| !t.is_empty());
        Some(cfg)
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base_url.trim_end_matches('/'), path)
    }

    /// Delay before retry number `attempt` (0-based): 1 s, 4 s, 16 s, ...
    pub fn backoff(&self, attempt: u32) -> Duration {
        self.backoff_initial * self.backoff_factor.saturating_pow(attempt)
    }
}

struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            permits: Mutex::new(n.max(1)),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.permits.lock().unwrap_or_else(|e| e.into_inner());
        while *n == 0 {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.freed.notify_one();
    }
}

pub struct RemoteBackend {
    config: RemoteConfig,
    agent: ureq::Agent,
    health_agent: ureq::Agent,
    in_flight: Semaphore,
}

impl std::fmt::Debug for RemoteBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteBackend").field("config", &self.config).finish()
    }
}

fn agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into()
}

fn classify(err: ureq::Error) -> BackendError {
    match err {
        ureq::Error::Timeout(_) => BackendError::Timeout,
        ureq::Error::Json(e) => BackendError::Protocol(format!("malformed response body: {e}")),
        ureq::Error::BadUri(u) => BackendError::InvalidRequest(format!("bad backend url {u}")),
        ureq::Error::Protocol(e) => BackendError::Protocol(e.to_string()),
        other => BackendError::Transport(other.to_string()),
    }
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Self {
        Self {
            agent: agent(config.timeout),
            health_agent: agent(config.health_timeout.min(config.timeout)),
            in_flight: Semaphore::new(config.parallelism),
            config,
        }
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn attempt(&self, body: &WireRequest) -> Result<InferenceResponse, BackendError> {
        let mut req = self.agent.post(self.config.url(&self.config.score_path));
        if let Some(token) = &self.config.bearer_token {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        let mut resp = req.send_json(body).map_err(classify)?;
        let status = resp.status().as_u16();
        if status >= 500 {
            return Err(BackendError::Transport(format!("server error HTTP {status}")));
        }
        if !(200..300).contains(&status) {
            let detail = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(BackendError::Refused { status, detail });
        }
        let wire: WireResponse = resp.body_mut().read_json().map_err(|e| match e {
            ureq::Error::Timeout(_) => BackendError::Timeout,
            ureq::Error::Json(e) => BackendError::Protocol(format!("malformed response body: {e}")),
            other => BackendError::Protocol(other.to_string()),
        })?;
        wire.into_sequence()
    }
}

impl Backend for RemoteBackend {
    fn score_patch(&self, req: &InferenceRequest) -> Result<InferenceResponse, BackendError> {
        req.validate()?;
        let body = WireRequest::from_request(req)?;
        let _permit = self.in_flight.acquire();
        let mut attempt = 0;
        loop {
            match self.attempt(&body) {
                Err(e) if e.is_retryable() && attempt < self.config.retries => {
                    let wait = self.config.backoff(attempt);
                    warn!("patch {:?}: {e}; retrying in {wait:?}", req.patch_index);
                    std::thread::sleep(wait);
                    attempt += 1;
                }
                other => {
                    debug!("patch {:?}: {} attempt(s)", req.patch_index, attempt + 1);
                    return other;
                }
            }
        }
    }

    fn healthcheck(&self) -> Health {
        let url = self.config.url(&self.config.health_path);
        let mut req = self.health_agent.get(&url);
        if let Some(token) = &self.config.bearer_token {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        match req.call() {
            Ok(resp) if resp.status().is_success() => Health::Ok,
            Ok(resp) => Health::Unavailable(format!("protocol: GET {url} returned HTTP {}", resp.status().as_u16())),
            Err(e) => Health::Unavailable(match classify(e) {
                BackendError::Timeout => format!("timeout: no answer from {url}"),
                other => format!("transport: {other}"),
            }),
        }
    }

    fn parallelism(&self) -> usize {
        self.config.parallelism.max(1)
    }
}
