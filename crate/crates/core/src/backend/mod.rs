//! Chat-completion backends and response interpretation.
//!
//! [`ChatBackend`] is the one call the pipeline needs. Two implementations
//! ship: [`HttpChatBackend`] for OpenAI-compatible endpoints and
//! [`MockBackend`], an offline word-overlap judge for tests and dry runs.

mod http;
mod mock;

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::data::{parse_label_text, Label, LabelDistribution};
use crate::prompt::ChatMessage;

pub use http::HttpChatBackend;
pub use mock::{jaccard, MockBackend};

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP {code}: {body}")]
    HttpStatus { code: u16, body: String },
    #[error("gave up after {attempts} attempts: {last}")]
    ExhaustedRetries { attempts: u32, last: Box<BackendError> },
    #[error("environment variable {0} holding the API key is not set")]
    MissingCredential(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("invalid backend config: {0}")]
    InvalidConfig(String),
    #[error("logprobs present but no label token is identifiable")]
    UndecidableDistribution,
    #[error("cannot find a label in response {0:?}")]
    UnparseableLabel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    HttpChat,
    Mock,
}

fn default_model_name() -> String {
    "mock".to_string()
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
fn default_retry_base_ms() -> u64 {
    1000
}
fn default_max_in_flight() -> usize {
    4
}

/// Endpoint and decoding settings. Holds the *name* of the credential
/// variable, never the credential itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    #[serde(default = "default_model_name")]
    pub model_name: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub request_logprobs: bool,
    /// Alternatives per position; sent as `top_logprobs` only when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_logprobs: Option<u32>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// First backoff delay; doubles per retry.
    #[serde(default = "default_retry_base_ms")]
    pub retry_base_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
}

impl BackendConfig {
    pub fn mock() -> Self {
        BackendConfig {
            kind: BackendKind::Mock,
            base_url: None,
            model_name: default_model_name(),
            temperature: 0.0,
            max_tokens: default_max_tokens(),
            request_logprobs: false,
            top_logprobs: None,
            timeout_secs: default_timeout_secs(),
            max_retries: default_max_retries(),
            retry_base_ms: default_retry_base_ms(),
            api_key_env: None,
            max_in_flight: default_max_in_flight(),
        }
    }

    pub fn http(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        BackendConfig {
            kind: BackendKind::HttpChat,
            base_url: Some(base_url.into()),
            model_name: model_name.into(),
            ..BackendConfig::mock()
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let invalid = |m: &str| Err(BackendError::InvalidConfig(m.to_string()));
        if self.kind == BackendKind::HttpChat {
            match &self.base_url {
                None => return invalid("http_chat requires base_url"),
                Some(u) => {
                    url::Url::parse(u).map_err(|e| BackendError::InvalidConfig(format!("base_url {u:?}: {e}")))?;
                }
            }
            if self.model_name.trim().is_empty() {
                return invalid("http_chat requires model_name");
            }
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return invalid("temperature must be >= 0");
        }
        if self.max_tokens == 0 {
            return invalid("max_tokens must be positive");
        }
        if !self.timeout_secs.is_finite() || self.timeout_secs <= 0.0 {
            return invalid("timeout_secs must be positive");
        }
        if self.max_in_flight == 0 {
            return invalid("max_in_flight must be positive");
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub top_logprobs: Vec<TopLogprob>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<TokenLogprob>>,
    #[serde(default)]
    pub finish_reason: String,
    /// HTTP attempts spent, retries included.
    #[serde(default = "one")]
    pub attempts: u32,
}

fn one() -> u32 {
    1
}

/// A chat-completion endpoint. Implementations must tolerate concurrent
/// calls from many threads.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, messages: &[ChatMessage]) -> Result<CompletionResponse, BackendError>;

    /// Identifies everything besides the messages that shapes a response;
    /// part of the response cache key.
    fn fingerprint(&self) -> String;
}

pub fn from_config(config: &BackendConfig) -> Result<Box<dyn ChatBackend>, BackendError> {
    config.validate()?;
    Ok(match config.kind {
        BackendKind::Mock => Box::new(MockBackend::new()),
        BackendKind::HttpChat => Box::new(HttpChatBackend::new(config.clone())?),
    })
}

/// Turns a response into P(Hallucination).
///
/// Explicit `label_scores` `(z_hallucination, z_not)` win. Otherwise the
/// first generated token and its alternatives are searched for label tokens
/// (case-insensitive prefixes `hall` / `not`) and their logprobs used as
/// scores; with one side missing, the found token's probability is taken at
/// face value. Without logprobs the distribution is degenerate on the
/// parsed text.
pub fn label_distribution(
    response: &CompletionResponse,
    label_scores: Option<(f64, f64)>,
) -> Result<LabelDistribution, BackendError> {
    if let Some((z_h, z_n)) = label_scores {
        return Ok(LabelDistribution::from_scores(z_h, z_n));
    }
    match response.token_logprobs.as_deref() {
        Some([first, ..]) => {
            let candidates = std::iter::once((first.token.as_str(), first.logprob))
                .chain(first.top_logprobs.iter().map(|t| (t.token.as_str(), t.logprob)));
            let mut best: [Option<f64>; 2] = [None, None];
            for (token, logprob) in candidates {
                let Some(label) = label_token(token) else { continue };
                let slot = &mut best[(label == Label::NotHallucination) as usize];
                *slot = Some(slot.map_or(logprob, |b: f64| b.max(logprob)));
            }
            let p_h = match best {
                [Some(h), Some(n)] => return Ok(LabelDistribution::from_scores(h, n)),
                [Some(h), None] => h.exp(),
                [None, Some(n)] => 1.0 - n.exp(),
                [None, None] => return Err(BackendError::UndecidableDistribution),
            };
            LabelDistribution::new(p_h.clamp(0.0, 1.0)).map_err(|e| BackendError::MalformedResponse(e.to_string()))
        }
        _ => parse_label_text(&response.text)
            .map(LabelDistribution::degenerate)
            .map_err(|_| BackendError::UnparseableLabel(response.text.clone())),
    }
}

fn label_token(token: &str) -> Option<Label> {
    let t = token.trim_start().to_lowercase();
    if t.starts_with("hall") {
        Some(Label::Hallucination)
    } else if t.starts_with("not") {
        Some(Label::NotHallucination)
    } else {
        None
    }
}

/// Counting semaphore capping concurrent requests per backend.
pub(crate) struct InFlight {
    cap: usize,
    busy: Mutex<usize>,
    freed: Condvar,
}

pub(crate) struct InFlightGuard<'a>(&'a InFlight);

impl InFlight {
    pub(crate) fn new(cap: usize) -> Self {
        InFlight { cap: cap.max(1), busy: Mutex::new(0), freed: Condvar::new() }
    }

    pub(crate) fn acquire(&self) -> InFlightGuard<'_> {
        let mut busy = self.busy.lock().unwrap_or_else(|e| e.into_inner());
        while *busy >= self.cap {
            busy = self.freed.wait(busy).unwrap_or_else(|e| e.into_inner());
        }
        *busy += 1;
        InFlightGuard(self)
    }
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut busy = self.0.busy.lock().unwrap_or_else(|e| e.into_inner());
        *busy -= 1;
        self.0.freed.notify_one();
    }
}
