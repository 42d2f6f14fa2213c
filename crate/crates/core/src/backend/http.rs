//! OpenAI-compatible `POST {base_url}/chat/completions` client.

use std::time::Duration;

use rand::Rng;
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};

use super::{BackendConfig, BackendError, ChatBackend, CompletionResponse, InFlight, TokenLogprob};
use crate::prompt::ChatMessage;

const BODY_EXCERPT: usize = 200;
const MAX_DELAY: Duration = Duration::from_secs(60);

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: u32,
    logprobs: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    top_logprobs: Option<u32>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
    #[serde(default)]
    finish_reason: Option<String>,
    #[serde(default)]
    logprobs: Option<ChoiceLogprobs>,
}

#[derive(Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChoiceLogprobs {
    #[serde(default)]
    content: Option<Vec<TokenLogprob>>,
}

pub struct HttpChatBackend {
    config: BackendConfig,
    endpoint: String,
    client: Client,
    in_flight: InFlight,
}

impl HttpChatBackend {
    pub fn new(config: BackendConfig) -> Result<Self, BackendError> {
        config.validate()?;
        let base = config.base_url.as_deref().unwrap_or_default().trim_end_matches('/');
        let endpoint = format!("{base}/chat/completions");
        let client =
            Client::builder().timeout(config.timeout()).build().map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(HttpChatBackend { in_flight: InFlight::new(config.max_in_flight), config, endpoint, client })
    }

    fn api_key(&self) -> Result<Option<String>, BackendError> {
        match &self.config.api_key_env {
            None => Ok(None),
            Some(var) => match std::env::var(var) {
                Ok(v) if !v.is_empty() => Ok(Some(v)),
                _ => Err(BackendError::MissingCredential(var.clone())),
            },
        }
    }

    /// Delay before retry number `retry` (1-based): base · 2^(retry-1),
    /// stretched by up to 25% jitter.
    fn backoff(&self, retry: u32) -> Duration {
        let base = Duration::from_millis(self.config.retry_base_ms);
        let exp = base.saturating_mul(1u32.checked_shl(retry.saturating_sub(1)).unwrap_or(u32::MAX));
        let jitter: f64 = rand::thread_rng().gen_range(0.0..0.25);
        exp.mul_f64(1.0 + jitter).min(MAX_DELAY)
    }

    fn attempt(&self, body: &ChatRequest<'_>, key: Option<&str>) -> Result<CompletionResponse, Attempt> {
        let mut req = self.client.post(&self.endpoint).json(body);
        if let Some(key) = key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                Attempt::Retry(BackendError::Transport(format!("timeout: {e}")), None)
            } else {
                Attempt::Fatal(BackendError::Transport(e.to_string()))
            }
        })?;

        let status = resp.status();
        if !status.is_success() {
            let retry_after = resp
                .headers()
                .get(reqwest::header::RETRY_AFTER)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.trim().parse::<u64>().ok())
                .map(Duration::from_secs);
            let body: String = resp.text().unwrap_or_default().chars().take(BODY_EXCERPT).collect();
            let err = BackendError::HttpStatus { code: status.as_u16(), body };
            return Err(if status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error() {
                Attempt::Retry(err, retry_after)
            } else {
                Attempt::Fatal(err)
            });
        }

        let parsed: ChatResponse = resp.json().map_err(|e| {
            if e.is_timeout() {
                Attempt::Retry(BackendError::Transport(format!("timeout: {e}")), None)
            } else {
                Attempt::Fatal(BackendError::MalformedResponse(e.to_string()))
            }
        })?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| Attempt::Fatal(BackendError::MalformedResponse("no choices".into())))?;
        let text = choice.message.content.unwrap_or_default();
        if text.trim().is_empty() {
            return Err(Attempt::Fatal(BackendError::MalformedResponse("empty message content".into())));
        }
        Ok(CompletionResponse {
            text,
            token_logprobs: choice.logprobs.and_then(|l| l.content),
            finish_reason: choice.finish_reason.unwrap_or_default(),
            attempts: 1,
        })
    }
}

enum Attempt {
    Retry(BackendError, Option<Duration>),
    Fatal(BackendError),
}

impl ChatBackend for HttpChatBackend {
    fn complete(&self, messages: &[ChatMessage]) -> Result<CompletionResponse, BackendError> {
        let key = self.api_key()?;
        let body = ChatRequest {
            model: &self.config.model_name,
            messages,
            temperature: self.config.temperature,
            max_tokens: self.config.max_tokens,
            logprobs: self.config.request_logprobs,
            top_logprobs: self.config.top_logprobs.filter(|_| self.config.request_logprobs),
        };

        let _slot = self.in_flight.acquire();
        let max_attempts = self.config.max_retries + 1;
        let mut attempt = 1;
        loop {
            match self.attempt(&body, key.as_deref()) {
                Ok(mut resp) => {
                    resp.attempts = attempt;
                    return Ok(resp);
                }
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(e, retry_after)) => {
                    if attempt >= max_attempts {
                        return Err(BackendError::ExhaustedRetries { attempts: attempt, last: Box::new(e) });
                    }
                    let delay =
                        retry_after.map_or(self.backoff(attempt), |ra| ra.min(MAX_DELAY).max(self.backoff(attempt)));
                    tracing::warn!(attempt, ?delay, error = %e, "retrying chat completion");
                    std::thread::sleep(delay);
                    attempt += 1;
                }
            }
        }
    }

    fn fingerprint(&self) -> String {
        format!(
            "http:{}|{}|t={}|max={}|lp={}|top={:?}",
            self.endpoint,
            self.config.model_name,
            self.config.temperature,
            self.config.max_tokens,
            self.config.request_logprobs,
            self.config.top_logprobs
        )
    }
}
