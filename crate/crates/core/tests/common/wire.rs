//! Wire-protocol checks against [`FixtureServer`], shared by the wire tests
//! and the acceptance suite. Each returns a short description on success.

use std::time::{Duration, Instant};

use hallu_weak::backend::{BackendConfig, BackendError, ChatBackend, HttpChatBackend};
use hallu_weak::ChatMessage;

use super::{FixtureServer, Reply};

pub fn config(server: &FixtureServer, key_env: &str) -> BackendConfig {
    BackendConfig {
        api_key_env: Some(key_env.into()),
        retry_base_ms: 20,
        timeout_secs: 10.0,
        ..BackendConfig::http(server.base_url.clone(), "fixture-model")
    }
}

pub fn transcript() -> Vec<ChatMessage> {
    vec![
        ChatMessage::system("You are a model that decides if the Sentence is Hallucination or Not Hallucination."),
        ChatMessage::user("Context: a b Sentence: a c Is the Sentence hallucinated or not?"),
    ]
}

pub fn request_body() -> Result<String, String> {
    let server = FixtureServer::start(vec![Reply::completion("Hallucination", Some(-0.25))]);
    let key = "HALLU_WIRE_KEY_BODY";
    std::env::set_var(key, "sk-fixture");
    let cfg = BackendConfig { request_logprobs: true, top_logprobs: Some(5), ..config(&server, key) };
    let resp =
        HttpChatBackend::new(cfg).map_err(|e| e.to_string())?.complete(&transcript()).map_err(|e| e.to_string())?;

    let reqs = server.requests();
    let [req] = reqs.as_slice() else { return Err(format!("expected 1 request, saw {}", reqs.len())) };
    if req.method != "POST" || req.path != "/v1/chat/completions" {
        return Err(format!("wrong target {} {}", req.method, req.path));
    }
    if req.header("authorization") != Some("Bearer sk-fixture") {
        return Err(format!("authorization header {:?}", req.header("authorization")));
    }
    if !req.header("content-type").is_some_and(|v| v.starts_with("application/json")) {
        return Err(format!("content-type {:?}", req.header("content-type")));
    }
    let expected = serde_json::json!({
        "model": "fixture-model",
        "messages": [
            {"role": "system", "content": "You are a model that decides if the Sentence is Hallucination or Not Hallucination."},
            {"role": "user", "content": "Context: a b Sentence: a c Is the Sentence hallucinated or not?"}
        ],
        "temperature": 0.0,
        "max_tokens": 8,
        "logprobs": true,
        "top_logprobs": 5
    });
    if req.json() != expected {
        return Err(format!("body {}", req.body));
    }
    if resp.text != "Hallucination" || resp.attempts != 1 {
        return Err(format!("response {resp:?}"));
    }
    let lp = resp.token_logprobs.as_deref().and_then(|t| t.first()).map(|t| t.logprob);
    if lp != Some(-0.25) {
        return Err(format!("first-token logprob {lp:?}"));
    }
    Ok("POST /v1/chat/completions, bearer auth, exact JSON body".into())
}

pub fn retries_server_errors() -> Result<String, String> {
    let server = FixtureServer::start(vec![
        Reply::status(500),
        Reply::status(500),
        Reply::completion("Not Hallucination", None),
    ]);
    let key = "HALLU_WIRE_KEY_500";
    std::env::set_var(key, "sk-fixture");
    let start = Instant::now();
    let resp = HttpChatBackend::new(config(&server, key))
        .map_err(|e| e.to_string())?
        .complete(&transcript())
        .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    if resp.attempts != 3 || server.requests().len() != 3 {
        return Err(format!("attempts {} / requests {}", resp.attempts, server.requests().len()));
    }
    // backoff 20ms then 40ms, each stretched by < 25%
    if elapsed < Duration::from_millis(60) {
        return Err(format!("retried too fast: {elapsed:?}"));
    }
    Ok(format!("500, 500, 200 -> 3 attempts in {elapsed:?}"))
}

pub fn honors_retry_after() -> Result<String, String> {
    let server = FixtureServer::start(vec![
        Reply::status(429).with_header("Retry-After", "1"),
        Reply::completion("Hallucination", None),
    ]);
    let key = "HALLU_WIRE_KEY_429";
    std::env::set_var(key, "sk-fixture");
    let start = Instant::now();
    let resp = HttpChatBackend::new(config(&server, key))
        .map_err(|e| e.to_string())?
        .complete(&transcript())
        .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    if resp.attempts != 2 {
        return Err(format!("attempts {}", resp.attempts));
    }
    if elapsed < Duration::from_secs(1) {
        return Err(format!("Retry-After ignored: retried after {elapsed:?}"));
    }
    Ok(format!("429 + Retry-After: 1 -> retried after {elapsed:?}"))
}

pub fn gives_up_after_max_retries() -> Result<String, String> {
    let server = FixtureServer::start(vec![Reply::status(503); 3]);
    let key = "HALLU_WIRE_KEY_503";
    std::env::set_var(key, "sk-fixture");
    let cfg = BackendConfig { max_retries: 2, ..config(&server, key) };
    match HttpChatBackend::new(cfg).map_err(|e| e.to_string())?.complete(&transcript()) {
        Err(BackendError::ExhaustedRetries { attempts: 3, last })
            if matches!(*last, BackendError::HttpStatus { code: 503, .. }) =>
        {
            Ok("3 x 503 with max_retries 2 -> ExhaustedRetries".into())
        }
        other => Err(format!("{other:?}")),
    }
}

pub fn missing_credential() -> Result<String, String> {
    let server = FixtureServer::start(vec![Reply::completion("Hallucination", None)]);
    let key = "HALLU_WIRE_KEY_UNSET";
    std::env::remove_var(key);
    match HttpChatBackend::new(config(&server, key)).map_err(|e| e.to_string())?.complete(&transcript()) {
        Err(BackendError::MissingCredential(var)) if var == key => {}
        other => return Err(format!("{other:?}")),
    }
    if !server.requests().is_empty() {
        return Err("a request was sent without credentials".into());
    }
    Ok("unset key variable -> MissingCredential, nothing sent".into())
}
