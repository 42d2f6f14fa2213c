//! Offline judge: word overlap between sentence and context.
//!
//! Both texts are lowercased, stripped of ASCII punctuation and split on
//! whitespace. A Jaccard overlap of at least 0.5 answers "Not
//! Hallucination", anything lower "Hallucination", and the first-token
//! logprobs carry P(Hallucination) = 1 - overlap. The answer depends only
//! on the last user message, which must follow the default template;
//! anything else gets a reply that names no label.

use std::collections::HashSet;

use super::{BackendError, ChatBackend, CompletionResponse, TokenLogprob, TopLogprob};
use crate::prompt::{ChatMessage, Role};

const PREFIX: &str = "Context: ";
const SEPARATOR: &str = " Sentence: ";
const SUFFIX: &str = " Is the Sentence hallucinated or not?";
const OFF_TEMPLATE_REPLY: &str = "I cannot judge this input.";
// keeps log(0) finite so responses stay JSON-serializable
const MIN_LOGPROB: f64 = -1.0e4;

#[derive(Debug, Clone, Default)]
pub struct MockBackend;

impl MockBackend {
    pub fn new() -> Self {
        MockBackend
    }

    /// Answer for one user turn; `None` when it does not follow the
    /// default template.
    pub fn judge(user_turn: &str) -> Option<(String, f64)> {
        let body = user_turn.strip_prefix(PREFIX)?.strip_suffix(SUFFIX)?;
        let (context, sentence) = body.rsplit_once(SEPARATOR)?;
        let overlap = jaccard(sentence, context);
        let text = if overlap >= 0.5 { "Not Hallucination" } else { "Hallucination" };
        Some((text.to_string(), 1.0 - overlap))
    }
}

fn tokens(text: &str) -> HashSet<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

/// Jaccard overlap of the normalized token sets; two empty sets overlap
/// fully.
pub fn jaccard(a: &str, b: &str) -> f64 {
    let (ta, tb) = (tokens(a), tokens(b));
    let union = ta.union(&tb).count();
    if union == 0 {
        return 1.0;
    }
    ta.intersection(&tb).count() as f64 / union as f64
}

impl ChatBackend for MockBackend {
    fn complete(&self, messages: &[ChatMessage]) -> Result<CompletionResponse, BackendError> {
        let last_user = messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .ok_or_else(|| BackendError::InvalidConfig("transcript has no user message".into()))?;

        let Some((text, p_h)) = MockBackend::judge(&last_user.content) else {
            return Ok(CompletionResponse {
                text: OFF_TEMPLATE_REPLY.to_string(),
                token_logprobs: None,
                finish_reason: "stop".into(),
                attempts: 1,
            });
        };
        let lp_h = p_h.ln().max(MIN_LOGPROB);
        let lp_n = (1.0 - p_h).ln().max(MIN_LOGPROB);
        let (first, first_lp) = if text == "Hallucination" { ("Hall", lp_h) } else { ("Not", lp_n) };
        Ok(CompletionResponse {
            text,
            token_logprobs: Some(vec![TokenLogprob {
                token: first.into(),
                logprob: first_lp,
                top_logprobs: vec![
                    TopLogprob { token: "Hall".into(), logprob: lp_h },
                    TopLogprob { token: "Not".into(), logprob: lp_n },
                ],
            }]),
            finish_reason: "stop".into(),
            attempts: 1,
        })
    }

    fn fingerprint(&self) -> String {
        "mock:jaccard-v1".into()
    }
}
