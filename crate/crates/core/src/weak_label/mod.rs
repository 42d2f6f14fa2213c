//! Dataset-scale labeling, prompt evaluation and instruction search.
//!
//! [`Labeler`] turns one transcript into one [`LabelEntry`], with response
//! caching and a single clarification retry for answers that name no
//! label. [`generate_weak_labels`] drives it over a dataset into a
//! resumable run directory; [`evaluate_prompt`], [`optimize_instruction`]
//! and [`run_stages`] score prompt configurations on gold-labeled data.

mod cache;
mod run;
mod search;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};

use crate::backend::{label_distribution, BackendError, ChatBackend, CompletionResponse};
use crate::data::{parse_label_text, DataPoint, Label, WeakLabeledPoint};
use crate::io::JsonlError;
use crate::prompt::{render_transcript, ChatMessage, PromptConfig, PromptError};

pub use cache::ResponseCache;
pub use run::{
    generate_weak_labels, read_label_entries, LabelOptions, LabelRun, RunCounts, RunManifest, LABELS_FILE,
    MANIFEST_FILE,
};
pub use search::{
    evaluate_prompt, optimize_instruction, run_stages, EvalRecord, Evaluation, Stage, StageLedger, StageRow, StageSpec,
};

/// Follow-up user turn sent once when an answer names no label.
pub const CLARIFICATION: &str = "Answer with exactly 'Hallucination' or 'Not Hallucination'.";

#[derive(Debug, thiserror::Error)]
pub enum WeakLabelError {
    #[error("dataset digest {found} does not match {expected} recorded in the run manifest")]
    DigestMismatch { expected: String, found: String },
    #[error("run directory was started with a different {0}; start a fresh run instead of resuming")]
    ConfigMismatch(&'static str),
    #[error("{failed} of {total} items failed, above the {threshold} failure threshold")]
    FailureThreshold { failed: usize, total: usize, threshold: f64 },
    #[error("no candidates or stages to evaluate")]
    NoCandidates,
    #[error("item {0} has no gold label")]
    MissingGold(usize),
    #[error("stage name {0:?} is used twice")]
    DuplicateStage(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

impl WeakLabelError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        WeakLabelError::Io { path: path.display().to_string(), source }
    }
}

/// An item that could not be labeled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedPoint {
    pub id: usize,
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_response: Option<String>,
    pub attempt_count: u32,
}

/// One line of `labels.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum LabelEntry {
    Labeled(WeakLabeledPoint),
    Failed(FailedPoint),
}

impl LabelEntry {
    pub fn id(&self) -> usize {
        match self {
            LabelEntry::Labeled(p) => p.id,
            LabelEntry::Failed(f) => f.id,
        }
    }

    pub fn predicted(&self) -> Option<Label> {
        match self {
            LabelEntry::Labeled(p) => Some(p.predicted),
            LabelEntry::Failed(_) => None,
        }
    }

    pub fn is_failed(&self) -> bool {
        matches!(self, LabelEntry::Failed(_))
    }
}

/// Runs transcripts through a backend with caching and bounded
/// concurrency.
pub struct Labeler<'a> {
    backend: &'a dyn ChatBackend,
    cache: ResponseCache,
    concurrency: usize,
    calls: AtomicUsize,
}

impl<'a> Labeler<'a> {
    pub fn new(backend: &'a dyn ChatBackend) -> Self {
        Labeler { backend, cache: ResponseCache::in_memory(), concurrency: 1, calls: AtomicUsize::new(0) }
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = cache;
        self
    }

    pub fn with_concurrency(mut self, workers: usize) -> Self {
        self.concurrency = workers.max(1);
        self
    }

    /// Requests that actually reached the backend (cache misses).
    pub fn backend_calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn complete(&self, messages: &[ChatMessage]) -> Result<CompletionResponse, BackendError> {
        let key = ResponseCache::key(&self.backend.fingerprint(), messages);
        if let Some(hit) = self.cache.get(&key) {
            return Ok(hit);
        }
        self.calls.fetch_add(1, Ordering::SeqCst);
        let resp = self.backend.complete(messages)?;
        self.cache.put(&key, &resp);
        Ok(resp)
    }

    /// Labels a single point; never fails, failures become
    /// [`LabelEntry::Failed`].
    pub fn label_point(&self, config: &PromptConfig, dp: &DataPoint) -> LabelEntry {
        let failed = |error: String, raw_response: Option<String>, attempt_count| {
            LabelEntry::Failed(FailedPoint { id: dp.id, error, raw_response, attempt_count })
        };
        let mut messages = match render_transcript(config, dp) {
            Ok(m) => m,
            Err(e) => return failed(e.to_string(), None, 0),
        };

        let first = match self.complete(&messages) {
            Ok(r) => r,
            Err(e) => return failed(e.to_string(), None, 1),
        };
        if let Some(entry) = interpret(dp.id, &first, 1) {
            return entry;
        }

        if !first.text.trim().is_empty() {
            messages.push(ChatMessage::assistant(first.text.clone()));
        }
        messages.push(ChatMessage::user(CLARIFICATION));
        let second = match self.complete(&messages) {
            Ok(r) => r,
            Err(e) => return failed(e.to_string(), Some(first.text), 2),
        };
        interpret(dp.id, &second, 2)
            .unwrap_or_else(|| failed(format!("unparseable response {:?}", second.text), Some(second.text.clone()), 2))
    }

    /// Labels `points` on up to `concurrency` worker threads and hands each
    /// entry to `sink` in input order. Returning `false` from `sink` stops
    /// scheduling new work; entries already in flight are dropped.
    pub fn label_ordered<F>(&self, config: &PromptConfig, points: &[&DataPoint], mut sink: F)
    where
        F: FnMut(LabelEntry) -> bool,
    {
        if points.is_empty() {
            return;
        }
        let workers = self.concurrency.min(points.len());
        let next = AtomicUsize::new(0);
        let stop = AtomicBool::new(false);
        let (tx, rx) = mpsc::channel::<(usize, LabelEntry)>();

        std::thread::scope(|scope| {
            for _ in 0..workers {
                let tx = tx.clone();
                let (next, stop) = (&next, &stop);
                scope.spawn(move || loop {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(dp) = points.get(i) else { break };
                    if tx.send((i, self.label_point(config, dp))).is_err() {
                        break;
                    }
                });
            }
            drop(tx);

            // reorder buffer: release entries strictly in input order
            let mut pending: BTreeMap<usize, LabelEntry> = BTreeMap::new();
            let mut expected = 0;
            for (i, entry) in rx {
                if stop.load(Ordering::SeqCst) {
                    continue;
                }
                pending.insert(i, entry);
                while let Some(entry) = pending.remove(&expected) {
                    expected += 1;
                    if !sink(entry) {
                        stop.store(true, Ordering::SeqCst);
                        break;
                    }
                }
            }
        });
    }
}

/// `None` when the text names no label.
fn interpret(id: usize, resp: &CompletionResponse, attempt_count: u32) -> Option<LabelEntry> {
    let text_label = parse_label_text(&resp.text).ok()?;
    let distribution = resp.token_logprobs.as_ref().and_then(|_| label_distribution(resp, None).ok());
    Some(LabelEntry::Labeled(WeakLabeledPoint {
        id,
        predicted: distribution.map_or(text_label, |d| d.predicted()),
        distribution,
        raw_response: resp.text.clone(),
        attempt_count,
    }))
}
