//! Weak-supervision tooling for hallucination detection.
//!
//! The pipeline runs in five steps, each backed by one module:
//!
//! * [`data`] loads SHROOM-style records and defines labels and predictions.
//! * [`prompt`] renders chat transcripts with optional few-shot exemplars.
//! * [`backend`] talks to OpenAI-compatible endpoints (or an offline mock)
//!   and turns responses into label distributions.
//! * [`weak_label`] labels whole datasets resumably, evaluates prompts and
//!   searches system instructions.
//! * [`reconstruct`] emits chat-format training records and the fine-tuning
//!   manifest, and [`ensemble`] votes and scores prediction sets.
//!
//! [`cli`] wires them together behind the `hallu-weak` binary.

pub mod backend;
pub mod cli;
pub mod data;
pub mod ensemble;
pub mod io;
pub mod prompt;
pub mod reconstruct;
pub mod weak_label;

pub use data::{DataPoint, Dataset, Label, LabelDistribution, PredictionRecord, Reference};
pub use prompt::{ChatMessage, PromptConfig, Role, ShotExample};
