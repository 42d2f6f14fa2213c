//! Generative-format training data: one system/user/assistant conversation
//! per labeled point, plus the fine-tuning manifest that accompanies it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::{DataPoint, Label};
use crate::io::JsonlError;
use crate::prompt::{render_user_turn, ChatMessage, Role, UserTemplate, DEFAULT_SYSTEM_INSTRUCTION};

pub const MANIFEST_FILE: &str = "training_manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum ReconstructError {
    #[error("invalid override for `{field}`: {reason}")]
    InvalidOverride { field: String, reason: String },
    #[error("invalid chat record: {0}")]
    InvalidRecord(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

/// A three-turn training conversation: fixed instruction, rendered query,
/// canonical label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawRecord")]
pub struct ChatRecord {
    messages: Vec<ChatMessage>,
}

#[derive(Deserialize)]
struct RawRecord {
    messages: Vec<ChatMessage>,
}

impl TryFrom<RawRecord> for ChatRecord {
    type Error = ReconstructError;

    fn try_from(raw: RawRecord) -> Result<Self, Self::Error> {
        let invalid = |m: &str| Err(ReconstructError::InvalidRecord(m.to_string()));
        let roles: Vec<Role> = raw.messages.iter().map(|m| m.role).collect();
        if roles != [Role::System, Role::User, Role::Assistant] {
            return invalid("expected system, user, assistant");
        }
        if raw.messages[0].content != DEFAULT_SYSTEM_INSTRUCTION {
            return invalid("unexpected system instruction");
        }
        if raw.messages[2].content.parse::<Label>().is_err() {
            return invalid("assistant content is not a canonical label");
        }
        Ok(ChatRecord { messages: raw.messages })
    }
}

impl ChatRecord {
    pub fn new(user: impl Into<String>, label: Label) -> Self {
        ChatRecord {
            messages: vec![
                ChatMessage::system(DEFAULT_SYSTEM_INSTRUCTION),
                ChatMessage::user(user),
                ChatMessage::assistant(label.as_str()),
            ],
        }
    }

    pub fn messages(&self) -> &[ChatMessage] {
        &self.messages
    }

    pub fn label(&self) -> Label {
        self.messages[2].content.parse().expect("validated on construction")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SkippedItem {
    pub id: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Reconstruction {
    pub records: Vec<ChatRecord>,
    pub skipped: Vec<SkippedItem>,
}

/// One record per input in order; points without usable context are
/// skipped and reported.
pub fn to_chat_records(labeled: &[(DataPoint, Label)]) -> Reconstruction {
    let template = UserTemplate::default();
    let mut out = Reconstruction::default();
    for (dp, label) in labeled {
        match render_user_turn(dp, &template) {
            Ok(user) => out.records.push(ChatRecord::new(user, *label)),
            Err(e) => {
                tracing::warn!(id = dp.id, error = %e, "skipping item");
                out.skipped.push(SkippedItem { id: dp.id, reason: e.to_string() });
            }
        }
    }
    out
}

pub fn write_training_jsonl(records: &[ChatRecord], path: &Path) -> Result<usize, ReconstructError> {
    crate::io::write_jsonl(path, records)
        .map_err(|source| ReconstructError::Io { path: path.display().to_string(), source })
}

pub fn read_training_jsonl(path: &Path) -> Result<Vec<ChatRecord>, ReconstructError> {
    Ok(crate::io::read_jsonl(path)?)
}

/// Fine-tuning settings handed to the training driver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingManifest {
    pub dataset_path: PathBuf,
    pub base_model: String,
    pub seed: u64,
    pub batch_size: u64,
    pub learning_rate: f64,
    pub training_steps: u64,
    pub optimizer: String,
    pub adaptation: String,
    pub lora_rank: u64,
}

impl TrainingManifest {
    pub fn with_defaults(dataset_path: impl Into<PathBuf>) -> Self {
        TrainingManifest {
            dataset_path: dataset_path.into(),
            base_model: "Mistral-7B-Instruct-v0.3".into(),
            seed: 0,
            batch_size: 8,
            learning_rate: 2e-5,
            training_steps: 500,
            optimizer: "AdamW".into(),
            adaptation: "LoRA".into(),
            lora_rank: 64,
        }
    }

    /// Applies `overrides` field by field. Unknown keys, wrong types and
    /// non-positive sizes are rejected.
    pub fn apply_overrides(mut self, overrides: &Map<String, Value>) -> Result<Self, ReconstructError> {
        for (field, value) in overrides {
            let bad = |reason: &str| ReconstructError::InvalidOverride { field: field.clone(), reason: reason.into() };
            let positive_int = || value.as_u64().filter(|v| *v > 0).ok_or_else(|| bad("expected a positive integer"));
            let text = || {
                value
                    .as_str()
                    .filter(|s| !s.trim().is_empty())
                    .map(str::to_owned)
                    .ok_or_else(|| bad("expected a non-empty string"))
            };
            match field.as_str() {
                "batch_size" => self.batch_size = positive_int()?,
                "training_steps" => self.training_steps = positive_int()?,
                "lora_rank" => self.lora_rank = positive_int()?,
                "seed" => self.seed = value.as_u64().ok_or_else(|| bad("expected a non-negative integer"))?,
                "learning_rate" => {
                    self.learning_rate = value
                        .as_f64()
                        .filter(|v| v.is_finite() && *v > 0.0)
                        .ok_or_else(|| bad("expected a positive number"))?
                }
                "base_model" => self.base_model = text()?,
                "optimizer" => self.optimizer = text()?,
                "adaptation" => self.adaptation = text()?,
                _ => return Err(bad("not an overridable field")),
            }
        }
        Ok(self)
    }
}

/// Writes the manifest as `training_manifest.json` beside the dataset and
/// returns its path.
pub fn emit_manifest(
    dataset_path: &Path,
    seed: u64,
    overrides: &Map<String, Value>,
) -> Result<(PathBuf, TrainingManifest), ReconstructError> {
    let manifest =
        TrainingManifest { seed, ..TrainingManifest::with_defaults(dataset_path) }.apply_overrides(overrides)?;
    let path = dataset_path.parent().unwrap_or(Path::new(".")).join(MANIFEST_FILE);
    crate::io::write_json_pretty(&path, &manifest)
        .map_err(|source| ReconstructError::Io { path: path.display().to_string(), source })?;
    Ok((path, manifest))
}
