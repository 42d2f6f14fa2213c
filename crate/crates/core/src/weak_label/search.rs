//! Prompt evaluation against gold labels and argmax search over system
//! instructions.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LabelEntry, Labeler, WeakLabelError};
use crate::data::{DataPoint, Dataset, Label};
use crate::prompt::{PromptConfig, PromptConfigFile};

/// Audit record for one validation item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: usize,
    pub gold: Label,
    pub predicted: Option<Label>,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_hallucination: Option<f64>,
    pub attempt_count: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub records: Vec<EvalRecord>,
}

/// Accuracy of `config` on `valset`. Items that fail to label count as
/// wrong.
pub fn evaluate_prompt(
    config: &PromptConfig,
    valset: &Dataset,
    labeler: &Labeler<'_>,
) -> Result<Evaluation, WeakLabelError> {
    let golds =
        valset.iter().map(|p| p.gold_label.ok_or(WeakLabelError::MissingGold(p.id))).collect::<Result<Vec<_>, _>>()?;
    let points: Vec<&DataPoint> = valset.iter().collect();

    let mut records = Vec::with_capacity(points.len());
    labeler.label_ordered(config, &points, |entry| {
        let gold = golds[entry.id()];
        let record = match entry {
            LabelEntry::Labeled(p) => EvalRecord {
                id: p.id,
                gold,
                predicted: Some(p.predicted),
                correct: p.predicted == gold,
                p_hallucination: p.distribution.map(|d| d.p_hallucination),
                attempt_count: p.attempt_count,
                error: None,
            },
            LabelEntry::Failed(f) => EvalRecord {
                id: f.id,
                gold,
                predicted: None,
                correct: false,
                p_hallucination: None,
                attempt_count: f.attempt_count,
                error: Some(f.error),
            },
        };
        records.push(record);
        true
    });
    let correct = records.iter().filter(|r| r.correct).count();
    Ok(Evaluation { accuracy: correct as f64 / records.len() as f64, records })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    pub stage_name: String,
    pub prompt_config: PromptConfig,
    pub validation_accuracy: f64,
    pub n_examples: usize,
}

/// Stage name → validation accuracy, in evaluation order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLedger {
    pub stages: Vec<StageRow>,
}

impl StageLedger {
    /// Highest accuracy; the earliest row wins ties.
    pub fn best(&self) -> Option<&StageRow> {
        self.stages.iter().fold(None, |best: Option<&StageRow>, row| match best {
            Some(b) if b.validation_accuracy >= row.validation_accuracy => Some(b),
            _ => Some(row),
        })
    }

    pub fn render_table(&self) -> String {
        let header = "Approach";
        let width = self.stages.iter().map(|r| r.stage_name.chars().count()).chain([header.len()]).max().unwrap_or(0);
        let mut out = String::new();
        let _ = writeln!(out, "{header:<width$}  {:>12}  {:>5}", "Accuracy (%)", "n");
        for row in &self.stages {
            let _ = writeln!(
                out,
                "{:<width$}  {:>12.1}  {:>5}",
                row.stage_name,
                row.validation_accuracy * 100.0,
                row.n_examples
            );
        }
        out
    }
}

/// A named prompt configuration to evaluate.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub name: String,
    pub config: PromptConfig,
}

/// Declarative stage: an instruction and a shot count layered over a base
/// prompt file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub name: String,
    /// Falls back to the base instruction when absent.
    #[serde(default)]
    pub instruction: Option<String>,
    #[serde(default)]
    pub k: usize,
}

impl StageSpec {
    pub fn resolve(&self, base: &PromptConfigFile, base_dir: &Path) -> Result<Stage, WeakLabelError> {
        let file = PromptConfigFile {
            system_instruction: self.instruction.clone().or_else(|| base.system_instruction.clone()),
            k: self.k,
            ..base.clone()
        };
        Ok(Stage { name: self.name.clone(), config: file.resolve(base_dir)? })
    }
}

/// Evaluates each stage in order. Per-item records go to
/// `eval_dir/<stage>.jsonl` when a directory is given.
pub fn run_stages(
    valset: &Dataset,
    labeler: &Labeler<'_>,
    stages: &[Stage],
    eval_dir: Option<&Path>,
) -> Result<StageLedger, WeakLabelError> {
    if stages.is_empty() {
        return Err(WeakLabelError::NoCandidates);
    }
    let mut names = HashSet::new();
    if let Some(dup) = stages.iter().find(|s| !names.insert(s.name.as_str())) {
        return Err(WeakLabelError::DuplicateStage(dup.name.clone()));
    }

    let mut ledger = StageLedger::default();
    for stage in stages {
        let eval = evaluate_prompt(&stage.config, valset, labeler)?;
        tracing::info!(stage = %stage.name, accuracy = eval.accuracy, "stage evaluated");
        if let Some(dir) = eval_dir {
            let path = dir.join(format!("{}.jsonl", file_safe(&stage.name)));
            crate::io::write_jsonl(&path, &eval.records).map_err(|e| WeakLabelError::io(&path, e))?;
        }
        ledger.stages.push(StageRow {
            stage_name: stage.name.clone(),
            prompt_config: stage.config.clone(),
            validation_accuracy: eval.accuracy,
            n_examples: valset.len(),
        });
    }
    Ok(ledger)
}

/// Picks the system instruction with the highest validation accuracy,
/// holding shots, template and seed fixed. Ties go to the earliest
/// candidate; repeated candidates are served from the response cache.
pub fn optimize_instruction(
    candidates: &[String],
    base: &PromptConfig,
    valset: &Dataset,
    labeler: &Labeler<'_>,
    eval_dir: Option<&Path>,
) -> Result<(PromptConfig, StageLedger), WeakLabelError> {
    let stages: Vec<Stage> = candidates
        .iter()
        .enumerate()
        .map(|(i, instruction)| Stage { name: format!("candidate-{i}"), config: base.with_instruction(instruction) })
        .collect();
    let ledger = run_stages(valset, labeler, &stages, eval_dir)?;
    let best = ledger.best().ok_or(WeakLabelError::NoCandidates)?.prompt_config.clone();
    Ok((best, ledger))
}

fn file_safe(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' }).collect()
}
