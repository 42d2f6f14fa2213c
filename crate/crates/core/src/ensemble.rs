//! Majority voting over checkpoint prediction sets and accuracy reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Label, PredictionRecord};
use crate::io::JsonlError;

#[derive(Debug, thiserror::Error)]
pub enum EnsembleError {
    #[error("no prediction sets given")]
    NoSets,
    #[error(
        "prediction set #{set_index} ({model_tag}) does not cover the same ids: missing {missing:?}, extra {extra:?}"
    )]
    MisalignedIds { set_index: usize, model_tag: String, missing: Vec<usize>, extra: Vec<usize> },
    #[error("prediction set {model_tag} lists id {id} twice")]
    DuplicateId { model_tag: String, id: usize },
    #[error("gold item {0} has no label")]
    MissingGold(usize),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

/// One checkpoint's predictions, sorted by id.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub model_tag: String,
    records: Vec<PredictionRecord>,
}

impl PredictionSet {
    pub fn new(model_tag: impl Into<String>, mut records: Vec<PredictionRecord>) -> Result<Self, EnsembleError> {
        let model_tag = model_tag.into();
        records.sort_by_key(|r| r.id);
        if let Some(w) = records.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(EnsembleError::DuplicateId { model_tag, id: w[0].id });
        }
        for r in &mut records {
            if r.model_tag.is_empty() {
                r.model_tag = model_tag.clone();
            }
        }
        Ok(PredictionSet { model_tag, records })
    }

    /// Loads a prediction JSONL file. The set takes the first record's
    /// `model_tag`, or the file stem when records carry none.
    pub fn load(path: &Path) -> Result<Self, EnsembleError> {
        let records: Vec<PredictionRecord> = crate::io::read_jsonl(path)?;
        let tag = records
            .iter()
            .map(|r| r.model_tag.as_str())
            .find(|t| !t.is_empty())
            .map(str::to_owned)
            .unwrap_or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
        PredictionSet::new(tag, records)
    }

    pub fn records(&self) -> &[PredictionRecord] {
        &self.records
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.records.iter().map(|r| r.id)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TiePolicy {
    /// Mean P(Hallucination) of the sets that report one, against 0.5;
    /// falls back to flagging when none do.
    #[default]
    MeanConfidence,
    /// Ties are hallucinations.
    FlagHallucination,
}

impl FromStr for TiePolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "mean_confidence" => Ok(TiePolicy::MeanConfidence),
            "flag_hallucination" => Ok(TiePolicy::FlagHallucination),
            other => Err(format!("unknown tie policy {other:?} (mean-confidence | flag-hallucination)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteItem {
    pub id: usize,
    #[serde(rename = "final")]
    pub final_label: Label,
    pub votes_hallucination: usize,
    pub votes_not: usize,
    pub tiebreak_used: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteResult {
    pub n_models: usize,
    pub items: Vec<VoteItem>,
}

impl VoteResult {
    /// Ensemble predictions; `p_hallucination` is the share of
    /// Hallucination votes.
    pub fn to_predictions(&self, model_tag: &str) -> Vec<PredictionRecord> {
        self.items
            .iter()
            .map(|v| PredictionRecord {
                id: v.id,
                predicted: v.final_label,
                p_hallucination: Some(v.votes_hallucination as f64 / self.n_models as f64),
                model_tag: model_tag.to_string(),
            })
            .collect()
    }
}

/// Errors unless every set covers exactly the first set's ids.
pub fn check_alignment(sets: &[PredictionSet]) -> Result<(), EnsembleError> {
    let first = sets.first().ok_or(EnsembleError::NoSets)?;
    let reference: BTreeSet<usize> = first.ids().collect();
    for (set_index, set) in sets.iter().enumerate().skip(1) {
        let ids: BTreeSet<usize> = set.ids().collect();
        if ids != reference {
            return Err(EnsembleError::MisalignedIds {
                set_index,
                model_tag: set.model_tag.clone(),
                missing: reference.difference(&ids).copied().collect(),
                extra: ids.difference(&reference).copied().collect(),
            });
        }
    }
    Ok(())
}

/// Per-id majority vote. With an even number of sets, ties are settled by
/// `tie_policy` and flagged.
pub fn majority_vote(sets: &[PredictionSet], tie_policy: TiePolicy) -> Result<VoteResult, EnsembleError> {
    check_alignment(sets)?;
    let n_models = sets.len();
    let items = (0..sets[0].len())
        .map(|row| {
            // sets are sorted and aligned, so row i is the same id everywhere
            let id = sets[0].records[row].id;
            let votes_hallucination = sets.iter().filter(|s| s.records[row].predicted == Label::Hallucination).count();
            let votes_not = n_models - votes_hallucination;
            let (final_label, tiebreak_used) = match votes_hallucination.cmp(&votes_not) {
                std::cmp::Ordering::Greater => (Label::Hallucination, false),
                std::cmp::Ordering::Less => (Label::NotHallucination, false),
                std::cmp::Ordering::Equal => (break_tie(sets, row, tie_policy), true),
            };
            VoteItem { id, final_label, votes_hallucination, votes_not, tiebreak_used }
        })
        .collect();
    Ok(VoteResult { n_models, items })
}

fn break_tie(sets: &[PredictionSet], row: usize, policy: TiePolicy) -> Label {
    if policy == TiePolicy::MeanConfidence {
        let confidences: Vec<f64> = sets.iter().filter_map(|s| s.records[row].p_hallucination).collect();
        if !confidences.is_empty() {
            let mean = confidences.iter().sum::<f64>() / confidences.len() as f64;
            return if mean >= 0.5 { Label::Hallucination } else { Label::NotHallucination };
        }
    }
    Label::Hallucination
}

/// Confusion counts with Hallucination as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub true_positive: usize,
    pub false_positive: usize,
    pub true_negative: usize,
    pub false_negative: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.true_positive + self.false_positive + self.true_negative + self.false_negative
    }

    fn add(&mut self, predicted: Label, gold: Label) {
        match (predicted, gold) {
            (Label::Hallucination, Label::Hallucination) => self.true_positive += 1,
            (Label::Hallucination, Label::NotHallucination) => self.false_positive += 1,
            (Label::NotHallucination, Label::NotHallucination) => self.true_negative += 1,
            (Label::NotHallucination, Label::Hallucination) => self.false_negative += 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub accuracy: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberAccuracy {
    pub model_tag: String,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub n: usize,
    pub per_task: BTreeMap<String, TaskScore>,
    pub confusion: Confusion,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub member_accuracies: Option<Vec<MemberAccuracy>>,
}

/// Scores predictions against the gold labels of `gold`; the id sets must
/// match exactly.
pub fn score(preds: &[PredictionRecord], gold: &Dataset) -> Result<EvalReport, EnsembleError> {
    let pred_ids: BTreeSet<usize> = preds.iter().map(|p| p.id).collect();
    if pred_ids.len() != preds.len() {
        let mut seen = BTreeSet::new();
        let dup = preds.iter().find(|p| !seen.insert(p.id)).map(|p| p.id).unwrap_or_default();
        return Err(EnsembleError::DuplicateId { model_tag: "predictions".into(), id: dup });
    }
    let gold_ids: BTreeSet<usize> = gold.iter().map(|p| p.id).collect();
    if pred_ids != gold_ids {
        return Err(EnsembleError::MisalignedIds {
            set_index: 0,
            model_tag: preds.first().map(|p| p.model_tag.clone()).unwrap_or_default(),
            missing: gold_ids.difference(&pred_ids).copied().collect(),
            extra: pred_ids.difference(&gold_ids).copied().collect(),
        });
    }
    let predicted: BTreeMap<usize, Label> = preds.iter().map(|p| (p.id, p.predicted)).collect();

    let mut confusion = Confusion::default();
    let mut tasks: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for dp in gold {
        let g = dp.gold_label.ok_or(EnsembleError::MissingGold(dp.id))?;
        let p = predicted[&dp.id];
        confusion.add(p, g);
        let t = tasks.entry(dp.task_tag().to_string()).or_default();
        t.0 += usize::from(p == g);
        t.1 += 1;
    }
    let n = confusion.total();
    Ok(EvalReport {
        accuracy: (confusion.true_positive + confusion.true_negative) as f64 / n as f64,
        n,
        per_task: tasks
            .into_iter()
            .map(|(task, (correct, n))| (task, TaskScore { accuracy: correct as f64 / n as f64, n }))
            .collect(),
        confusion,
        member_accuracies: None,
    })
}

pub fn member_accuracies(sets: &[PredictionSet], gold: &Dataset) -> Result<Vec<MemberAccuracy>, EnsembleError> {
    sets.iter()
        .map(|s| Ok(MemberAccuracy { model_tag: s.model_tag.clone(), accuracy: score(s.records(), gold)?.accuracy }))
        .collect()
}

/// Fraction of ids on which each pair of sets agrees.
pub fn pairwise_agreement(sets: &[PredictionSet]) -> Result<Vec<Vec<f64>>, EnsembleError> {
    check_alignment(sets)?;
    let n_ids = sets[0].len();
    let mut matrix = vec![vec![1.0; sets.len()]; sets.len()];
    for i in 0..sets.len() {
        for j in (i + 1)..sets.len() {
            let agree =
                sets[i].records.iter().zip(&sets[j].records).filter(|(a, b)| a.predicted == b.predicted).count();
            let rate = if n_ids == 0 { 1.0 } else { agree as f64 / n_ids as f64 };
            matrix[i][j] = rate;
            matrix[j][i] = rate;
        }
    }
    Ok(matrix)
}

/// Variant → accuracy rows, members first, closing with the ensemble.
pub fn render_report_table(report: &EvalReport) -> String {
    let members = report.member_accuracies.as_deref().unwrap_or(&[]);
    let last = if members.is_empty() { "Accuracy" } else { "Ensemble Result" };
    let width = members
        .iter()
        .map(|m| m.model_tag.chars().count())
        .chain(["Model Variant".len(), last.len()])
        .max()
        .unwrap_or(0);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>8}", "Model Variant", "Accuracy");
    for m in members {
        let _ = writeln!(out, "{:<width$}  {:>8.3}", m.model_tag, m.accuracy);
    }
    let _ = writeln!(out, "{:<width$}  {:>8.3}", last, report.accuracy);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{parse_dataset, DatasetFormat};
    use Label::{Hallucination as H, NotHallucination as N};

    fn set(tag: &str, labels: &[Label], p: Option<&[f64]>) -> PredictionSet {
        let records = labels
            .iter()
            .enumerate()
            .map(|(id, l)| PredictionRecord {
                id,
                predicted: *l,
                p_hallucination: p.map(|p| p[id]),
                model_tag: tag.into(),
            })
            .collect();
        PredictionSet::new(tag, records).unwrap()
    }

    fn gold(labels: &[Label]) -> Dataset {
        let text: String = labels
            .iter()
            .enumerate()
            .map(|(i, l)| {
                format!(
                    "{{\"hyp\":\"h{i}\",\"src\":\"s\",\"task\":\"{}\",\"label\":\"{l}\"}}\n",
                    if i % 2 == 0 { "DM" } else { "MT" }
                )
            })
            .collect();
        parse_dataset(text.as_bytes(), DatasetFormat::JsonLines).unwrap()
    }

    #[test]
    fn unanimous_seven() {
        let sets: Vec<_> = (0..7).map(|i| set(&format!("v{i}"), &[H], None)).collect();
        let v = majority_vote(&sets, TiePolicy::default()).unwrap();
        assert_eq!(
            v.items[0],
            VoteItem { id: 0, final_label: H, votes_hallucination: 7, votes_not: 0, tiebreak_used: false }
        );
    }

    #[test]
    fn four_to_three() {
        let labels = [H, N, H, N, H, N, H];
        let sets: Vec<_> = labels.iter().enumerate().map(|(i, l)| set(&format!("v{i}"), &[*l], None)).collect();
        let v = majority_vote(&sets, TiePolicy::default()).unwrap();
        assert_eq!((v.items[0].final_label, v.items[0].votes_hallucination, v.items[0].votes_not), (H, 4, 3));
        assert!(!v.items[0].tiebreak_used);
    }

    #[test]
    fn tie_policies() {
        // mean of 0.6 and 0.0 is 0.3 < 0.5
        let sets = [set("a", &[H], Some(&[0.6])), set("b", &[N], Some(&[0.0]))];
        let v = majority_vote(&sets, TiePolicy::MeanConfidence).unwrap();
        assert_eq!((v.items[0].final_label, v.items[0].tiebreak_used), (N, true));
        let v = majority_vote(&sets, TiePolicy::FlagHallucination).unwrap();
        assert_eq!(v.items[0].final_label, H);

        // only one set reports a confidence: mean over that one
        let sets = [set("a", &[H], None), set("b", &[N], Some(&[0.2]))];
        assert_eq!(majority_vote(&sets, TiePolicy::MeanConfidence).unwrap().items[0].final_label, N);
        let sets = [set("a", &[H], None), set("b", &[N], None)];
        assert_eq!(majority_vote(&sets, TiePolicy::MeanConfidence).unwrap().items[0].final_label, H);
        let sets = [set("a", &[H], Some(&[0.5])), set("b", &[N], Some(&[0.5]))];
        assert_eq!(majority_vote(&sets, TiePolicy::MeanConfidence).unwrap().items[0].final_label, H);
    }

    #[test]
    fn alignment_errors() {
        assert!(matches!(majority_vote(&[], TiePolicy::default()), Err(EnsembleError::NoSets)));
        let a = set("a", &[H, N, H], None);
        let b = PredictionSet::new(
            "b",
            vec![
                PredictionRecord { id: 0, predicted: H, p_hallucination: None, model_tag: "b".into() },
                PredictionRecord { id: 5, predicted: H, p_hallucination: None, model_tag: "b".into() },
            ],
        )
        .unwrap();
        match majority_vote(&[a.clone(), b], TiePolicy::default()) {
            Err(EnsembleError::MisalignedIds { set_index: 1, missing, extra, .. }) => {
                assert_eq!(missing, vec![1, 2]);
                assert_eq!(extra, vec![5]);
            }
            other => panic!("{other:?}"),
        }
        let dup = PredictionSet::new(
            "d",
            vec![
                PredictionRecord { id: 1, predicted: H, p_hallucination: None, model_tag: String::new() },
                PredictionRecord { id: 1, predicted: N, p_hallucination: None, model_tag: String::new() },
            ],
        );
        assert!(matches!(dup, Err(EnsembleError::DuplicateId { id: 1, .. })));
    }

    #[test]
    fn scoring() {
        let g = [H, N, H, N, H, N, H, N, H, N];
        let perfect = score(set("p", &g, None).records(), &gold(&g)).unwrap();
        assert_eq!(perfect.accuracy, 1.0);
        assert_eq!(
            perfect.confusion,
            Confusion { true_positive: 5, false_positive: 0, true_negative: 5, false_negative: 0 }
        );

        // wrong at ids 1, 4, 7: id 1 gold N -> FP, id 4 gold H -> FN, id 7 gold N -> FP
        let mut p = g;
        for i in [1, 4, 7] {
            p[i] = p[i].flipped();
        }
        let r = score(set("p", &p, None).records(), &gold(&g)).unwrap();
        assert!((r.accuracy - 0.7).abs() < 1e-12);
        assert_eq!(r.confusion, Confusion { true_positive: 4, false_positive: 2, true_negative: 3, false_negative: 1 });
        assert_eq!(r.confusion.total(), 10);
        // DM = even ids (4 wrong), MT = odd ids (1, 7 wrong)
        assert_eq!(r.per_task["DM"], TaskScore { accuracy: 0.8, n: 5 });
        assert_eq!(r.per_task["MT"], TaskScore { accuracy: 0.6, n: 5 });

        let short = set("s", &g[..9], None);
        assert!(matches!(score(short.records(), &gold(&g)), Err(EnsembleError::MisalignedIds { .. })));
        let unlabeled = parse_dataset(b"{\"hyp\":\"a\",\"src\":\"b\"}\n", DatasetFormat::JsonLines).unwrap();
        assert!(matches!(score(set("x", &[H], None).records(), &unlabeled), Err(EnsembleError::MissingGold(0))));
    }

    #[test]
    fn agreement_matrix() {
        let a = set("a", &[H, H, N, N], None);
        let b = set("b", &[H, H, N, H], None);
        let c = set("c", &[N, N, H, H], None);
        let m = pairwise_agreement(&[a.clone(), b, c]).unwrap();
        assert_eq!(m[0][0], 1.0);
        assert_eq!(m[0][1], 0.75);
        assert_eq!(m[1][0], 0.75);
        assert_eq!(m[0][2], 0.0);
        assert_eq!(pairwise_agreement(&[a.clone(), a]).unwrap()[0][1], 1.0);
    }

    #[test]
    fn report_table_shape() {
        let g = [H, N];
        let mut r = score(set("p", &g, None).records(), &gold(&g)).unwrap();
        r.member_accuracies = Some(vec![
            MemberAccuracy { model_tag: "model-v0".into(), accuracy: 0.838 },
            MemberAccuracy { model_tag: "model-v1".into(), accuracy: 0.844 },
        ]);
        let t = render_report_table(&r);
        let lines: Vec<_> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("model-v0") && lines[1].ends_with("0.838"));
        assert!(lines[3].starts_with("Ensemble Result") && lines[3].ends_with("1.000"));
    }

    #[test]
    fn tie_policy_parsing() {
        assert_eq!("mean-confidence".parse::<TiePolicy>().unwrap(), TiePolicy::MeanConfidence);
        assert_eq!("flag_hallucination".parse::<TiePolicy>().unwrap(), TiePolicy::FlagHallucination);
        assert!("coin".parse::<TiePolicy>().is_err());
    }
}
