//! Chat transcript construction.
//!
//! A transcript is `[System] ++ k × [User, Assistant] ++ [User]`: the
//! system instruction, one user/assistant pair per few-shot exemplar, then
//! the query for the point being labeled.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, DataError, DataPoint, DatasetFormat, Label, Reference};

pub const DEFAULT_SYSTEM_INSTRUCTION: &str =
    "You are a model that decides if the Sentence is Hallucination or Not Hallucination.";

pub const DEFAULT_USER_TEMPLATE: &str = "Context: {context} Sentence: {sentence} Is the Sentence hallucinated or not?";

const CONTEXT_SLOT: &str = "{context}";
const SENTENCE_SLOT: &str = "{sentence}";

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("invalid user template: {0}")]
    InvalidTemplate(String),
    #[error("point {id} has no usable `{field}` context")]
    MissingContext { id: usize, field: &'static str },
    #[error("shot pool has {available} usable `{label}` examples, {needed} needed")]
    InsufficientPool { label: Label, needed: usize, available: usize },
    #[error("invalid prompt config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::Assistant, content: content.into() }
    }
}

/// A user-turn template holding `{context}` and `{sentence}` exactly once
/// each.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct UserTemplate {
    source: String,
    context_at: usize,
    sentence_at: usize,
}

impl UserTemplate {
    pub fn new(source: impl Into<String>) -> Result<Self, PromptError> {
        let source = source.into();
        let find_once = |slot: &str| -> Result<usize, PromptError> {
            let mut hits = source.match_indices(slot).map(|(i, _)| i);
            match (hits.next(), hits.next()) {
                (Some(i), None) => Ok(i),
                (None, _) => Err(PromptError::InvalidTemplate(format!("missing {slot}"))),
                (Some(_), Some(_)) => Err(PromptError::InvalidTemplate(format!("{slot} appears more than once"))),
            }
        };
        let context_at = find_once(CONTEXT_SLOT)?;
        let sentence_at = find_once(SENTENCE_SLOT)?;
        Ok(UserTemplate { source, context_at, sentence_at })
    }

    pub fn as_str(&self) -> &str {
        &self.source
    }

    /// Single-pass substitution: placeholder-like text inside the inserted
    /// values is left alone.
    pub fn render(&self, context: &str, sentence: &str) -> String {
        let mut slots =
            [(self.context_at, CONTEXT_SLOT.len(), context), (self.sentence_at, SENTENCE_SLOT.len(), sentence)];
        slots.sort_by_key(|s| s.0);
        let mut out = String::with_capacity(self.source.len() + context.len() + sentence.len());
        let mut cursor = 0;
        for (at, len, value) in slots {
            out.push_str(&self.source[cursor..at]);
            out.push_str(value);
            cursor = at + len;
        }
        out.push_str(&self.source[cursor..]);
        out
    }
}

impl Default for UserTemplate {
    fn default() -> Self {
        UserTemplate::new(DEFAULT_USER_TEMPLATE).expect("default template is valid")
    }
}

impl TryFrom<String> for UserTemplate {
    type Error = PromptError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        UserTemplate::new(s)
    }
}

impl From<UserTemplate> for String {
    fn from(t: UserTemplate) -> String {
        t.source
    }
}

/// A labeled few-shot exemplar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotExample {
    pub context: String,
    pub sentence: String,
    pub label: Label,
}

impl ShotExample {
    pub fn new(context: impl Into<String>, sentence: impl Into<String>, label: Label) -> Result<Self, PromptError> {
        let (context, sentence) = (context.into(), sentence.into());
        if context.trim().is_empty() || sentence.trim().is_empty() {
            return Err(PromptError::InvalidConfig("shot context and sentence must be non-empty".into()));
        }
        Ok(ShotExample { context, sentence, label })
    }
}

/// System instruction, exemplars and template for one labeling setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub system_instruction: String,
    pub shots: Vec<ShotExample>,
    pub user_template: UserTemplate,
    pub seed: u64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            system_instruction: DEFAULT_SYSTEM_INSTRUCTION.to_string(),
            shots: Vec::new(),
            user_template: UserTemplate::default(),
            seed: 0,
        }
    }
}

impl PromptConfig {
    pub fn with_instruction(&self, instruction: impl Into<String>) -> Self {
        PromptConfig { system_instruction: instruction.into(), ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        if self.system_instruction.trim().is_empty() {
            return Err(PromptError::InvalidConfig("system instruction is empty".into()));
        }
        Ok(())
    }
}

/// The reference context of a point: `tgt` or `src` per its `ref`, with
/// `either` preferring `tgt`. Blank fields count as absent.
pub fn build_context(dp: &DataPoint) -> Result<&str, PromptError> {
    fn usable(f: &Option<String>) -> Option<&str> {
        f.as_deref().filter(|s| !s.trim().is_empty())
    }
    let missing = |field| PromptError::MissingContext { id: dp.id, field };
    match dp.reference {
        Reference::Tgt => usable(&dp.tgt).ok_or_else(|| missing("tgt")),
        Reference::Src => usable(&dp.src).ok_or_else(|| missing("src")),
        Reference::Either => usable(&dp.tgt).or_else(|| usable(&dp.src)).ok_or_else(|| missing("src/tgt")),
    }
}

pub fn render_user_turn(dp: &DataPoint, template: &UserTemplate) -> Result<String, PromptError> {
    Ok(template.render(build_context(dp)?, &dp.hyp))
}

pub fn render_transcript(config: &PromptConfig, dp: &DataPoint) -> Result<Vec<ChatMessage>, PromptError> {
    config.validate()?;
    let mut messages = Vec::with_capacity(2 * config.shots.len() + 2);
    messages.push(ChatMessage::system(&config.system_instruction));
    for shot in &config.shots {
        messages.push(ChatMessage::user(config.user_template.render(&shot.context, &shot.sentence)));
        messages.push(ChatMessage::assistant(shot.label.as_str()));
    }
    messages.push(ChatMessage::user(render_user_turn(dp, &config.user_template)?));
    Ok(messages)
}

/// Label-balanced, seeded exemplar selection.
///
/// Usable pool entries (gold label, non-blank context and sentence) are
/// split by label, each side shuffled with a ChaCha8 stream seeded by
/// `seed`, and the result alternates labels starting with Hallucination,
/// which receives `ceil(k/2)` slots.
pub fn select_shots(pool: &[DataPoint], k: usize, seed: u64) -> Result<Vec<ShotExample>, PromptError> {
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut by_label: [Vec<ShotExample>; 2] = [Vec::new(), Vec::new()];
    for dp in pool {
        let Some(label) = dp.gold_label else { continue };
        let Ok(context) = build_context(dp) else { continue };
        let Ok(shot) = ShotExample::new(context, dp.hyp.as_str(), label) else { continue };
        by_label[label_slot(label)].push(shot);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let needs = [k.div_ceil(2), k / 2];
    for (slot, label) in Label::ALL.into_iter().enumerate() {
        if by_label[slot].len() < needs[slot] {
            return Err(PromptError::InsufficientPool { label, needed: needs[slot], available: by_label[slot].len() });
        }
        by_label[slot].shuffle(&mut rng);
        by_label[slot].truncate(needs[slot]);
    }

    let [hallucinated, faithful] = by_label;
    let mut out = Vec::with_capacity(k);
    let mut faithful = faithful.into_iter();
    for shot in hallucinated {
        out.push(shot);
        out.extend(faithful.next());
    }
    Ok(out)
}

fn label_slot(label: Label) -> usize {
    match label {
        Label::Hallucination => 0,
        Label::NotHallucination => 1,
    }
}

/// On-disk prompt configuration. Paths are relative to the config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptConfigFile {
    #[serde(default)]
    pub system_instruction: Option<String>,
    #[serde(default)]
    pub user_template: Option<String>,
    #[serde(default)]
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub shot_pool_path: Option<PathBuf>,
}

impl PromptConfigFile {
    /// Loads the shot pool (if any) and selects `k` exemplars.
    pub fn resolve(&self, base_dir: &Path) -> Result<PromptConfig, PromptError> {
        let user_template = match &self.user_template {
            Some(t) => UserTemplate::new(t.clone())?,
            None => UserTemplate::default(),
        };
        let shots = match (&self.shot_pool_path, self.k) {
            (_, 0) => Vec::new(),
            (None, k) => return Err(PromptError::InvalidConfig(format!("k = {k} requires shot_pool_path"))),
            (Some(path), k) => {
                let path = base_dir.join(path);
                let pool = data::load_dataset(&path, DatasetFormat::from_path(&path))?;
                select_shots(pool.points(), k, self.seed)?
            }
        };
        let config = PromptConfig {
            system_instruction: self
                .system_instruction
                .clone()
                .unwrap_or_else(|| DEFAULT_SYSTEM_INSTRUCTION.to_string()),
            shots,
            user_template,
            seed: self.seed,
        };
        config.validate()?;
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::parse_label_text;
    use serde_json::Map;

    fn point(hyp: &str, src: Option<&str>, tgt: Option<&str>, reference: Reference, label: Option<Label>) -> DataPoint {
        DataPoint {
            id: 0,
            hyp: hyp.into(),
            src: src.map(Into::into),
            tgt: tgt.map(Into::into),
            reference,
            task: Some("DM".into()),
            gold_label: label,
            extra: Map::new(),
        }
    }

    fn weasel() -> DataPoint {
        point(
            "Resembling or characteristic of a weasel.",
            None,
            Some("Resembling a weasel (in appearance)."),
            Reference::Tgt,
            Some(Label::NotHallucination),
        )
    }

    #[test]
    fn context_selection() {
        assert_eq!(build_context(&weasel()).unwrap(), "Resembling a weasel (in appearance).");
        let src = point("x", Some("Bonjour"), Some("Hello"), Reference::Src, None);
        assert_eq!(build_context(&src).unwrap(), "Bonjour");
        let either = point("x", Some("abc"), None, Reference::Either, None);
        assert_eq!(build_context(&either).unwrap(), "abc");
        let both = point("x", Some("abc"), Some("def"), Reference::Either, None);
        assert_eq!(build_context(&both).unwrap(), "def");
        let blank = point("x", Some("abc"), Some("  "), Reference::Tgt, None);
        assert!(matches!(build_context(&blank), Err(PromptError::MissingContext { field: "tgt", .. })));
    }

    #[test]
    fn user_turn_rendering() {
        assert_eq!(
            render_user_turn(&weasel(), &UserTemplate::default()).unwrap(),
            "Context: Resembling a weasel (in appearance). Sentence: Resembling or characteristic of a weasel. Is the Sentence hallucinated or not?"
        );
        let t = UserTemplate::new("{sentence}|{context}").unwrap();
        let p = point("a", None, Some("b"), Reference::Tgt, None);
        assert_eq!(render_user_turn(&p, &t).unwrap(), "a|b");
        let tricky = point("{context}", None, Some("{sentence}"), Reference::Tgt, None);
        assert_eq!(render_user_turn(&tricky, &t).unwrap(), "{context}|{sentence}");
    }

    #[test]
    fn template_validation() {
        assert!(matches!(UserTemplate::new("Sentence: {sentence}"), Err(PromptError::InvalidTemplate(_))));
        assert!(matches!(UserTemplate::new("{context} {sentence} {context}"), Err(PromptError::InvalidTemplate(_))));
        assert!(serde_json::from_str::<UserTemplate>(r#""{context} only""#).is_err());
    }

    #[test]
    fn zero_shot_transcript() {
        let msgs = render_transcript(&PromptConfig::default(), &weasel()).unwrap();
        assert_eq!(msgs.len(), 2);
        assert_eq!(msgs[0], ChatMessage::system(DEFAULT_SYSTEM_INSTRUCTION));
        assert_eq!(msgs[1].role, Role::User);
    }

    fn pool(n_h: usize, n_nh: usize) -> Vec<DataPoint> {
        let mut out = Vec::new();
        for i in 0..n_h {
            out.push(point(
                &format!("h{i}"),
                Some(&format!("ctx h{i}")),
                None,
                Reference::Src,
                Some(Label::Hallucination),
            ));
        }
        for i in 0..n_nh {
            out.push(point(
                &format!("n{i}"),
                Some(&format!("ctx n{i}")),
                None,
                Reference::Src,
                Some(Label::NotHallucination),
            ));
        }
        out
    }

    #[test]
    fn eight_shot_transcript_shape() {
        let shots = select_shots(&pool(5, 5), 8, 7).unwrap();
        let config = PromptConfig { shots, ..PromptConfig::default() };
        let msgs = render_transcript(&config, &weasel()).unwrap();
        assert_eq!(msgs.len(), 18);
        assert_eq!(msgs, render_transcript(&config, &weasel()).unwrap());
        for (i, m) in msgs.iter().enumerate().skip(1).take(16) {
            let expected = if i % 2 == 1 { Role::User } else { Role::Assistant };
            assert_eq!(m.role, expected);
            if m.role == Role::Assistant {
                let shot = &config.shots[(i - 2) / 2];
                assert_eq!(parse_label_text(&m.content).unwrap(), shot.label);
            }
        }
        assert_eq!(msgs[17].role, Role::User);
    }

    #[test]
    fn shot_selection_rules() {
        assert!(select_shots(&pool(0, 0), 0, 1).unwrap().is_empty());

        // 4 + 4 pool with k = 8 must use every example: H N H N H N H N.
        let p = pool(4, 4);
        for seed in [0, 1, 99, u64::MAX] {
            let shots = select_shots(&p, 8, seed).unwrap();
            assert_eq!(shots.len(), 8);
            for (i, s) in shots.iter().enumerate() {
                let expected = if i % 2 == 0 { Label::Hallucination } else { Label::NotHallucination };
                assert_eq!(s.label, expected);
            }
            let mut sentences: Vec<_> = shots.iter().map(|s| s.sentence.clone()).collect();
            sentences.sort();
            assert_eq!(sentences, vec!["h0", "h1", "h2", "h3", "n0", "n1", "n2", "n3"]);
        }

        let odd = select_shots(&pool(3, 3), 5, 4).unwrap();
        assert_eq!(odd.iter().filter(|s| s.label == Label::Hallucination).count(), 3);
        assert_eq!(odd.last().unwrap().label, Label::Hallucination);

        assert!(matches!(
            select_shots(&pool(2, 0), 8, 0),
            Err(PromptError::InsufficientPool { label: Label::Hallucination, needed: 4, available: 2 })
        ));
    }

    #[test]
    fn shot_selection_is_seeded() {
        let p = pool(10, 10);
        assert_eq!(select_shots(&p, 6, 3).unwrap(), select_shots(&p, 6, 3).unwrap());
        let differs = (0..20).any(|s| select_shots(&p, 6, s).unwrap() != select_shots(&p, 6, 3).unwrap());
        assert!(differs);
    }

    #[test]
    fn config_file_requires_pool_for_shots() {
        let f = PromptConfigFile { k: 2, ..Default::default() };
        assert!(matches!(f.resolve(Path::new(".")), Err(PromptError::InvalidConfig(_))));
        let resolved = PromptConfigFile::default().resolve(Path::new(".")).unwrap();
        assert_eq!(resolved, PromptConfig::default());
    }

    proptest::proptest! {
        #[test]
        fn transcript_alternates_with_2k_plus_2_turns(k in 0usize..=12, seed in proptest::prelude::any::<u64>()) {
            let config = PromptConfig { shots: select_shots(&pool(6, 6), k, seed).unwrap(), ..PromptConfig::default() };
            let msgs = render_transcript(&config, &weasel()).unwrap();
            proptest::prop_assert_eq!(msgs.len(), 2 * k + 2);
            proptest::prop_assert_eq!(msgs[0].role, Role::System);
            for (i, m) in msgs.iter().enumerate().skip(1) {
                let want = if i % 2 == 1 { Role::User } else { Role::Assistant };
                proptest::prop_assert_eq!(m.role, want);
            }
            proptest::prop_assert_eq!(msgs.last().unwrap().content.as_str(), render_user_turn(&weasel(), &UserTemplate::default()).unwrap());
        }
    }
}
