//! Records, labels and predictions shared by every pipeline stage.
//!
//! Input files follow the SHROOM record shape (`hyp`, `src`, `tgt`, `ref`,
//! `task`, `label`). Unknown keys are kept verbatim in [`DataPoint::extra`]
//! and written back out by [`DataPoint::to_record`].

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record at {location}: {reason}")]
    MalformedRecord { location: String, reason: String },
    #[error("record at {location} is missing required field `{field}`")]
    MissingField { location: String, field: &'static str },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("cannot find a label in response {0:?}")]
    UnparseableLabel(String),
    #[error("probability {0} is outside [0, 1]")]
    InvalidProbability(f64),
}

/// Binary hallucination label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Hallucination,
    NotHallucination,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Hallucination, Label::NotHallucination];

    /// Canonical spelling, as used in source files and assistant turns.
    pub const fn as_str(self) -> &'static str {
        match self {
            Label::Hallucination => "Hallucination",
            Label::NotHallucination => "Not Hallucination",
        }
    }

    pub fn flipped(self) -> Label {
        match self {
            Label::Hallucination => Label::NotHallucination,
            Label::NotHallucination => Label::Hallucination,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Strict parse of the canonical spelling. Use [`parse_label_text`] for
/// free-form model output.
impl FromStr for Label {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Hallucination" => Ok(Label::Hallucination),
            "Not Hallucination" => Ok(Label::NotHallucination),
            other => Err(DataError::UnparseableLabel(other.to_string())),
        }
    }
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Interprets free-form model output as a label.
///
/// Matching is case-insensitive on whole words, with punctuation treated as
/// whitespace. The negated phrase is checked first since it contains the
/// positive one.
pub fn parse_label_text(raw: &str) -> Result<Label, DataError> {
    let normalized: String =
        raw.chars().map(|c| if c.is_alphanumeric() { c } else { ' ' }).collect::<String>().to_lowercase();
    let padded = format!(" {} ", normalized.split_whitespace().collect::<Vec<_>>().join(" "));
    let has = |phrase: &str| padded.contains(&format!(" {phrase} "));

    if has("not hallucination") || has("not hallucinated") {
        Ok(Label::NotHallucination)
    } else if has("hallucination") || has("hallucinated") {
        Ok(Label::Hallucination)
    } else {
        Err(DataError::UnparseableLabel(raw.to_string()))
    }
}

/// Which context field is authoritative for a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reference {
    Src,
    Tgt,
    Either,
}

impl FromStr for Reference {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "src" => Ok(Reference::Src),
            "tgt" => Ok(Reference::Tgt),
            "either" => Ok(Reference::Either),
            other => Err(format!("unknown ref value {other:?}")),
        }
    }
}

impl Reference {
    fn as_str(self) -> &'static str {
        match self {
            Reference::Src => "src",
            Reference::Tgt => "tgt",
            Reference::Either => "either",
        }
    }
}

const KNOWN_FIELDS: [&str; 6] = ["hyp", "src", "tgt", "ref", "task", "label"];

/// One example under test.
#[derive(Debug, Clone, PartialEq)]
pub struct DataPoint {
    /// Zero-based position in the source file.
    pub id: usize,
    pub hyp: String,
    pub src: Option<String>,
    pub tgt: Option<String>,
    pub reference: Reference,
    pub task: Option<String>,
    pub gold_label: Option<Label>,
    pub extra: Map<String, Value>,
}

impl DataPoint {
    /// Builds a point from one decoded JSON object. `location` only feeds
    /// error messages.
    pub fn from_record(id: usize, record: Map<String, Value>, location: &str) -> Result<Self, DataError> {
        let malformed = |reason: String| DataError::MalformedRecord { location: location.to_string(), reason };
        let mut record = record;

        let opt_string = |record: &mut Map<String, Value>, key: &str| -> Result<Option<String>, DataError> {
            match record.remove(key) {
                None | Some(Value::Null) => Ok(None),
                Some(Value::String(s)) => Ok(Some(s)),
                Some(other) => Err(malformed(format!("`{key}` must be a string, got {other}"))),
            }
        };

        let hyp = opt_string(&mut record, "hyp")?
            .ok_or_else(|| DataError::MissingField { location: location.to_string(), field: "hyp" })?;
        let src = opt_string(&mut record, "src")?;
        let tgt = opt_string(&mut record, "tgt")?;
        if src.is_none() && tgt.is_none() {
            return Err(DataError::MissingField { location: location.to_string(), field: "src/tgt" });
        }
        let reference = match opt_string(&mut record, "ref")? {
            Some(r) => r.parse::<Reference>().map_err(malformed)?,
            None => Reference::Either,
        };
        match reference {
            Reference::Src if src.is_none() => return Err(malformed("ref is \"src\" but `src` is absent".into())),
            Reference::Tgt if tgt.is_none() => return Err(malformed("ref is \"tgt\" but `tgt` is absent".into())),
            _ => {}
        }
        let task = opt_string(&mut record, "task")?;
        let gold_label = opt_string(&mut record, "label")?
            .map(|s| s.parse::<Label>())
            .transpose()
            .map_err(|e| malformed(e.to_string()))?;

        Ok(DataPoint { id, hyp, src, tgt, reference, task, gold_label, extra: record })
    }

    /// The record as it would appear in a source file (the id is positional
    /// and not emitted).
    pub fn to_record(&self) -> Map<String, Value> {
        let mut out = Map::new();
        out.insert("hyp".into(), Value::String(self.hyp.clone()));
        if let Some(src) = &self.src {
            out.insert("src".into(), Value::String(src.clone()));
        }
        if let Some(tgt) = &self.tgt {
            out.insert("tgt".into(), Value::String(tgt.clone()));
        }
        out.insert("ref".into(), Value::String(self.reference.as_str().into()));
        if let Some(task) = &self.task {
            out.insert("task".into(), Value::String(task.clone()));
        }
        if let Some(label) = self.gold_label {
            out.insert("label".into(), Value::String(label.as_str().into()));
        }
        for (k, v) in &self.extra {
            if !KNOWN_FIELDS.contains(&k.as_str()) {
                out.insert(k.clone(), v.clone());
            }
        }
        out
    }

    /// Task tag used for per-task breakdowns; `-` when the record has none.
    pub fn task_tag(&self) -> &str {
        self.task.as_deref().unwrap_or("-")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    JsonArray,
    JsonLines,
}

impl DatasetFormat {
    /// `.jsonl` / `.ndjson` are JSON lines, anything else a JSON array.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("ndjson") => DatasetFormat::JsonLines,
            _ => DatasetFormat::JsonArray,
        }
    }
}

/// An ordered, non-empty list of points plus the digest of the bytes they
/// were read from.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    points: Vec<DataPoint>,
    digest: String,
}

impl Dataset {
    /// Builds a dataset from in-memory points, renumbering ids by position.
    /// The digest covers the JSON-lines serialization of the records.
    pub fn from_points(points: Vec<DataPoint>) -> Result<Self, DataError> {
        if points.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        let points: Vec<DataPoint> = points
            .into_iter()
            .enumerate()
            .map(|(id, mut p)| {
                p.id = id;
                p
            })
            .collect();
        let mut bytes = Vec::new();
        for p in &points {
            serde_json::to_writer(&mut bytes, &p.to_record()).expect("map serializes");
            bytes.push(b'\n');
        }
        Ok(Dataset { digest: sha256_hex(&bytes), points })
    }

    pub fn points(&self) -> &[DataPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Hex SHA-256 of the source bytes.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn get(&self, id: usize) -> Option<&DataPoint> {
        self.points.get(id)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, DataPoint> {
        self.points.iter()
    }

    /// Writes the records back out as JSON lines.
    pub fn write_jsonl(&self, path: &Path) -> std::io::Result<usize> {
        let rows: Vec<_> = self.points.iter().map(DataPoint::to_record).collect();
        crate::io::write_jsonl(path, &rows)
    }
}

impl<'a> IntoIterator for &'a Dataset {
    type Item = &'a DataPoint;
    type IntoIter = std::slice::Iter<'a, DataPoint>;

    fn into_iter(self) -> Self::IntoIter {
        self.points.iter()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Dataset, DataError> {
    let bytes = std::fs::read(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    parse_dataset(&bytes, format)
}

/// Parses dataset bytes; ids follow record order.
pub fn parse_dataset(bytes: &[u8], format: DatasetFormat) -> Result<Dataset, DataError> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| DataError::MalformedRecord { location: "file".into(), reason: format!("not UTF-8: {e}") })?;

    let mut raw: Vec<(String, Value)> = Vec::new();
    match format {
        DatasetFormat::JsonArray => {
            let value: Value = serde_json::from_str(text)
                .map_err(|e| DataError::MalformedRecord { location: "file".into(), reason: e.to_string() })?;
            let Value::Array(items) = value else {
                return Err(DataError::MalformedRecord {
                    location: "file".into(),
                    reason: "top-level value is not an array".into(),
                });
            };
            raw.extend(items.into_iter().enumerate().map(|(i, v)| (format!("index {i}"), v)));
        }
        DatasetFormat::JsonLines => {
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let location = format!("line {}", i + 1);
                let v = serde_json::from_str(line)
                    .map_err(|e| DataError::MalformedRecord { location: location.clone(), reason: e.to_string() })?;
                raw.push((location, v));
            }
        }
    }

    if raw.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let points = raw
        .into_iter()
        .enumerate()
        .map(|(id, (location, value))| match value {
            Value::Object(map) => DataPoint::from_record(id, map, &location),
            other => Err(DataError::MalformedRecord { location, reason: format!("expected an object, got {other}") }),
        })
        .collect::<Result<Vec<_>, _>>()?;

    Ok(Dataset { points, digest: sha256_hex(bytes) })
}

/// P(Hallucination) and its complement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDistribution")]
pub struct LabelDistribution {
    pub p_hallucination: f64,
    pub p_not_hallucination: f64,
}

#[derive(Deserialize)]
struct RawDistribution {
    p_hallucination: f64,
    p_not_hallucination: f64,
}

impl TryFrom<RawDistribution> for LabelDistribution {
    type Error = String;

    fn try_from(raw: RawDistribution) -> Result<Self, Self::Error> {
        let d = LabelDistribution::new(raw.p_hallucination).map_err(|e| e.to_string())?;
        if (d.p_not_hallucination - raw.p_not_hallucination).abs() > 1e-9 {
            return Err(format!(
                "probabilities {} and {} do not sum to 1",
                raw.p_hallucination, raw.p_not_hallucination
            ));
        }
        Ok(LabelDistribution { p_hallucination: raw.p_hallucination, p_not_hallucination: raw.p_not_hallucination })
    }
}

impl LabelDistribution {
    pub fn new(p_hallucination: f64) -> Result<Self, DataError> {
        if !(0.0..=1.0).contains(&p_hallucination) {
            return Err(DataError::InvalidProbability(p_hallucination));
        }
        Ok(LabelDistribution { p_hallucination, p_not_hallucination: 1.0 - p_hallucination })
    }

    /// Two-class softmax over label scores, shifted by the max score so
    /// large logits do not overflow.
    pub fn from_scores(z_hallucination: f64, z_not: f64) -> Self {
        let max = z_hallucination.max(z_not);
        let e_h = (z_hallucination - max).exp();
        let e_n = (z_not - max).exp();
        let p_h = e_h / (e_h + e_n);
        LabelDistribution { p_hallucination: p_h, p_not_hallucination: 1.0 - p_h }
    }

    /// All mass on `label`.
    pub fn degenerate(label: Label) -> Self {
        match label {
            Label::Hallucination => LabelDistribution { p_hallucination: 1.0, p_not_hallucination: 0.0 },
            Label::NotHallucination => LabelDistribution { p_hallucination: 0.0, p_not_hallucination: 1.0 },
        }
    }

    /// Thresholded label; a 0.5 tie flags a hallucination.
    pub fn predicted(&self) -> Label {
        if self.p_hallucination >= 0.5 {
            Label::Hallucination
        } else {
            Label::NotHallucination
        }
    }
}

/// A model-produced label for one dataset item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakLabeledPoint {
    pub id: usize,
    pub predicted: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distribution: Option<LabelDistribution>,
    pub raw_response: String,
    pub attempt_count: u32,
}

/// One checkpoint's prediction for one id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: usize,
    pub predicted: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_hallucination: Option<f64>,
    #[serde(default)]
    pub model_tag: String,
}
