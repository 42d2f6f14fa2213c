//! Resumable weak labeling into a run directory.
//!
//! Layout: `manifest.json` describes the run, `labels.jsonl` holds one
//! [`LabelEntry`] per item in id order and grows as items finish.

use std::collections::HashSet;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{LabelEntry, Labeler, WeakLabelError};
use crate::backend::BackendConfig;
use crate::data::{sha256_hex, DataPoint, Dataset, WeakLabeledPoint};
use crate::prompt::PromptConfig;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LABELS_FILE: &str = "labels.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCounts {
    pub total: usize,
    pub labeled: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub dataset_digest: String,
    pub prompt_config: PromptConfig,
    /// Backend fingerprint; identifies endpoint, model and decoding.
    pub backend: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend_config: Option<BackendConfig>,
    pub started_at: DateTime<Utc>,
    pub finished_at: Option<DateTime<Utc>>,
    pub counts: RunCounts,
}

#[derive(Debug, Clone)]
pub struct LabelOptions {
    pub resume: bool,
    /// Largest tolerated failed / total ratio.
    pub failure_threshold: f64,
    /// Label at most this many pending items in this invocation.
    pub max_items: Option<usize>,
    /// Recorded in the manifest; never contains credentials.
    pub backend_config: Option<BackendConfig>,
}

impl Default for LabelOptions {
    fn default() -> Self {
        LabelOptions { resume: false, failure_threshold: 0.2, max_items: None, backend_config: None }
    }
}

#[derive(Debug, Clone)]
pub struct LabelRun {
    /// Every entry in `labels.jsonl`, resumed ones included, by id.
    pub entries: Vec<LabelEntry>,
    pub manifest: RunManifest,
    /// Items labeled by this invocation.
    pub processed: usize,
}

impl LabelRun {
    pub fn labeled(&self) -> impl Iterator<Item = &WeakLabeledPoint> {
        self.entries.iter().filter_map(|e| match e {
            LabelEntry::Labeled(p) => Some(p),
            LabelEntry::Failed(_) => None,
        })
    }

    pub fn is_complete(&self) -> bool {
        self.manifest.finished_at.is_some()
    }
}

/// Labels every point of `dataset` into `run_dir/labels.jsonl`.
///
/// With `resume`, ids already in the file are skipped once the stored
/// manifest matches this dataset, prompt and backend; a torn trailing line
/// from an interrupted writer is discarded. Item failures are recorded,
/// and the run stops early once failures exceed the threshold.
pub fn generate_weak_labels(
    dataset: &Dataset,
    config: &PromptConfig,
    labeler: &Labeler<'_>,
    run_dir: &Path,
    opts: &LabelOptions,
) -> Result<LabelRun, WeakLabelError> {
    fs::create_dir_all(run_dir).map_err(|e| WeakLabelError::io(run_dir, e))?;
    let manifest_path = run_dir.join(MANIFEST_FILE);
    let labels_path = run_dir.join(LABELS_FILE);
    let fingerprint = labeler.backend.fingerprint();

    let previous = if opts.resume && manifest_path.exists() {
        let bytes = fs::read(&manifest_path).map_err(|e| WeakLabelError::io(&manifest_path, e))?;
        let m: RunManifest =
            serde_json::from_slice(&bytes).map_err(|e| WeakLabelError::io(&manifest_path, std::io::Error::other(e)))?;
        if m.dataset_digest != dataset.digest() {
            return Err(WeakLabelError::DigestMismatch {
                expected: m.dataset_digest,
                found: dataset.digest().to_string(),
            });
        }
        if m.prompt_config != *config {
            return Err(WeakLabelError::ConfigMismatch("prompt configuration"));
        }
        if m.backend != fingerprint {
            return Err(WeakLabelError::ConfigMismatch("backend"));
        }
        Some(m)
    } else {
        None
    };

    let mut entries = match previous {
        Some(_) => load_and_repair(&labels_path)?,
        None => {
            if labels_path.exists() {
                fs::remove_file(&labels_path).map_err(|e| WeakLabelError::io(&labels_path, e))?;
            }
            Vec::new()
        }
    };
    entries.retain(|e| e.id() < dataset.len());

    let total = dataset.len();
    let count = |entries: &[LabelEntry]| {
        let failed = entries.iter().filter(|e| e.is_failed()).count();
        RunCounts { total, labeled: entries.len() - failed, failed }
    };
    let mut manifest = RunManifest {
        run_id: run_id(dataset, config, &fingerprint),
        dataset_digest: dataset.digest().to_string(),
        prompt_config: config.clone(),
        backend: fingerprint,
        backend_config: opts.backend_config.clone(),
        started_at: previous.as_ref().map_or_else(Utc::now, |m| m.started_at),
        finished_at: None,
        counts: count(&entries),
    };
    crate::io::write_json_pretty(&manifest_path, &manifest).map_err(|e| WeakLabelError::io(&manifest_path, e))?;

    let done: HashSet<usize> = entries.iter().map(LabelEntry::id).collect();
    let mut pending: Vec<&DataPoint> = dataset.iter().filter(|p| !done.contains(&p.id)).collect();
    if let Some(limit) = opts.max_items {
        pending.truncate(limit);
    }

    let allowed_failures = (opts.failure_threshold * total as f64).floor() as usize;
    let mut failed = manifest.counts.failed;
    let mut io_error = None;
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&labels_path)
        .map_err(|e| WeakLabelError::io(&labels_path, e))?;

    let before = entries.len();
    labeler.label_ordered(config, &pending, |entry| {
        let mut line = serde_json::to_vec(&entry).expect("entry serializes");
        line.push(b'\n');
        if let Err(e) = file.write_all(&line).and_then(|_| file.flush()) {
            io_error = Some(e);
            return false;
        }
        if let LabelEntry::Failed(f) = &entry {
            tracing::warn!(id = f.id, error = %f.error, "item failed");
            failed += 1;
        }
        entries.push(entry);
        let n = entries.len();
        if n % 50 == 0 {
            tracing::info!(done = n, total, "labeling progress");
        }
        failed <= allowed_failures
    });
    drop(file);
    if let Some(e) = io_error {
        return Err(WeakLabelError::io(&labels_path, e));
    }
    let processed = entries.len() - before;

    if !entries.windows(2).all(|w| w[0].id() < w[1].id()) {
        entries.sort_by_key(LabelEntry::id);
        crate::io::write_jsonl(&labels_path, &entries).map_err(|e| WeakLabelError::io(&labels_path, e))?;
    }

    manifest.counts = count(&entries);
    if manifest.counts.labeled + manifest.counts.failed == total {
        manifest.finished_at = Some(Utc::now());
    }
    crate::io::write_json_pretty(&manifest_path, &manifest).map_err(|e| WeakLabelError::io(&manifest_path, e))?;

    if manifest.counts.failed > allowed_failures {
        return Err(WeakLabelError::FailureThreshold {
            failed: manifest.counts.failed,
            total,
            threshold: opts.failure_threshold,
        });
    }
    Ok(LabelRun { entries, manifest, processed })
}

/// Reads `labels.jsonl` (missing file = empty).
pub fn read_label_entries(path: &Path) -> Result<Vec<LabelEntry>, WeakLabelError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    Ok(crate::io::read_jsonl(path)?)
}

/// Keeps the longest prefix of well-formed, newline-terminated lines and
/// truncates the file to it.
fn load_and_repair(path: &Path) -> Result<Vec<LabelEntry>, WeakLabelError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(WeakLabelError::io(path, e)),
    };
    let mut entries = Vec::new();
    let mut good_len = 0;
    let mut seen = HashSet::new();
    for chunk in bytes.split_inclusive(|&b| b == b'\n') {
        if chunk.last() != Some(&b'\n') {
            break;
        }
        let Ok(entry) = serde_json::from_slice::<LabelEntry>(&chunk[..chunk.len() - 1]) else { break };
        if !seen.insert(entry.id()) {
            break;
        }
        entries.push(entry);
        good_len += chunk.len();
    }
    if good_len < bytes.len() {
        tracing::warn!(path = %path.display(), dropped = bytes.len() - good_len, "discarding torn tail of labels file");
        let f = OpenOptions::new().write(true).open(path).map_err(|e| WeakLabelError::io(path, e))?;
        f.set_len(good_len as u64).map_err(|e| WeakLabelError::io(path, e))?;
    }
    Ok(entries)
}

fn run_id(dataset: &Dataset, config: &PromptConfig, fingerprint: &str) -> String {
    let mut material = Vec::new();
    material.extend_from_slice(dataset.digest().as_bytes());
    material.extend(serde_json::to_vec(config).expect("config serializes"));
    material.extend_from_slice(fingerprint.as_bytes());
    sha256_hex(&material)[..16].to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MockBackend;
    use crate::data::{parse_dataset, DatasetFormat, Label};
    use crate::weak_label::test_support::Scripted;

    fn three() -> Dataset {
        let text = concat!(
            "{\"hyp\":\"Resembling or characteristic of a weasel.\",\"ref\":\"tgt\",\"tgt\":\"Resembling a weasel (in appearance).\",\"task\":\"DM\"}\n",
            "{\"hyp\":\"the cat sat\",\"ref\":\"src\",\"src\":\"The cat sat.\",\"task\":\"PG\"}\n",
            "{\"hyp\":\"a dog ran far\",\"ref\":\"either\",\"src\":\"a dog ran\",\"task\":\"MT\"}\n",
        );
        parse_dataset(text.as_bytes(), DatasetFormat::JsonLines).unwrap()
    }

    #[test]
    fn labels_in_id_order_with_mock() {
        let dir = tempfile::tempdir().unwrap();
        let mock = MockBackend;
        let labeler = Labeler::new(&mock).with_concurrency(3);
        let run =
            generate_weak_labels(&three(), &PromptConfig::default(), &labeler, dir.path(), &LabelOptions::default())
                .unwrap();
        assert!(run.is_complete());
        assert_eq!(run.manifest.counts, RunCounts { total: 3, labeled: 3, failed: 0 });
        let first = run.labeled().next().unwrap();
        assert_eq!((first.id, first.predicted), (0, Label::Hallucination));
        assert!((first.distribution.unwrap().p_hallucination - 0.625).abs() < 1e-12);
        let on_disk = read_label_entries(&dir.path().join(LABELS_FILE)).unwrap();
        assert_eq!(on_disk, run.entries);
        assert_eq!(on_disk.iter().map(LabelEntry::id).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn resume_only_labels_the_rest() {
        let dir = tempfile::tempdir().unwrap();
        let ds = three();
        let mock = MockBackend;
        let partial = Labeler::new(&mock);
        let opts = LabelOptions { max_items: Some(2), ..Default::default() };
        let run = generate_weak_labels(&ds, &PromptConfig::default(), &partial, dir.path(), &opts).unwrap();
        assert!(!run.is_complete());
        assert_eq!(partial.backend_calls(), 2);

        let resumed = Labeler::new(&mock);
        let opts = LabelOptions { resume: true, ..Default::default() };
        let run = generate_weak_labels(&ds, &PromptConfig::default(), &resumed, dir.path(), &opts).unwrap();
        assert_eq!(resumed.backend_calls(), 1);
        assert_eq!(run.processed, 1);
        assert!(run.is_complete());

        let again = Labeler::new(&mock);
        generate_weak_labels(&ds, &PromptConfig::default(), &again, dir.path(), &opts).unwrap();
        assert_eq!(again.backend_calls(), 0);
    }

    #[test]
    fn resume_rejects_edited_dataset_and_config() {
        let dir = tempfile::tempdir().unwrap();
        let mock = MockBackend;
        let opts = LabelOptions { max_items: Some(1), ..Default::default() };
        generate_weak_labels(&three(), &PromptConfig::default(), &Labeler::new(&mock), dir.path(), &opts).unwrap();

        let edited = parse_dataset(b"{\"hyp\":\"x\",\"src\":\"y\"}\n", DatasetFormat::JsonLines).unwrap();
        let resume = LabelOptions { resume: true, ..Default::default() };
        let err = generate_weak_labels(&edited, &PromptConfig::default(), &Labeler::new(&mock), dir.path(), &resume)
            .unwrap_err();
        assert!(matches!(err, WeakLabelError::DigestMismatch { .. }), "{err}");

        let other = PromptConfig::default().with_instruction("Judge the sentence.");
        let err = generate_weak_labels(&three(), &other, &Labeler::new(&mock), dir.path(), &resume).unwrap_err();
        assert!(matches!(err, WeakLabelError::ConfigMismatch(_)), "{err}");
    }

    #[test]
    fn torn_tail_is_relabeled() {
        let dir = tempfile::tempdir().unwrap();
        let ds = three();
        let mock = MockBackend;
        generate_weak_labels(&ds, &PromptConfig::default(), &Labeler::new(&mock), dir.path(), &LabelOptions::default())
            .unwrap();
        let labels = dir.path().join(LABELS_FILE);
        let full = fs::read(&labels).unwrap();
        let cut = full.iter().position(|&b| b == b'\n').unwrap() + 10;
        fs::write(&labels, &full[..cut]).unwrap();

        let resumed = Labeler::new(&mock);
        let opts = LabelOptions { resume: true, ..Default::default() };
        generate_weak_labels(&ds, &PromptConfig::default(), &resumed, dir.path(), &opts).unwrap();
        assert_eq!(resumed.backend_calls(), 2);
        assert_eq!(fs::read(&labels).unwrap(), full);
    }

    #[test]
    fn failure_threshold_stops_the_run() {
        let dir = tempfile::tempdir().unwrap();
        let backend = Scripted::new(&["ERR"]);
        let labeler = Labeler::new(&backend);
        let err =
            generate_weak_labels(&three(), &PromptConfig::default(), &labeler, dir.path(), &LabelOptions::default())
                .unwrap_err();
        assert!(matches!(err, WeakLabelError::FailureThreshold { failed: 1, total: 3, .. }), "{err}");
        // floor(0.2 * 3) = 0 failures allowed, so the first failure stops it
        let written = read_label_entries(&dir.path().join(LABELS_FILE)).unwrap();
        assert_eq!(written.len(), 1);

        let tolerant = LabelOptions { failure_threshold: 1.0, ..Default::default() };
        let run =
            generate_weak_labels(&three(), &PromptConfig::default(), &Labeler::new(&backend), dir.path(), &tolerant)
                .unwrap();
        assert_eq!(run.manifest.counts, RunCounts { total: 3, labeled: 0, failed: 3 });
        assert!(run.is_complete());
    }
}
