//! The `hallu-weak` command line.
//!
//! Every command reads one JSON pipeline config (`--config`), works inside a
//! run directory, writes machine-readable artifacts to files, prints tables
//! to stdout and logs to stderr. Exit codes: 0 success, 1 usage, config or
//! I/O error, 2 too many item failures.

use std::fs::{self, File, TryLockError};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::backend::{self, BackendConfig};
use crate::data::{load_dataset, Dataset, DatasetFormat};
use crate::ensemble::{self, EnsembleError, EvalReport, PredictionSet, TiePolicy};
use crate::prompt::{PromptConfig, PromptConfigFile};
use crate::reconstruct;
use crate::weak_label::{
    generate_weak_labels, optimize_instruction, read_label_entries, run_stages, LabelEntry, LabelOptions, Labeler,
    ResponseCache, StageLedger, StageSpec, WeakLabelError,
};
use crate::weak_label::{LABELS_FILE, MANIFEST_FILE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_PARTIAL: i32 = 2;

pub const LEDGER_FILE: &str = "ledger.json";
pub const BEST_PROMPT_FILE: &str = "best_prompt.json";
pub const LOCK_FILE: &str = ".lock";
const DEFAULT_RUN_DIR: &str = "run";

#[derive(Debug, Parser)]
#[command(name = "hallu-weak", version, about = "Weak labeling and ensemble scoring for hallucination detection")]
pub struct Cli {
    /// Pipeline config (JSON). Relative paths inside it resolve against its directory.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory; overrides the config's `run_dir`.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    /// Seed for shot selection and the training manifest; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Weak-label the training set into <run-dir>/labels.jsonl.
    Label(LabelArgs),
    /// Evaluate prompt stages and instruction candidates on the validation set.
    Optimize(OptimizeArgs),
    /// Turn weak labels into chat training records plus a training manifest.
    Reconstruct(ReconstructArgs),
    /// Majority-vote prediction files into ensemble predictions.
    Vote(VoteArgs),
    /// Score a prediction file against a gold dataset.
    Score(ScoreArgs),
    /// Summarize the artifacts in a run directory.
    Report,
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    /// Continue an interrupted run instead of starting over.
    #[arg(long)]
    pub resume: bool,
    /// Label at most this many pending items, then stop.
    #[arg(long)]
    pub max_items: Option<usize>,
    /// Use <run-dir>/best_prompt.json from a previous `optimize`.
    #[arg(long)]
    pub use_best: bool,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    /// Instruction candidates: a JSON array of strings, or one per line.
    #[arg(long)]
    pub candidates: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    /// Output chat JSONL; the training manifest is written beside it.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VoteArgs {
    /// Prediction JSONL files; defaults to the config's ensemble inputs.
    pub paths: Vec<PathBuf>,
    #[arg(long)]
    pub tie_policy: Option<TiePolicy>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Gold dataset; when given, members and the ensemble are scored.
    #[arg(long)]
    pub gold: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    pub predictions: PathBuf,
    pub gold: PathBuf,
    /// Report JSON path; defaults to <run-dir>/score.json.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

impl clap::ValueEnum for TiePolicy {
    fn value_variants<'a>() -> &'a [Self] {
        &[TiePolicy::MeanConfidence, TiePolicy::FlagHallucination]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(match self {
            TiePolicy::MeanConfidence => "mean-confidence",
            TiePolicy::FlagHallucination => "flag-hallucination",
        }))
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub run_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub datasets: DatasetPaths,
    #[serde(default)]
    pub prompt: PromptConfigFile,
    #[serde(default)]
    pub backend: Option<BackendConfig>,
    #[serde(default)]
    pub label: LabelSection,
    #[serde(default)]
    pub optimize: OptimizeSection,
    #[serde(default)]
    pub reconstruct: ReconstructSection,
    #[serde(default)]
    pub ensemble: EnsembleSection,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetPaths {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelSection {
    pub failure_threshold: f64,
    pub concurrency: usize,
}

impl Default for LabelSection {
    fn default() -> Self {
        LabelSection { failure_threshold: 0.2, concurrency: 4 }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizeSection {
    pub stages: Vec<StageSpec>,
    pub candidates: Vec<String>,
    pub candidates_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconstructSection {
    pub output: Option<PathBuf>,
    pub manifest_overrides: Map<String, Value>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleSection {
    pub predictions: Vec<PathBuf>,
    pub tie_policy: TiePolicy,
    pub output: Option<PathBuf>,
}

/// A command failure carrying its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        CliError { code: EXIT_ERROR, message: message.into() }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<WeakLabelError> for CliError {
    fn from(e: WeakLabelError) -> Self {
        let code = match e {
            WeakLabelError::FailureThreshold { .. } => EXIT_PARTIAL,
            _ => EXIT_ERROR,
        };
        CliError { code, message: e.to_string() }
    }
}

macro_rules! config_errors {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::config(e.to_string())
            }
        }
    )*};
}
config_errors!(
    crate::data::DataError,
    crate::prompt::PromptError,
    crate::backend::BackendError,
    crate::reconstruct::ReconstructError,
    crate::io::JsonlError,
    EnsembleError
);

type CliResult = Result<(), CliError>;

/// Config plus the directory its relative paths resolve against.
struct Context {
    config: PipelineConfig,
    base_dir: PathBuf,
    run_dir: PathBuf,
}

impl Context {
    fn load(cli: &Cli) -> Result<Self, CliError> {
        let (mut config, base_dir) = match &cli.config {
            Some(path) => {
                let bytes = fs::read(path)
                    .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
                let config: PipelineConfig = serde_json::from_slice(&bytes)
                    .map_err(|e| CliError::config(format!("invalid config {}: {e}", path.display())))?;
                let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
                (config, dir)
            }
            None => (PipelineConfig::default(), PathBuf::new()),
        };
        if let Some(seed) = cli.seed.or(config.seed) {
            config.seed = Some(seed);
            config.prompt.seed = seed;
        }
        let run_dir = match (&cli.run_dir, &config.run_dir) {
            (Some(flag), _) => flag.clone(),
            (None, Some(dir)) => base_dir.join(dir),
            (None, None) => PathBuf::from(DEFAULT_RUN_DIR),
        };
        Ok(Context { config, base_dir, run_dir })
    }

    fn resolve(&self, path: &Path) -> PathBuf {
        self.base_dir.join(path)
    }

    fn dataset(&self, which: &str, path: &Option<PathBuf>) -> Result<(PathBuf, Dataset), CliError> {
        let path = path
            .as_ref()
            .map(|p| self.resolve(p))
            .ok_or_else(|| CliError::config(format!("config has no datasets.{which} path")))?;
        let dataset = load_existing(&path)?;
        Ok((path, dataset))
    }

    fn backend_config(&self) -> BackendConfig {
        self.config.backend.clone().unwrap_or_else(BackendConfig::mock)
    }

    fn prompt(&self) -> Result<PromptConfig, CliError> {
        Ok(self.config.prompt.resolve(&self.base_dir)?)
    }

    fn seed(&self) -> u64 {
        self.config.seed.unwrap_or(self.config.prompt.seed)
    }
}

fn load_existing(path: &Path) -> Result<Dataset, CliError> {
    require_exists(path)?;
    Ok(load_dataset(path, DatasetFormat::from_path(path))?)
}

fn require_exists(path: &Path) -> CliResult {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::config(format!("input not found: {}", path.display())))
    }
}

/// Exclusive advisory lock on the run directory, held until dropped.
struct RunLock(#[allow(dead_code)] File);

fn lock_run_dir(run_dir: &Path) -> Result<RunLock, CliError> {
    fs::create_dir_all(run_dir)
        .map_err(|e| CliError::config(format!("cannot create run directory {}: {e}", run_dir.display())))?;
    let path = run_dir.join(LOCK_FILE);
    let file = File::create(&path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    match file.try_lock() {
        Ok(()) => Ok(RunLock(file)),
        Err(TryLockError::WouldBlock) => {
            Err(CliError::config(format!("run directory {} is in use by another process", run_dir.display())))
        }
        Err(TryLockError::Error(e)) => Err(CliError::config(format!("{}: {e}", path.display()))),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    crate::io::write_json_pretty(path, value).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> CliResult {
    crate::io::write_jsonl(path, rows).map(drop).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

fn labeler_for<'a>(backend: &'a dyn backend::ChatBackend, ctx: &Context) -> Labeler<'a> {
    Labeler::new(backend)
        .with_cache(ResponseCache::on_disk(ctx.run_dir.join("cache")))
        .with_concurrency(ctx.config.label.concurrency)
}

fn cmd_label(ctx: &Context, args: &LabelArgs) -> CliResult {
    let (_, dataset) = ctx.dataset("train", &ctx.config.datasets.train)?;
    let prompt = if args.use_best {
        let path = ctx.run_dir.join(BEST_PROMPT_FILE);
        require_exists(&path)?;
        let bytes = fs::read(&path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        serde_json::from_slice(&bytes).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?
    } else {
        ctx.prompt()?
    };
    let backend_config = ctx.backend_config();
    let backend = backend::from_config(&backend_config)?;
    let _lock = lock_run_dir(&ctx.run_dir)?;
    let labeler = labeler_for(backend.as_ref(), ctx);
    let opts = LabelOptions {
        resume: args.resume,
        failure_threshold: ctx.config.label.failure_threshold,
        max_items: args.max_items,
        backend_config: Some(backend_config),
    };
    tracing::info!(items = dataset.len(), run_dir = %ctx.run_dir.display(), "labeling");
    let result = generate_weak_labels(&dataset, &prompt, &labeler, &ctx.run_dir, &opts);
    eprintln!("backend calls: {}", labeler.backend_calls());
    let run = result?;
    let c = run.manifest.counts;
    println!("labeled {} / {} ({} failed, {} new this run)", c.labeled, c.total, c.failed, run.processed);
    Ok(())
}

fn read_candidates(path: &Path) -> Result<Vec<String>, CliError> {
    require_exists(path)?;
    let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
    } else {
        Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_owned).collect())
    }
}

fn cmd_optimize(ctx: &Context, args: &OptimizeArgs) -> CliResult {
    let (_, valset) = ctx.dataset("val", &ctx.config.datasets.val)?;
    let section = &ctx.config.optimize;
    let mut candidates = section.candidates.clone();
    let candidates_path = args.candidates.clone().or_else(|| section.candidates_path.as_ref().map(|p| ctx.resolve(p)));
    if let Some(path) = candidates_path {
        candidates.extend(read_candidates(&path)?);
    }
    if section.stages.is_empty() && candidates.is_empty() {
        return Err(WeakLabelError::NoCandidates.into());
    }
    let stages =
        section.stages.iter().map(|s| s.resolve(&ctx.config.prompt, &ctx.base_dir)).collect::<Result<Vec<_>, _>>()?;

    let backend = backend::from_config(&ctx.backend_config())?;
    let _lock = lock_run_dir(&ctx.run_dir)?;
    let labeler = labeler_for(backend.as_ref(), ctx);
    let eval_dir = ctx.run_dir.join("eval");
    fs::create_dir_all(&eval_dir).map_err(|e| CliError::config(format!("{}: {e}", eval_dir.display())))?;

    let result = (|| -> Result<StageLedger, CliError> {
        let mut ledger = if stages.is_empty() {
            StageLedger::default()
        } else {
            run_stages(&valset, &labeler, &stages, Some(&eval_dir))?
        };
        if !candidates.is_empty() {
            // instructions are searched on top of the best stage so far
            let base = match ledger.best() {
                Some(row) => row.prompt_config.clone(),
                None => ctx.prompt()?,
            };
            let (_, search) = optimize_instruction(&candidates, &base, &valset, &labeler, Some(&eval_dir))?;
            ledger.stages.extend(search.stages);
        }
        Ok(ledger)
    })();
    eprintln!("backend calls: {}", labeler.backend_calls());
    let ledger = result?;

    write_json(&ctx.run_dir.join(LEDGER_FILE), &ledger)?;
    let best = ledger.best().ok_or(WeakLabelError::NoCandidates)?;
    write_json(&ctx.run_dir.join(BEST_PROMPT_FILE), &best.prompt_config)?;
    print!("{}", ledger.render_table());
    println!("best: {} ({:.1}%)", best.stage_name, best.validation_accuracy * 100.0);
    Ok(())
}

fn cmd_reconstruct(ctx: &Context, args: &ReconstructArgs) -> CliResult {
    let (_, dataset) = ctx.dataset("train", &ctx.config.datasets.train)?;
    let labels_path = ctx.run_dir.join(LABELS_FILE);
    require_exists(&labels_path)?;
    let output = args
        .output
        .clone()
        .or_else(|| ctx.config.reconstruct.output.as_ref().map(|p| ctx.resolve(p)))
        .unwrap_or_else(|| ctx.run_dir.join("train_chat.jsonl"));
    let _lock = lock_run_dir(&ctx.run_dir)?;

    let mut failed = 0usize;
    let mut labeled = Vec::new();
    for entry in read_label_entries(&labels_path)? {
        match entry {
            LabelEntry::Labeled(p) => {
                let dp = dataset.get(p.id).ok_or_else(|| {
                    CliError::config(format!("{}: id {} is not in the training set", labels_path.display(), p.id))
                })?;
                labeled.push((dp.clone(), p.predicted));
            }
            LabelEntry::Failed(_) => failed += 1,
        }
    }
    let rebuilt = reconstruct::to_chat_records(&labeled);
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::config(format!("{}: {e}", parent.display())))?;
    }
    reconstruct::write_training_jsonl(&rebuilt.records, &output)?;
    let (manifest_path, _) =
        reconstruct::emit_manifest(&output, ctx.seed(), &ctx.config.reconstruct.manifest_overrides)?;
    println!(
        "wrote {} records to {} ({} skipped, {} unlabeled); manifest {}",
        rebuilt.records.len(),
        output.display(),
        rebuilt.skipped.len(),
        failed,
        manifest_path.display()
    );
    Ok(())
}

fn load_sets(paths: &[PathBuf]) -> Result<Vec<PredictionSet>, CliError> {
    paths
        .iter()
        .map(|p| {
            require_exists(p)?;
            PredictionSet::load(p).map_err(|e| CliError::config(format!("{}: {e}", p.display())))
        })
        .collect()
}

/// Names the offending file in alignment errors.
fn with_paths(e: EnsembleError, paths: &[PathBuf]) -> CliError {
    match &e {
        EnsembleError::MisalignedIds { set_index, .. } => match paths.get(*set_index) {
            Some(p) => CliError::config(format!("{}: {e}", p.display())),
            None => e.into(),
        },
        _ => e.into(),
    }
}

fn cmd_vote(ctx: &Context, args: &VoteArgs) -> CliResult {
    let paths: Vec<PathBuf> = if args.paths.is_empty() {
        ctx.config.ensemble.predictions.iter().map(|p| ctx.resolve(p)).collect()
    } else {
        args.paths.clone()
    };
    if paths.is_empty() {
        return Err(EnsembleError::NoSets.into());
    }
    let sets = load_sets(&paths)?;
    let gold = match (&args.gold, &ctx.config.datasets.test) {
        (Some(p), _) => Some(load_existing(p)?),
        (None, Some(p)) => Some(load_existing(&ctx.resolve(p))?),
        (None, None) => None,
    };
    let policy = args.tie_policy.unwrap_or(ctx.config.ensemble.tie_policy);
    let output = args
        .output
        .clone()
        .or_else(|| ctx.config.ensemble.output.as_ref().map(|p| ctx.resolve(p)))
        .unwrap_or_else(|| ctx.run_dir.join("ensemble.jsonl"));
    let _lock = lock_run_dir(&ctx.run_dir)?;

    let votes = ensemble::majority_vote(&sets, policy).map_err(|e| with_paths(e, &paths))?;
    let predictions = votes.to_predictions("ensemble");
    write_jsonl(&output, &predictions)?;
    write_jsonl(&ctx.run_dir.join("votes.jsonl"), &votes.items)?;
    let ties = votes.items.iter().filter(|v| v.tiebreak_used).count();
    tracing::info!(models = votes.n_models, items = votes.items.len(), ties, "voted");

    match gold {
        Some(gold) => {
            let mut report = ensemble::score(&predictions, &gold)?;
            report.member_accuracies =
                Some(ensemble::member_accuracies(&sets, &gold).map_err(|e| with_paths(e, &paths))?);
            write_json(&ctx.run_dir.join("vote_report.json"), &report)?;
            print!("{}", ensemble::render_report_table(&report));
        }
        None => println!("wrote {} ensemble predictions to {}", predictions.len(), output.display()),
    }
    Ok(())
}

fn cmd_score(ctx: &Context, args: &ScoreArgs) -> CliResult {
    require_exists(&args.predictions)?;
    let gold = load_existing(&args.gold)?;
    let set = PredictionSet::load(&args.predictions)
        .map_err(|e| CliError::config(format!("{}: {e}", args.predictions.display())))?;
    let report = ensemble::score(set.records(), &gold)
        .map_err(|e| CliError::config(format!("{}: {e}", args.predictions.display())))?;
    let output = args.output.clone().unwrap_or_else(|| ctx.run_dir.join("score.json"));
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::config(format!("{}: {e}", parent.display())))?;
    }
    write_json(&output, &report)?;
    print!("{}", ensemble::render_report_table(&report));
    for (task, s) in &report.per_task {
        println!("  {task}: {:.3} (n={})", s.accuracy, s.n);
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct RunReport {
    labels: Option<Value>,
    ledger: Option<StageLedger>,
    ensemble: Option<EvalReport>,
    score: Option<EvalReport>,
}

fn read_optional<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Option<T>, CliError> {
    if !path.exists() {
        return Ok(None);
    }
    let bytes = fs::read(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map(Some).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

fn cmd_report(ctx: &Context) -> CliResult {
    require_exists(&ctx.run_dir)?;
    let manifest: Option<Value> = read_optional(&ctx.run_dir.join(MANIFEST_FILE))?;
    let report = RunReport {
        labels: manifest.and_then(|m| m.get("counts").cloned()),
        ledger: read_optional(&ctx.run_dir.join(LEDGER_FILE))?,
        ensemble: read_optional(&ctx.run_dir.join("vote_report.json"))?,
        score: read_optional(&ctx.run_dir.join("score.json"))?,
    };
    if let Some(counts) = &report.labels {
        println!("weak labels: {counts}");
    }
    if let Some(ledger) = &report.ledger {
        print!("{}", ledger.render_table());
    }
    if let Some(r) = &report.ensemble {
        print!("{}", ensemble::render_report_table(r));
    }
    if let Some(r) = &report.score {
        println!("score: {:.3} (n={})", r.accuracy, r.n);
    }
    write_json(&ctx.run_dir.join("report.json"), &report)
}

pub fn execute(cli: &Cli) -> CliResult {
    let ctx = Context::load(cli)?;
    match &cli.command {
        Command::Label(a) => cmd_label(&ctx, a),
        Command::Optimize(a) => cmd_optimize(&ctx, a),
        Command::Reconstruct(a) => cmd_reconstruct(&ctx, a),
        Command::Vote(a) => cmd_vote(&ctx, a),
        Command::Score(a) => cmd_score(&ctx, a),
        Command::Report => cmd_report(&ctx),
    }
}

/// Parses `args` (program name first) and runs the command; returns the
/// exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
        }
    };
    let _ = tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_ansi(std::io::IsTerminal::is_terminal(&std::io::stderr()))
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_env("HALLU_LOG").unwrap_or_else(|_| "info".into()))
        .try_init();
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

pub fn main() -> i32 {
    run(std::env::args_os())
}
