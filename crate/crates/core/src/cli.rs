//! Config-driven commands behind the `ced` binary.
//!
//! One TOML file describes a run; command-line flags override single fields.
//! Exit codes: 0 ok, 1 usage/config, 2 data, 3 backend, 4 strict-check failure.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    prompt_hash, Backend, BackendError, BackendTokenCounter, HttpBackend, HttpConfig,
    ParametricMock, ScriptedMock, DEFAULT_MAX_NEW_TOKENS, DEFAULT_TEMPERATURE, DEFAULT_TOP_P,
};
use crate::corpus::{
    check_leakage, load_dataset, split_stats, Dataset, Format, LabelDistribution, LabelScheme,
    LeakReport, Pair, Split,
};
use crate::decide::{
    estimate_bias, CalibrationModel, DecideError, Decision, DecodeConfig, Mode,
    DEFAULT_MAX_ATTEMPTS, DEFAULT_VOTES,
};
use crate::metrics::{align, error_type_breakdown, evaluate, MetricsReport, DEFAULT_RESAMPLES};
use crate::pipeline::{Pipeline, PipelineError};
use crate::profile::{
    profile, ProfileConfig, ProfileError, ProfileReport, DEFAULT_BATCH, DEFAULT_REPEATS,
    DEFAULT_WARMUP,
};
use crate::prompting::{
    export_sft, ExemplarPool, FewShotPolicy, PromptBuilder, PromptError, TrainingManifest,
    DEFAULT_K, DEFAULT_TOKEN_LIMIT,
};
use crate::report::{
    artifact_name, emit_manifest, frontier_csv, frontier_points, pareto_frontier, read_json,
    render_profile_table, render_results_table, sha256_file, ReportError, RunContext, RunManifest,
    Seeds,
};

pub const LOCK_FILE: &str = ".ced-run.lock";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("backend: {0}")]
    Backend(String),
    #[error("strict check failed: {0}")]
    Strict(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Backend(_) => 3,
            CliError::Strict(_) => 4,
        }
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        match e {
            BackendError::Capability(_) | BackendError::InvalidPolicy(_) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Backend(e.to_string()),
        }
    }
}

impl From<PromptError> for CliError {
    fn from(e: PromptError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Backend(b) => b.into(),
            PipelineError::Prompt(p) => p.into(),
            PipelineError::MissingPool => CliError::Config(e.to_string()),
        }
    }
}

impl From<DecideError> for CliError {
    fn from(e: DecideError) -> Self {
        match e {
            DecideError::Backend(b) => b.into(),
            DecideError::Prompt(p) => p.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<ProfileError> for CliError {
    fn from(e: ProfileError) -> Self {
        match e {
            ProfileError::Aborted(p) => p.into(),
            ProfileError::TooFewPairs { .. } => CliError::Data(e.to_string()),
            ProfileError::NoRepeats => CliError::Config(e.to_string()),
        }
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        match e {
            ReportError::MissingDatasetHash(_) | ReportError::Empty | ReportError::Parse { .. } => {
                CliError::Data(e.to_string())
            }
            _ => CliError::Config(e.to_string()),
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

// ---- config ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub path: PathBuf,
    /// Inferred from the extension (`.jsonl` → jsonl, otherwise tsv) when absent.
    #[serde(default)]
    pub format: Option<Format>,
    #[serde(default = "native")]
    pub scheme: LabelScheme,
}

fn native() -> LabelScheme {
    LabelScheme::Native
}

impl DatasetConfig {
    pub fn new(path: impl Into<PathBuf>) -> DatasetConfig {
        DatasetConfig {
            path: path.into(),
            format: None,
            scheme: LabelScheme::Native,
        }
    }

    pub fn format(&self) -> Format {
        self.format
            .unwrap_or_else(|| match self.path.extension().and_then(|e| e.to_str()) {
                Some("jsonl") | Some("json") => Format::Jsonl,
                _ => Format::Tsv,
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FewShotConfig {
    pub k: usize,
    pub overlap_threshold: f64,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        FewShotConfig {
            k: DEFAULT_K,
            overlap_threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VoteConfig {
    pub m: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub max_attempts: u32,
    pub max_new_tokens: u32,
}

impl Default for VoteConfig {
    fn default() -> Self {
        VoteConfig {
            m: DEFAULT_VOTES,
            temperature: DEFAULT_TEMPERATURE,
            top_p: DEFAULT_TOP_P,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub enabled: bool,
    /// Fraction of train carved off as the held-out set.
    pub heldout_fraction: f64,
    /// Reuse a model written by `calibrate` instead of fitting during eval.
    pub model_path: Option<PathBuf>,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            enabled: false,
            heldout_fraction: 0.1,
            model_path: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    pub resamples: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            resamples: DEFAULT_RESAMPLES,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileSettings {
    pub repeats: usize,
    pub warmup: usize,
    pub batch: usize,
}

impl Default for ProfileSettings {
    fn default() -> Self {
        ProfileSettings {
            repeats: DEFAULT_REPEATS,
            warmup: DEFAULT_WARMUP,
            batch: DEFAULT_BATCH,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScriptedConfig {
    pub model_id: String,
    /// Responses for pairs without a script, consumed in order and wrapped.
    pub responses: Vec<String>,
    /// Answer every pair with its gold label.
    pub echo_gold: bool,
    /// JSONL of `{"id": ..., "responses": [...]}` keyed by pair id.
    pub script_file: Option<PathBuf>,
    pub delay_ms: u64,
    pub serialized: bool,
    pub logprobs: bool,
}

impl Default for ScriptedConfig {
    fn default() -> Self {
        ScriptedConfig {
            model_id: "scripted-mock".into(),
            responses: vec!["NOT".into()],
            echo_gold: false,
            script_file: None,
            delay_ms: 0,
            serialized: false,
            logprobs: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParametricConfig {
    pub model_id: String,
    pub slope: f64,
    pub intercept: f64,
    pub label_mass: f64,
    pub delay_ms: u64,
}

impl Default for ParametricConfig {
    fn default() -> Self {
        ParametricConfig {
            model_id: "parametric-mock".into(),
            slope: 1.0,
            intercept: 0.0,
            label_mass: 1.0,
            delay_ms: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackendConfig {
    Http(HttpConfig),
    ScriptedMock(ScriptedConfig),
    ParametricMock(ParametricConfig),
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Http(HttpConfig::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Label used in file names and tables; defaults to the backend's model id.
    pub model: Option<String>,
    pub mode: Mode,
    pub output_dir: PathBuf,
    pub concurrency: usize,
    pub strict: bool,
    pub hardware: String,
    pub token_limit: usize,
    pub train: Option<DatasetConfig>,
    pub dev: Option<DatasetConfig>,
    pub few_shot: FewShotConfig,
    pub vote: VoteConfig,
    pub calibration: CalibrationConfig,
    pub seeds: Seeds,
    pub bootstrap: BootstrapConfig,
    pub backend: BackendConfig,
    pub profile: ProfileSettings,
    pub sft: TrainingManifest,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: None,
            mode: Mode::ZeroShot,
            output_dir: PathBuf::from("runs"),
            concurrency: 8,
            strict: false,
            hardware: String::new(),
            token_limit: DEFAULT_TOKEN_LIMIT,
            train: None,
            dev: None,
            few_shot: FewShotConfig::default(),
            vote: VoteConfig::default(),
            calibration: CalibrationConfig::default(),
            seeds: Seeds::default(),
            bootstrap: BootstrapConfig::default(),
            backend: BackendConfig::default(),
            profile: ProfileSettings::default(),
            sft: TrainingManifest::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        RunConfig::from_toml(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Everything that can change results. Paths are left out; datasets are
    /// identified by content hash in the manifest.
    fn snapshot(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object_mut().expect("config is an object");
        obj.remove("output_dir");
        for split in ["train", "dev"] {
            if let Some(d) = obj.get_mut(split).and_then(|d| d.as_object_mut()) {
                d.remove("path");
            }
        }
        v
    }
}

// ---- command line ----

#[derive(Parser, Debug)]
#[command(
    name = "ced",
    version,
    about = "Critical error detection harness for EN-DE translation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Overrides,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Load datasets, print label counts and check train/dev leakage.
    Ingest,
    /// Fit the ERR log-odds offset on a held-out slice of train.
    Calibrate,
    /// Decide every dev pair and write decisions plus metrics.
    Eval,
    /// Measure latency, throughput and peak memory.
    Profile,
    /// Render tables and the latency/MCC frontier from finished runs.
    Report,
    /// Export supervised fine-tuning records and the training manifest.
    SftExport,
}

#[derive(Args, Debug, Default, Clone)]
pub struct Overrides {
    /// Run config (TOML).
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Use the HTTP completion backend at this base URL.
    #[arg(long, global = true)]
    pub backend_url: Option<String>,
    /// Fail on leakage, stale manifests and partial backend failure.
    #[arg(long, global = true)]
    pub strict: bool,
    /// Seed for the held-out carve.
    #[arg(long, global = true)]
    pub seed_data: Option<u64>,
    /// Seed for the few-shot exemplar pool.
    #[arg(long, global = true)]
    pub seed_exemplar: Option<u64>,
    /// Base seed for sampled votes.
    #[arg(long, global = true)]
    pub seed_vote: Option<u64>,
    /// Seed for bootstrap resampling.
    #[arg(long, global = true)]
    pub seed_bootstrap: Option<u64>,
    /// Where runs, manifests and reports go.
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// Requests in flight during eval.
    #[arg(long, global = true)]
    pub concurrency: Option<usize>,
    /// zero-shot, few-shot, vote or finetuned-eval.
    #[arg(long, global = true, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    /// Model label used in file names and tables.
    #[arg(long, global = true)]
    pub model: Option<String>,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| {
        format!("unknown mode {s:?}; expected zero-shot, few-shot, vote or finetuned-eval")
    })
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(url) = &self.backend_url {
            match &mut cfg.backend {
                BackendConfig::Http(h) => h.base_url = url.clone(),
                other => {
                    *other = BackendConfig::Http(HttpConfig {
                        base_url: url.clone(),
                        ..Default::default()
                    })
                }
            }
        }
        cfg.strict |= self.strict;
        let seeds = &mut cfg.seeds;
        for (flag, slot) in [
            (self.seed_data, &mut seeds.data),
            (self.seed_exemplar, &mut seeds.exemplar),
            (self.seed_vote, &mut seeds.vote),
            (self.seed_bootstrap, &mut seeds.bootstrap),
        ] {
            if let Some(v) = flag {
                *slot = v;
            }
        }
        if let Some(d) = &self.output_dir {
            cfg.output_dir = d.clone();
        }
        if let Some(c) = self.concurrency {
            cfg.concurrency = c;
        }
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(m) = &self.model {
            cfg.model = Some(m.clone());
        }
    }
}

/// Parse arguments, run the command, print a summary; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(summary) => {
            print!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Resolve the config and run one command, returning printable output.
pub fn execute(cli: &Cli) -> Result<String, CliError> {
    let mut cfg = match &cli.flags.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cli.flags.apply(&mut cfg);
    Ok(match cli.command {
        Command::Ingest => cmd_ingest(&cfg)?.render(),
        Command::Calibrate => {
            let c = cmd_calibrate(&cfg)?;
            format!(
                "beta {:.4} (prior {:.4}, held-out {}, err rate {:.4} -> {:.4}, converged {})\n{}\n",
                c.model.beta,
                c.model.fitted_prior,
                c.model.heldout_size,
                c.model.uncalibrated_err_rate,
                c.model.calibrated_err_rate,
                c.model.converged,
                c.path.display()
            )
        }
        Command::Eval => {
            let o = cmd_eval(&cfg)?;
            let r = &o.report;
            format!(
                "{} {} {}: acc {:.4} mcc {:.4} [{:.4}, {:.4}] f1-err {:.4} f1-not {:.4} invalid {} failures {}\n{}\n{}\n",
                r.dataset,
                r.model,
                r.mode,
                r.accuracy,
                r.mcc,
                r.ci_mcc.0,
                r.ci_mcc.1,
                r.f1_err,
                r.f1_not,
                r.invalid,
                r.backend_failures,
                o.decisions_path.display(),
                o.metrics_path.display()
            )
        }
        Command::Profile => {
            let p = cmd_profile(&cfg)?;
            format!(
                "{} {}: latency {:.1} ms (first attempt {:.1}), throughput {:.1} pairs/s{}, peak memory {} ({:?})\n",
                p.model,
                p.mode,
                p.latency_ms,
                p.first_attempt_ms,
                p.throughput_sps,
                if p.serialized_backend { " [serialized backend]" } else { "" },
                p.peak_memory_bytes.map(|b| b.to_string()).unwrap_or_else(|| "n/a".into()),
                p.memory_source
            )
        }
        Command::Report => {
            let r = cmd_report(&cfg)?;
            let mut s = r.results.markdown.clone();
            for f in &r.files {
                writeln!(s, "{}", f.display()).unwrap();
            }
            s
        }
        Command::SftExport => {
            let (records, manifest) = cmd_sft_export(&cfg)?;
            format!("{}\n{}\n", records.display(), manifest.display())
        }
    })
}

// ---- shared plumbing ----

/// Exclusive marker for commands that drive backend traffic.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<RunLock, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(CliError::Config(format!(
                    "another eval/profile run holds {}; remove it if that run is dead",
                    path.display()
                )))
            }
            Err(e) => Err(CliError::Config(format!("{}: {e}", path.display()))),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

struct Loaded {
    dataset: Dataset,
    path: PathBuf,
    sha256: String,
}

fn load(cfg: &DatasetConfig, split: Split) -> Result<Loaded, CliError> {
    let dataset = load_dataset(&cfg.path, cfg.format(), cfg.scheme, split)
        .map_err(|e| CliError::Data(format!("{}: {e}", cfg.path.display())))?;
    let sha256 = sha256_file(&cfg.path).map_err(|e| CliError::Data(e.to_string()))?;
    Ok(Loaded {
        dataset,
        path: cfg.path.clone(),
        sha256,
    })
}

fn require<'a>(d: &'a Option<DatasetConfig>, what: &str) -> Result<&'a DatasetConfig, CliError> {
    d.as_ref()
        .ok_or_else(|| CliError::Config(format!("no {what} dataset configured")))
}

/// Leakage report; a nonempty report under strict mode is an error.
fn leak_gate(cfg: &RunConfig, train: &Dataset, dev: &Dataset) -> Result<LeakReport, CliError> {
    let report = check_leakage(train, dev);
    if !report.leaks.is_empty() {
        let first = &report.leaks[0];
        let msg = format!(
            "{} pair(s) shared by {} and {} (first: train {} / dev {})",
            report.leaks.len(),
            train.name,
            dev.name,
            first.train_id,
            first.dev_id
        );
        if cfg.strict {
            return Err(CliError::Strict(msg));
        }
        eprintln!("warning: {msg}");
    }
    Ok(report)
}

/// Seeded split of train into (held-out, remainder).
pub fn carve_heldout(
    train: &Dataset,
    fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), CliError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(CliError::Config(format!(
            "heldout_fraction must be in (0, 1), got {fraction}"
        )));
    }
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = ((train.len() as f64) * fraction).round() as usize;
    let mut held: Vec<usize> = idx[..n].to_vec();
    let mut rest: Vec<usize> = idx[n..].to_vec();
    held.sort_unstable();
    rest.sort_unstable();
    let pick = |ids: &[usize], suffix: &str| Dataset {
        name: format!("{}{suffix}", train.name),
        split: train.split,
        pairs: ids.iter().map(|&i| train.pairs[i].clone()).collect(),
        label_scheme: train.label_scheme,
    };
    Ok((pick(&held, "-heldout"), pick(&rest, "")))
}

fn script_entries(path: &Path) -> Result<HashMap<String, Vec<String>>, CliError> {
    #[derive(Deserialize)]
    struct Entry {
        id: String,
        responses: Vec<String>,
    }
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut out = HashMap::new();
    for (i, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let e: Entry = serde_json::from_str(line)
            .map_err(|err| CliError::Config(format!("{} line {}: {err}", path.display(), i + 1)))?;
        out.insert(e.id, e.responses);
    }
    Ok(out)
}

/// Backend plus the prompt builder that counts tokens with it.
struct Wiring {
    backend: Arc<dyn Backend>,
    builder: PromptBuilder,
}

/// Builds the backend. Scripted mocks with per-pair scripts need the rendered
/// prompt of every pair they will see, which `prompt_of` supplies.
fn wire(
    cfg: &RunConfig,
    scripted_pairs: &[&Pair],
    prompt_of: &dyn Fn(&PromptBuilder, &Pair) -> Result<String, CliError>,
) -> Result<Wiring, CliError> {
    let mut builder = PromptBuilder {
        limit: cfg.token_limit,
        ..Default::default()
    };
    let backend: Arc<dyn Backend> = match &cfg.backend {
        BackendConfig::Http(h) => {
            let b: Arc<dyn Backend> = Arc::new(HttpBackend::new(h.clone()));
            if h.tokenize {
                builder.counter = Arc::new(BackendTokenCounter::new(b.clone()));
            }
            b
        }
        BackendConfig::ScriptedMock(s) => {
            let mut mock = ScriptedMock::new(s.responses.clone())
                .with_model_id(&s.model_id)
                .with_delay(Duration::from_millis(s.delay_ms));
            if s.serialized {
                mock = mock.serialized();
            }
            if !s.logprobs {
                mock = mock.without_logprobs();
            }
            let by_id = match &s.script_file {
                Some(p) => script_entries(p)?,
                None => HashMap::new(),
            };
            if s.echo_gold || !by_id.is_empty() {
                for pair in scripted_pairs {
                    let seq = match (by_id.get(&pair.id), pair.gold) {
                        (Some(seq), _) => seq.clone(),
                        (None, Some(g)) if s.echo_gold => vec![g.as_str().to_string()],
                        _ => continue,
                    };
                    mock = mock.script_hash(&prompt_hash(&prompt_of(&builder, pair)?), seq);
                }
            }
            Arc::new(mock)
        }
        BackendConfig::ParametricMock(p) if !(p.label_mass > 0.0 && p.label_mass <= 1.0) => {
            return Err(CliError::Config(format!(
                "label_mass must be in (0, 1], got {}",
                p.label_mass
            )))
        }
        BackendConfig::ParametricMock(p) => Arc::new(
            ParametricMock::new(p.slope, p.intercept)
                .with_label_mass(p.label_mass)
                .with_delay(Duration::from_millis(p.delay_ms))
                .with_model_id(&p.model_id),
        ),
    };
    Ok(Wiring { backend, builder })
}

fn few_shot_policy(cfg: &RunConfig) -> FewShotPolicy {
    FewShotPolicy {
        k: cfg.few_shot.k,
        seed: cfg.seeds.exemplar,
        overlap_threshold: cfg.few_shot.overlap_threshold,
        ..Default::default()
    }
}

fn decode_config(cfg: &RunConfig) -> DecodeConfig {
    DecodeConfig {
        max_attempts: cfg.vote.max_attempts,
        temperature: cfg.vote.temperature,
        top_p: cfg.vote.top_p,
        max_new_tokens: cfg.vote.max_new_tokens,
        seed: cfg.seeds.vote,
    }
}

fn needs_pool(mode: Mode) -> bool {
    matches!(mode, Mode::FewShot | Mode::Vote)
}

/// Everything eval and profile share.
struct Session {
    dev: Loaded,
    train: Option<Loaded>,
    heldout: Option<Dataset>,
    pool: Option<ExemplarPool>,
    wiring: Wiring,
    model: String,
}

impl Session {
    fn open(cfg: &RunConfig, fit_inline: bool) -> Result<Session, CliError> {
        let dev = load(require(&cfg.dev, "dev")?, Split::Dev)?;
        let train = match &cfg.train {
            Some(t) => Some(load(t, Split::Train)?),
            None => None,
        };
        if let Some(t) = &train {
            leak_gate(cfg, &t.dataset, &dev.dataset)?;
        }
        let (heldout, rest) = match (&train, fit_inline) {
            (Some(t), true) => {
                let (h, r) =
                    carve_heldout(&t.dataset, cfg.calibration.heldout_fraction, cfg.seeds.data)?;
                (Some(h), Some(r))
            }
            (None, true) => {
                return Err(CliError::Config(
                    "calibration needs a train dataset to carve held-out pairs from".into(),
                ))
            }
            (t, false) => (None, t.as_ref().map(|t| t.dataset.clone())),
        };
        let pool = match (needs_pool(cfg.mode), &rest) {
            (true, Some(r)) => Some(ExemplarPool::draw(r, cfg.seeds.exemplar)),
            (true, None) if cfg.mode == Mode::FewShot => {
                return Err(CliError::Config(
                    "few-shot mode needs a train dataset".into(),
                ))
            }
            _ => None,
        };

        let policy = few_shot_policy(cfg);
        let mode = cfg.mode;
        let pool_ref = pool.clone();
        let prompt_of = move |builder: &PromptBuilder, pair: &Pair| -> Result<String, CliError> {
            let placeholder = ScriptedMock::constant("NOT");
            let p = Pipeline {
                builder: builder.clone(),
                pool: pool_ref.clone(),
                few_shot: policy.clone(),
                ..Pipeline::new(&placeholder, mode)
            };
            Ok(p.prompt(pair)?.text().to_string())
        };
        let zero_shot = |builder: &PromptBuilder, pair: &Pair| -> Result<String, CliError> {
            Ok(builder.build_zero_shot(pair)?.text().to_string())
        };
        // held-out prompts are zero-shot
        let wiring = {
            let held_pairs: Vec<&Pair> = heldout.iter().flat_map(|h| h.pairs.iter()).collect();
            let combined = |b: &PromptBuilder, p: &Pair| -> Result<String, CliError> {
                if held_pairs.iter().any(|h| std::ptr::eq(*h, p)) {
                    zero_shot(b, p)
                } else {
                    prompt_of(b, p)
                }
            };
            let scripted: Vec<&Pair> = dev
                .dataset
                .pairs
                .iter()
                .chain(held_pairs.iter().copied())
                .collect();
            wire(cfg, &scripted, &combined)?
        };
        let model = cfg
            .model
            .clone()
            .unwrap_or_else(|| wiring.backend.descriptor().model_id.clone());
        Ok(Session {
            dev,
            train,
            heldout,
            pool,
            wiring,
            model,
        })
    }

    fn pipeline(&self, cfg: &RunConfig, calibration: Option<CalibrationModel>) -> Pipeline<'_> {
        Pipeline {
            builder: self.wiring.builder.clone(),
            backend: self.wiring.backend.as_ref(),
            mode: cfg.mode,
            pool: self.pool.clone(),
            few_shot: few_shot_policy(cfg),
            votes: cfg.vote.m,
            decode: decode_config(cfg),
            calibration,
        }
    }

    fn stem(&self, cfg: &RunConfig, ext: &str) -> PathBuf {
        cfg.output_dir.join(artifact_name(
            &self.dev.dataset.name,
            &self.model,
            cfg.mode.as_str(),
            ext,
        ))
    }

    fn manifest(&self, cfg: &RunConfig, path: &Path) -> Result<RunManifest, CliError> {
        let mut datasets = vec![(
            self.dev.dataset.name.clone(),
            self.dev.path.display().to_string(),
            Some(self.dev.sha256.clone()),
        )];
        if let Some(t) = &self.train {
            datasets.push((
                t.dataset.name.clone(),
                t.path.display().to_string(),
                Some(t.sha256.clone()),
            ));
        }
        let ctx = RunContext {
            config: cfg.snapshot(),
            seeds: cfg.seeds.clone(),
            datasets,
            backend: self.wiring.backend.descriptor().clone(),
        };
        Ok(emit_manifest(&ctx, path)?)
    }
}

#[derive(Serialize)]
struct WithHash<'a, T: Serialize> {
    manifest_hash: &'a str,
    #[serde(flatten)]
    inner: &'a T,
}

fn json_with_hash<T: Serialize>(hash: &str, value: &T) -> String {
    let mut s = serde_json::to_string_pretty(&WithHash {
        manifest_hash: hash,
        inner: value,
    })
    .expect("serializes");
    s.push('\n');
    s
}

// ---- commands ----

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetSummary {
    pub name: String,
    pub split: Split,
    pub counts: LabelDistribution,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IngestSummary {
    pub datasets: Vec<DatasetSummary>,
    pub leaks: LeakReport,
}

impl IngestSummary {
    pub fn render(&self) -> String {
        let mut s =
            String::from("| Dataset | Split | NOT | ERR | Total |\n|---|---|---:|---:|---:|\n");
        for d in &self.datasets {
            let split = if d.split == Split::Train {
                "train"
            } else {
                "dev"
            };
            writeln!(
                s,
                "| {} | {} | {} | {} | {} |",
                d.name,
                split,
                d.counts.n_not,
                d.counts.n_err,
                d.counts.total()
            )
            .unwrap();
        }
        writeln!(s, "leaks: {}", self.leaks.leaks.len()).unwrap();
        for l in &self.leaks.leaks {
            writeln!(s, "  train {} = dev {}", l.train_id, l.dev_id).unwrap();
        }
        s
    }
}

pub fn cmd_ingest(cfg: &RunConfig) -> Result<IngestSummary, CliError> {
    if cfg.train.is_none() && cfg.dev.is_none() {
        return Err(CliError::Config("no datasets configured".into()));
    }
    let train = cfg
        .train
        .as_ref()
        .map(|d| load(d, Split::Train))
        .transpose()?;
    let dev = cfg.dev.as_ref().map(|d| load(d, Split::Dev)).transpose()?;
    let datasets = [&train, &dev]
        .into_iter()
        .flatten()
        .map(|l| DatasetSummary {
            name: l.dataset.name.clone(),
            split: l.dataset.split,
            counts: split_stats(&l.dataset),
        })
        .collect();
    let leaks = match (&train, &dev) {
        (Some(t), Some(d)) => leak_gate(cfg, &t.dataset, &d.dataset)?,
        _ => LeakReport::default(),
    };
    Ok(IngestSummary { datasets, leaks })
}

pub struct CalibrateOutcome {
    pub model: CalibrationModel,
    pub path: PathBuf,
    pub manifest: RunManifest,
}

fn calibration_path(cfg: &RunConfig, s: &Session) -> PathBuf {
    let train = s
        .train
        .as_ref()
        .map(|t| t.dataset.name.as_str())
        .unwrap_or("train");
    cfg.output_dir
        .join(artifact_name(train, &s.model, "calibration", "json"))
}

pub fn cmd_calibrate(cfg: &RunConfig) -> Result<CalibrateOutcome, CliError> {
    let _lock = RunLock::acquire(&cfg.output_dir)?;
    let s = Session::open(cfg, true)?;
    let manifest = s.manifest(cfg, &s.stem(cfg, "calibrate.manifest.json"))?;
    let heldout = s.heldout.as_ref().expect("carved");
    let model = estimate_bias(heldout, &s.wiring.builder, s.wiring.backend.as_ref())?;
    let path = calibration_path(cfg, &s);
    write_file(&path, &json_with_hash(&manifest.hash, &model))?;
    Ok(CalibrateOutcome {
        model,
        path,
        manifest,
    })
}

pub struct EvalOutcome {
    pub report: MetricsReport,
    pub decisions: Vec<Decision>,
    pub decisions_path: PathBuf,
    pub metrics_path: PathBuf,
    pub manifest: RunManifest,
}

pub fn decision_log(hash: &str, decisions: &[Decision]) -> String {
    let mut s = String::new();
    for d in decisions {
        s.push_str(
            &serde_json::to_string(&WithHash {
                manifest_hash: hash,
                inner: d,
            })
            .expect("decision serializes"),
        );
        s.push('\n');
    }
    s
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalOutcome, CliError> {
    let _lock = RunLock::acquire(&cfg.output_dir)?;
    let fit_inline = cfg.calibration.enabled && cfg.calibration.model_path.is_none();
    let s = Session::open(cfg, fit_inline)?;
    let manifest = s.manifest(cfg, &s.stem(cfg, "eval.manifest.json"))?;

    let calibration = if !cfg.calibration.enabled {
        None
    } else if let Some(p) = &cfg.calibration.model_path {
        Some(read_json::<CalibrationModel>(p).map_err(|e| CliError::Config(e.to_string()))?)
    } else {
        let heldout = s.heldout.as_ref().expect("carved");
        let m = estimate_bias(heldout, &s.wiring.builder, s.wiring.backend.as_ref())?;
        write_file(
            &calibration_path(cfg, &s),
            &json_with_hash(&manifest.hash, &m),
        )?;
        Some(m)
    };

    let pipeline = s.pipeline(cfg, calibration);
    let decisions = pipeline.run_all(&s.dev.dataset.pairs, cfg.concurrency)?;
    let decisions_path = s.stem(cfg, "decisions.jsonl");
    write_file(&decisions_path, &decision_log(&manifest.hash, &decisions))?;

    let failures: Vec<&Decision> = decisions.iter().filter(|d| d.failure.is_some()).collect();
    if !decisions.is_empty() && failures.len() == decisions.len() {
        return Err(CliError::Backend(format!(
            "every request failed; first error: {}",
            failures[0].failure.as_deref().unwrap_or_default()
        )));
    }
    if !failures.is_empty() {
        let msg = format!(
            "{} of {} pairs hit backend failures",
            failures.len(),
            decisions.len()
        );
        if cfg.strict {
            return Err(CliError::Strict(msg));
        }
        eprintln!("warning: {msg}");
    }

    let outcomes =
        align(&decisions, &s.dev.dataset.pairs).map_err(|e| CliError::Data(e.to_string()))?;
    let mut report = evaluate(&outcomes, cfg.bootstrap.resamples, cfg.seeds.bootstrap)
        .map_err(|e| CliError::Data(e.to_string()))?;
    report.dataset = s.dev.dataset.name.clone();
    report.model = s.model.clone();
    report.mode = cfg.mode.as_str().to_string();
    report.manifest_hash = manifest.hash.clone();
    report.backend_failures = failures.len();
    let metrics_path = s.stem(cfg, "metrics.json");
    let mut metrics_json = serde_json::to_string_pretty(&report).expect("report serializes");
    metrics_json.push('\n');
    write_file(&metrics_path, &metrics_json)?;

    let breakdown = error_type_breakdown(&outcomes);
    if !breakdown.rows.is_empty() {
        write_file(
            &s.stem(cfg, "breakdown.json"),
            &json_with_hash(&manifest.hash, &breakdown),
        )?;
    }
    Ok(EvalOutcome {
        report,
        decisions,
        decisions_path,
        metrics_path,
        manifest,
    })
}

pub fn cmd_profile(cfg: &RunConfig) -> Result<ProfileReport, CliError> {
    let _lock = RunLock::acquire(&cfg.output_dir)?;
    let s = Session::open(cfg, false)?;
    let manifest = s.manifest(cfg, &s.stem(cfg, "profile.manifest.json"))?;
    let calibration = match &cfg.calibration.model_path {
        Some(p) if cfg.calibration.enabled => {
            Some(read_json::<CalibrationModel>(p).map_err(|e| CliError::Config(e.to_string()))?)
        }
        _ => None,
    };
    let pipeline = s.pipeline(cfg, calibration);
    let pcfg = ProfileConfig {
        repeats: cfg.profile.repeats,
        warmup: cfg.profile.warmup,
        batch: cfg.profile.batch,
        hardware: cfg.hardware.clone(),
    };
    let mut report = profile(&pipeline, &s.dev.dataset.pairs, &pcfg)?;
    report.model = s.model.clone();
    report.manifest_hash = manifest.hash;
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    write_file(&s.stem(cfg, "profile.json"), &json)?;
    Ok(report)
}

pub struct ReportOutcome {
    pub results: crate::report::RenderedTable,
    pub files: Vec<PathBuf>,
    pub stale: Vec<PathBuf>,
}

fn files_ending(dir: &Path, suffix: &str) -> Result<Vec<PathBuf>, CliError> {
    let rd = fs::read_dir(dir).map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))?;
    let mut out: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.ends_with(suffix))
        })
        .collect();
    out.sort();
    Ok(out)
}

/// The recorded hash must match the sibling manifest, which must verify.
fn fresh(path: &Path, suffix: &str, manifest_suffix: &str, hash: &str) -> bool {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default();
    let manifest = path.with_file_name(format!(
        "{}{manifest_suffix}",
        name.trim_end_matches(suffix)
    ));
    match read_json::<RunManifest>(&manifest) {
        Ok(m) => m.hash == hash && m.verify().is_ok(),
        Err(_) => false,
    }
}

pub fn cmd_report(cfg: &RunConfig) -> Result<ReportOutcome, CliError> {
    let dir = &cfg.output_dir;
    let mut stale = Vec::new();
    let mut metrics = Vec::new();
    for p in files_ending(dir, ".metrics.json")? {
        let m: MetricsReport = read_json(&p)?;
        if !fresh(&p, ".metrics.json", ".eval.manifest.json", &m.manifest_hash) {
            stale.push(p.clone());
        }
        metrics.push(m);
    }
    let mut profiles = Vec::new();
    for p in files_ending(dir, ".profile.json")? {
        let r: ProfileReport = read_json(&p)?;
        if !fresh(
            &p,
            ".profile.json",
            ".profile.manifest.json",
            &r.manifest_hash,
        ) {
            stale.push(p.clone());
        }
        profiles.push(r);
    }
    if !stale.is_empty() {
        let msg = format!("{} result file(s) do not match their manifest", stale.len());
        if cfg.strict {
            return Err(CliError::Strict(msg));
        }
        eprintln!("warning: {msg}");
    }

    let results = render_results_table(&metrics)?;
    let out = dir.join("report");
    let mut hashes: Vec<&str> = metrics.iter().map(|m| m.manifest_hash.as_str()).collect();
    hashes.extend(profiles.iter().map(|p| p.manifest_hash.as_str()));
    hashes.sort_unstable();
    hashes.dedup();
    let footer = format!("\n<!-- manifests: {} -->\n", hashes.join(" "));
    let mut files = Vec::new();
    let mut emit = |name: String, body: String| -> Result<(), CliError> {
        let p = out.join(name);
        write_file(&p, &body)?;
        files.push(p);
        Ok(())
    };
    emit("results.md".into(), format!("{}{footer}", results.markdown))?;
    emit("results.csv".into(), results.csv.clone())?;
    if !profiles.is_empty() {
        let compute = render_profile_table(&profiles);
        emit("compute.md".into(), format!("{}{footer}", compute.markdown))?;
        emit("compute.csv".into(), compute.csv)?;
        let mut datasets: Vec<&str> = metrics.iter().map(|m| m.dataset.as_str()).collect();
        datasets.sort_unstable();
        datasets.dedup();
        for d in datasets {
            let points = frontier_points(&metrics, &profiles, d);
            if points.is_empty() {
                continue;
            }
            emit(
                format!("{d}__frontier.csv"),
                frontier_csv(&pareto_frontier(&points)),
            )?;
            emit(format!("{d}__points.csv"), frontier_csv(&points))?;
        }
    }
    Ok(ReportOutcome {
        results,
        files,
        stale,
    })
}

pub fn cmd_sft_export(cfg: &RunConfig) -> Result<(PathBuf, PathBuf), CliError> {
    let train = load(require(&cfg.train, "train")?, Split::Train)?;
    if let Some(d) = &cfg.dev {
        let dev = load(d, Split::Dev)?;
        leak_gate(cfg, &train.dataset, &dev.dataset)?;
    }
    let builder = PromptBuilder::default();
    let bundle = export_sft(
        &train.dataset,
        &builder.template,
        &few_shot_policy(cfg),
        cfg.sft.clone(),
    )?;
    let ctx = RunContext {
        config: cfg.snapshot(),
        seeds: cfg.seeds.clone(),
        datasets: vec![(
            train.dataset.name.clone(),
            train.path.display().to_string(),
            Some(train.sha256.clone()),
        )],
        backend: crate::backend::BackendDescriptor {
            kind: crate::backend::BackendKind::ScriptedMock,
            model_id: cfg.model.clone().unwrap_or_default(),
            endpoint: String::new(),
            auth_env: None,
            supports_logprobs: false,
            reports_memory: false,
            max_in_flight: None,
        },
    };
    let dir = cfg.output_dir.join(format!("{}__sft", train.dataset.name));
    let manifest = emit_manifest(&ctx, &dir.join("run.manifest.json"))?;
    let (records, manifest_path) = bundle.write_to(&dir)?;
    write_file(
        &manifest_path,
        &json_with_hash(&manifest.hash, &bundle.manifest),
    )?;
    Ok((records, manifest_path))
}
