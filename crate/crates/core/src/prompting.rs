//! Prompt rendering, exemplar selection, token budgeting and SFT export.
//!
//! A rendered prompt is the instruction block, an optional run of labeled exemplar
//! triples, and the query triple, joined by blank lines:
//!
//! ```text
//! <instruction>
//!
//! Source: ...
//! Translation: ...
//! Label: ERR
//!
//! Source: ...
//! Translation: ...
//! Label:
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{normalize_text, Dataset, Label, Pair};

/// The classification instruction, identical for every model and backend.
pub const CED_INSTRUCTION: &str = "You are an EXPERT translation quality evaluator for EN\u{2192}DE Critical Error Detection.
Classify each translation as ERR or NOT based on these CRITICAL errors:
\u{2022} ERR: Major meaning changes, omissions, hallucinations, wrong entities, negation flips, toxic/safety issues, significant number/date errors.
\u{2022} NOT: Minor style/grammar issues, acceptable paraphrasing, preserved meaning.
IMPORTANT: Output ONLY ERR or NOT (no punctuation, no explanation).";

pub const DEFAULT_TOKEN_LIMIT: usize = 1024;
pub const DEFAULT_K: usize = 12;

const BLOCK_SEPARATOR: &str = "\n\n";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("prompt needs {tokens} tokens, limit is {limit}")]
    BudgetExceeded { tokens: usize, limit: usize },
    #[error("insufficient {label} candidates: need {needed}, have {available}")]
    InsufficientCandidates {
        label: Label,
        needed: usize,
        available: usize,
    },
    #[error("k must be even for balanced selection, got {0}")]
    OddK(usize),
    #[error("exemplar set contains the query pair {0:?}")]
    QueryInExemplars(String),
    #[error("pair {0:?} has no gold label")]
    MissingGold(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Counts prompt tokens for budget enforcement.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> usize;
}

/// Approximate counter for backends without a tokenizer: `ceil(bytes / 4) + words`.
///
/// Overestimates typical subword tokenizers on German/English text.
#[derive(Clone, Copy, Debug, Default)]
pub struct FallbackEstimator;

impl TokenCounter for FallbackEstimator {
    fn count(&self, text: &str) -> usize {
        text.len().div_ceil(4) + text.split_whitespace().count()
    }
}

impl<T: TokenCounter + ?Sized> TokenCounter for Arc<T> {
    fn count(&self, text: &str) -> usize {
        (**self).count(text)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub instruction: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            instruction: CED_INSTRUCTION.to_string(),
        }
    }
}

impl PromptTemplate {
    pub fn exemplar_block(&self, pair: &Pair, label: Label) -> String {
        format!(
            "Source: {}\nTranslation: {}\nLabel: {}",
            pair.source, pair.target, label
        )
    }

    pub fn query_block(&self, pair: &Pair) -> String {
        format!(
            "Source: {}\nTranslation: {}\nLabel:",
            pair.source, pair.target
        )
    }

    /// Render without budget enforcement.
    pub fn render(
        &self,
        query: &Pair,
        exemplars: &[Pair],
        counter: &dyn TokenCounter,
    ) -> Result<Prompt, PromptError> {
        let mut rendered = Vec::with_capacity(exemplars.len());
        for ex in exemplars {
            if ex.id == query.id {
                return Err(PromptError::QueryInExemplars(ex.id.clone()));
            }
            let label = ex
                .gold
                .ok_or_else(|| PromptError::MissingGold(ex.id.clone()))?;
            rendered.push(PromptExemplar {
                id: ex.id.clone(),
                label,
                block: self.exemplar_block(ex, label),
            });
        }
        let mut prompt = Prompt {
            text: String::new(),
            token_count: 0,
            instruction: self.instruction.clone(),
            exemplars: rendered,
            query_id: query.id.clone(),
            query_block: self.query_block(query),
        };
        prompt.rebuild(counter);
        Ok(prompt)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct PromptExemplar {
    id: String,
    label: Label,
    block: String,
}

/// A fully rendered prompt with its token count under the estimator that built it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prompt {
    text: String,
    token_count: usize,
    instruction: String,
    exemplars: Vec<PromptExemplar>,
    query_id: String,
    query_block: String,
}

impl Prompt {
    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }

    pub fn query_id(&self) -> &str {
        &self.query_id
    }

    pub fn exemplar_ids(&self) -> Vec<&str> {
        self.exemplars.iter().map(|e| e.id.as_str()).collect()
    }

    pub fn exemplar_labels(&self) -> Vec<Label> {
        self.exemplars.iter().map(|e| e.label).collect()
    }

    pub fn is_zero_shot(&self) -> bool {
        self.exemplars.is_empty()
    }

    fn rebuild(&mut self, counter: &dyn TokenCounter) {
        let mut text = String::with_capacity(
            self.instruction.len()
                + self.query_block.len()
                + self
                    .exemplars
                    .iter()
                    .map(|e| e.block.len() + 2)
                    .sum::<usize>()
                + 2,
        );
        text.push_str(&self.instruction);
        for ex in &self.exemplars {
            text.push_str(BLOCK_SEPARATOR);
            text.push_str(&ex.block);
        }
        text.push_str(BLOCK_SEPARATOR);
        text.push_str(&self.query_block);
        self.token_count = counter.count(&text);
        self.text = text;
    }

    /// Remove the last ERR and the last NOT exemplar. Falls back to the last
    /// exemplar of any label if only one label remains.
    fn drop_trailing_pair(&mut self) {
        let last_of = |label| self.exemplars.iter().rposition(|e| e.label == label);
        match (last_of(Label::Err), last_of(Label::Not)) {
            (Some(a), Some(b)) => {
                self.exemplars.remove(a.max(b));
                self.exemplars.remove(a.min(b));
            }
            _ => {
                self.exemplars.pop();
            }
        }
    }
}

/// Fit `prompt` under `limit` tokens by dropping balanced exemplar pairs from the end.
/// The query is never truncated; a zero-shot prompt over the limit is an error.
pub fn enforce_budget(
    mut prompt: Prompt,
    limit: usize,
    counter: &dyn TokenCounter,
) -> Result<Prompt, PromptError> {
    prompt.rebuild(counter);
    while prompt.token_count > limit {
        if prompt.exemplars.is_empty() {
            return Err(PromptError::BudgetExceeded {
                tokens: prompt.token_count,
                limit,
            });
        }
        prompt.drop_trailing_pair();
        prompt.rebuild(counter);
    }
    Ok(prompt)
}

/// Renders budgeted prompts with a fixed template and token estimator.
#[derive(Clone)]
pub struct PromptBuilder {
    pub template: PromptTemplate,
    pub counter: Arc<dyn TokenCounter>,
    pub limit: usize,
}

impl Default for PromptBuilder {
    fn default() -> Self {
        PromptBuilder {
            template: PromptTemplate::default(),
            counter: Arc::new(FallbackEstimator),
            limit: DEFAULT_TOKEN_LIMIT,
        }
    }
}

impl PromptBuilder {
    pub fn new(counter: Arc<dyn TokenCounter>) -> Self {
        PromptBuilder {
            counter,
            ..Default::default()
        }
    }

    pub fn build_zero_shot(&self, pair: &Pair) -> Result<Prompt, PromptError> {
        self.build_few_shot(pair, &ExemplarSet::default())
    }

    pub fn build_few_shot(
        &self,
        pair: &Pair,
        exemplars: &ExemplarSet,
    ) -> Result<Prompt, PromptError> {
        let prompt = self
            .template
            .render(pair, &exemplars.exemplars, self.counter.as_ref())?;
        enforce_budget(prompt, self.limit, self.counter.as_ref())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExemplarOrder {
    FixedForEval,
    ShufflePerEpoch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotPolicy {
    pub k: usize,
    pub seed: u64,
    pub order: ExemplarOrder,
    /// Candidates whose source shares at least this fraction of word 4-grams
    /// with the query source are excluded.
    pub overlap_threshold: f64,
}

impl Default for FewShotPolicy {
    fn default() -> Self {
        FewShotPolicy {
            k: DEFAULT_K,
            seed: 0,
            order: ExemplarOrder::FixedForEval,
            overlap_threshold: 0.5,
        }
    }
}

/// Exemplars in prompt order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ExemplarSet {
    pub exemplars: Vec<Pair>,
}

impl ExemplarSet {
    pub fn ids(&self) -> Vec<&str> {
        self.exemplars.iter().map(|p| p.id.as_str()).collect()
    }

    pub fn count(&self, label: Label) -> usize {
        self.exemplars
            .iter()
            .filter(|p| p.gold == Some(label))
            .count()
    }

    pub fn len(&self) -> usize {
        self.exemplars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exemplars.is_empty()
    }
}

fn word_fourgrams(text: &str) -> HashSet<Vec<String>> {
    let words: Vec<String> = text
        .split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect();
    words.windows(4).map(|w| w.to_vec()).collect()
}

/// Lexical overlap between two sources in `[0, 1]`.
///
/// 1.0 for an exact (case-insensitive, normalized) match; otherwise the shared
/// fraction of lowercased word 4-grams relative to the smaller 4-gram set, or 0.0
/// when either side has fewer than four words.
pub fn overlap_score(candidate_source: &str, query_source: &str) -> f64 {
    let a = normalize_text(candidate_source).to_lowercase();
    let b = normalize_text(query_source).to_lowercase();
    if a == b {
        return 1.0;
    }
    let ga = word_fourgrams(&a);
    let gb = word_fourgrams(&b);
    if ga.is_empty() || gb.is_empty() {
        return 0.0;
    }
    let shared = ga.intersection(&gb).count();
    shared as f64 / ga.len().min(gb.len()) as f64
}

/// A seeded candidate ordering drawn once per run from the train split.
///
/// Per-query selection walks each label's fixed order and skips candidates that
/// overlap the query, so every query sees the same exemplars unless overlap forces
/// a substitution.
#[derive(Clone, Debug)]
pub struct ExemplarPool {
    err: Vec<Pair>,
    not: Vec<Pair>,
    seed: u64,
}

impl ExemplarPool {
    pub fn draw(train: &Dataset, seed: u64) -> ExemplarPool {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut err: Vec<Pair> = train.with_label(Label::Err).cloned().collect();
        let mut not: Vec<Pair> = train.with_label(Label::Not).cloned().collect();
        err.shuffle(&mut rng);
        not.shuffle(&mut rng);
        ExemplarPool { err, not, seed }
    }

    pub fn select(&self, query: &Pair, policy: &FewShotPolicy) -> Result<ExemplarSet, PromptError> {
        if !policy.k.is_multiple_of(2) {
            return Err(PromptError::OddK(policy.k));
        }
        let half = policy.k / 2;
        let eligible = |p: &&Pair| {
            p.id != query.id && overlap_score(&p.source, &query.source) < policy.overlap_threshold
        };
        let mut chosen = Vec::with_capacity(policy.k);
        for (label, candidates) in [(Label::Err, &self.err), (Label::Not, &self.not)] {
            let picked: Vec<Pair> = candidates
                .iter()
                .filter(eligible)
                .take(half)
                .cloned()
                .collect();
            if picked.len() < half {
                return Err(PromptError::InsufficientCandidates {
                    label,
                    needed: half,
                    available: picked.len(),
                });
            }
            chosen.extend(picked);
        }
        // Order depends on the seed alone, not on the query.
        let mut order_rng = ChaCha8Rng::seed_from_u64(self.seed);
        order_rng.set_stream(1);
        chosen.shuffle(&mut order_rng);
        Ok(ExemplarSet { exemplars: chosen })
    }
}

/// Balanced exemplars for `query`. Prefer [`ExemplarPool`] when serving many queries.
pub fn select_exemplars(
    train: &Dataset,
    query: &Pair,
    policy: &FewShotPolicy,
) -> Result<ExemplarSet, PromptError> {
    ExemplarPool::draw(train, policy.seed).select(query, policy)
}

/// Fine-tuning hyperparameters shipped alongside exported SFT records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingManifest {
    pub epochs: u32,
    pub epochs_note: String,
    pub global_batch_size: u32,
    pub micro_batch_size: u32,
    pub gradient_accumulation_steps: u32,
    pub optimizer: String,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub learning_rate: f64,
    pub lr_scheduler: String,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub save_steps: u32,
    pub logging_steps: u32,
    pub best_checkpoint_metric: String,
    pub precision: String,
    pub precision_fallback: String,
    pub checkpoint_format: String,
}

impl Default for TrainingManifest {
    fn default() -> Self {
        TrainingManifest {
            epochs: 2,
            epochs_note: "single pass over concatenated train splits".into(),
            global_batch_size: 32,
            micro_batch_size: 16,
            gradient_accumulation_steps: 2,
            optimizer: "AdamW (torch)".into(),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            learning_rate: 1e-4,
            lr_scheduler: "cosine".into(),
            warmup_ratio: 0.03,
            weight_decay: 0.0,
            save_steps: 1000,
            logging_steps: 50,
            best_checkpoint_metric: "dev MCC".into(),
            precision: "bfloat16".into(),
            precision_fallback: "fp16".into(),
            checkpoint_format: "merged full weights".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub prompt: String,
    pub completion: Label,
    pub epoch: u32,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftBundle {
    pub records: Vec<SftRecord>,
    pub manifest: TrainingManifest,
}

pub const SFT_RECORDS_FILE: &str = "sft_records.jsonl";
pub const SFT_MANIFEST_FILE: &str = "sft_manifest.json";

impl SftBundle {
    pub fn records_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn manifest_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        s.push('\n');
        s
    }

    /// Write records and manifest into `dir`, returning both paths.
    pub fn write_to(&self, dir: &Path) -> Result<(PathBuf, PathBuf), PromptError> {
        let io = |path: &Path| {
            let path = path.display().to_string();
            move |source| PromptError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let records = dir.join(SFT_RECORDS_FILE);
        let manifest = dir.join(SFT_MANIFEST_FILE);
        fs::write(&records, self.records_jsonl()).map_err(io(&records))?;
        fs::write(&manifest, self.manifest_json()).map_err(io(&manifest))?;
        Ok((records, manifest))
    }
}

/// Zero-shot prompt/label records for every train pair, one shuffled pass per epoch.
pub fn export_sft(
    train: &Dataset,
    template: &PromptTemplate,
    policy: &FewShotPolicy,
    manifest: TrainingManifest,
) -> Result<SftBundle, PromptError> {
    let mut base = Vec::with_capacity(train.len());
    for p in &train.pairs {
        let completion = p
            .gold
            .ok_or_else(|| PromptError::MissingGold(p.id.clone()))?;
        let prompt = format!(
            "{}{}{}",
            template.instruction,
            BLOCK_SEPARATOR,
            template.query_block(p)
        );
        base.push((prompt, completion));
    }

    let mut records = Vec::with_capacity(base.len() * manifest.epochs as usize);
    let mut order: Vec<usize> = (0..base.len()).collect();
    for epoch in 0..manifest.epochs {
        let reshuffle = epoch == 0 || policy.order == ExemplarOrder::ShufflePerEpoch;
        if reshuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
            rng.set_stream(u64::from(epoch) + 1);
            order = (0..base.len()).collect();
            order.shuffle(&mut rng);
        }
        for (index, &i) in order.iter().enumerate() {
            let (prompt, completion) = &base[i];
            records.push(SftRecord {
                prompt: prompt.clone(),
                completion: *completion,
                epoch,
                index,
            });
        }
    }
    Ok(SftBundle { records, manifest })
}
