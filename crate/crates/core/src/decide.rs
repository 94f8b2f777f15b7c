//! From backend outputs to final labels: strict parsing with re-asking, logit-bias
//! calibration, and majority voting.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, DecodeMode, LabelLogits, SamplingPolicy};
use crate::corpus::{Dataset, Label, Pair};
use crate::prompting::{PromptBuilder, PromptError};

pub const DEFAULT_MAX_ATTEMPTS: u32 = 3;
pub const DEFAULT_VOTES: usize = 3;
pub const BETA_RANGE: (f64, f64) = (-10.0, 10.0);
pub const BISECTION_TOLERANCE: f64 = 0.005;
pub const BISECTION_MAX_ITER: u32 = 60;

/// A parsed model answer. `Invalid` is a value, never an error.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "ERR")]
    Err,
    #[serde(rename = "NOT")]
    Not,
    #[serde(rename = "INVALID")]
    Invalid,
}

impl Verdict {
    pub fn label(self) -> Option<Label> {
        match self {
            Verdict::Err => Some(Label::Err),
            Verdict::Not => Some(Label::Not),
            Verdict::Invalid => None,
        }
    }
}

impl From<Label> for Verdict {
    fn from(l: Label) -> Verdict {
        match l {
            Label::Err => Verdict::Err,
            Label::Not => Verdict::Not,
        }
    }
}

/// Exact, case-sensitive match after trimming surrounding whitespace.
pub fn parse_label(text: &str) -> Verdict {
    match text.trim() {
        "ERR" => Verdict::Err,
        "NOT" => Verdict::Not,
        _ => Verdict::Invalid,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    ZeroShot,
    FewShot,
    Vote,
    FinetunedEval,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::ZeroShot => "zero-shot",
            Mode::FewShot => "few-shot",
            Mode::Vote => "vote",
            Mode::FinetunedEval => "finetuned-eval",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub n_err: usize,
    pub n_not: usize,
}

impl Tally {
    pub fn from_verdicts<'a>(verdicts: impl IntoIterator<Item = &'a Verdict>) -> Tally {
        verdicts.into_iter().fold(Tally::default(), |mut t, v| {
            match v {
                Verdict::Err => t.n_err += 1,
                Verdict::Not => t.n_not += 1,
                Verdict::Invalid => {}
            }
            t
        })
    }

    pub fn valid(&self) -> usize {
        self.n_err + self.n_not
    }

    /// Majority label; ties go to ERR, no valid votes is Invalid.
    pub fn mode(&self) -> Verdict {
        if self.valid() == 0 {
            Verdict::Invalid
        } else if self.n_err >= self.n_not {
            Verdict::Err
        } else {
            Verdict::Not
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub pair_id: String,
    pub label: Verdict,
    /// Final raw text of each vote. Logit decisions record the label they chose.
    pub votes: Vec<String>,
    pub tally: Tally,
    /// Backend calls issued for this decision, counting first attempts.
    pub retries_used: u32,
    pub beta_applied: f64,
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<LabelLogits>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl Decision {
    /// Recompute the label from the recorded evidence.
    pub fn replay(&self) -> Verdict {
        if let Some(l) = self.logits {
            return biased_decision(l, self.beta_applied).into();
        }
        let verdicts: Vec<Verdict> = self.votes.iter().map(|v| parse_label(v)).collect();
        Tally::from_verdicts(&verdicts).mode()
    }

    /// An Invalid decision for a pair whose backend calls failed.
    pub fn failed(pair_id: &str, mode: Mode, error: &BackendError) -> Decision {
        Decision {
            pair_id: pair_id.to_string(),
            label: Verdict::Invalid,
            votes: Vec::new(),
            tally: Tally::default(),
            retries_used: 0,
            beta_applied: 0.0,
            mode,
            logits: None,
            failure: Some(error.to_string()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMethod {
    PriorMatchingBisection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    /// Offset added to the ERR log-probability.
    pub beta: f64,
    /// ERR prevalence of the held-out set.
    pub fitted_prior: f64,
    pub heldout_size: usize,
    pub fit_method: FitMethod,
    pub uncalibrated_err_rate: f64,
    pub calibrated_err_rate: f64,
    pub iterations: u32,
    pub converged: bool,
}

#[derive(Debug, Error)]
pub enum DecideError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("degenerate held-out prior: {0} of {1} pairs are ERR")]
    DegeneratePrior(usize, usize),
    #[error("held-out set is empty")]
    EmptyHeldout,
    #[error("held-out pair {0:?} has no gold label")]
    MissingGold(String),
}

pub fn apply_bias(logits: LabelLogits, beta: f64) -> LabelLogits {
    LabelLogits {
        err: logits.err + beta,
        not: logits.not,
    }
}

/// ERR iff `logp_err + beta > logp_not`.
pub fn biased_decision(logits: LabelLogits, beta: f64) -> Label {
    let b = apply_bias(logits, beta);
    if b.err > b.not {
        Label::Err
    } else {
        Label::Not
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub max_attempts: u32,
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: u32,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            temperature: crate::backend::DEFAULT_TEMPERATURE,
            top_p: crate::backend::DEFAULT_TOP_P,
            max_new_tokens: crate::backend::DEFAULT_MAX_NEW_TOKENS,
            seed: 0,
        }
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl DecodeConfig {
    fn sampled(&self, seed: u64) -> SamplingPolicy {
        SamplingPolicy {
            mode: DecodeMode::Sampled {
                temperature: self.temperature,
                top_p: self.top_p,
            },
            max_new_tokens: self.max_new_tokens,
            seed,
        }
    }

    fn greedy(&self) -> SamplingPolicy {
        SamplingPolicy {
            mode: DecodeMode::Greedy,
            max_new_tokens: self.max_new_tokens,
            seed: self.seed,
        }
    }

    /// Seed for vote `vote` attempt `attempt` (1-based). First attempts use
    /// `seed + vote`; re-asks get fresh derived seeds.
    pub fn seed_for(&self, vote: usize, attempt: u32) -> u64 {
        if attempt <= 1 {
            self.seed.wrapping_add(vote as u64)
        } else {
            splitmix(splitmix(self.seed ^ ((vote as u64) << 32)) ^ u64::from(attempt))
        }
    }
}

struct Asked {
    verdict: Verdict,
    raw: String,
    attempts: u32,
}

/// Generate and parse, re-asking with sampled decoding until a label parses or
/// attempts run out.
fn ask(
    backend: &dyn Backend,
    prompt: &str,
    cfg: &DecodeConfig,
    vote: usize,
    first: SamplingPolicy,
) -> Result<Asked, BackendError> {
    let max = cfg.max_attempts.max(1);
    let mut raw = String::new();
    for attempt in 1..=max {
        let policy = if attempt == 1 {
            first
        } else {
            cfg.sampled(cfg.seed_for(vote, attempt))
        };
        raw = backend.complete(prompt, &policy)?.text;
        let verdict = parse_label(&raw);
        if verdict != Verdict::Invalid {
            return Ok(Asked {
                verdict,
                raw,
                attempts: attempt,
            });
        }
    }
    Ok(Asked {
        verdict: Verdict::Invalid,
        raw,
        attempts: max,
    })
}

/// Calibrated logits when a model is given and the backend supports them.
fn calibrated_logits(
    backend: &dyn Backend,
    prompt: &str,
    calib: Option<&CalibrationModel>,
) -> Result<Option<(LabelLogits, f64)>, BackendError> {
    let Some(model) = calib else { return Ok(None) };
    match backend.label_logits(prompt) {
        Ok(l) => Ok(Some((l, model.beta))),
        Err(BackendError::Capability(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn logit_decision(
    pair: &Pair,
    mode: Mode,
    logits: LabelLogits,
    beta: f64,
    copies: usize,
) -> Decision {
    let label = biased_decision(logits, beta);
    let votes = vec![label.as_str().to_string(); copies];
    let verdicts = vec![Verdict::from(label); copies];
    Decision {
        pair_id: pair.id.clone(),
        label: label.into(),
        votes,
        tally: Tally::from_verdicts(&verdicts),
        retries_used: 1,
        beta_applied: beta,
        mode,
        logits: Some(logits),
        failure: None,
    }
}

/// Single decision: biased logits when calibrated, otherwise greedy generation
/// with up to `max_attempts` asks.
pub fn decide_greedy(
    pair: &Pair,
    prompt: &str,
    backend: &dyn Backend,
    calib: Option<&CalibrationModel>,
    cfg: &DecodeConfig,
    mode: Mode,
) -> Result<Decision, BackendError> {
    if let Some((logits, beta)) = calibrated_logits(backend, prompt, calib)? {
        return Ok(logit_decision(pair, mode, logits, beta, 1));
    }
    let asked = ask(backend, prompt, cfg, 0, cfg.greedy())?;
    let verdicts = [asked.verdict];
    Ok(Decision {
        pair_id: pair.id.clone(),
        label: asked.verdict,
        votes: vec![asked.raw],
        tally: Tally::from_verdicts(&verdicts),
        retries_used: asked.attempts,
        beta_applied: 0.0,
        mode,
        logits: None,
        failure: None,
    })
}

/// Majority vote over `m` sampled generations, each re-asked independently.
pub fn vote(
    pair: &Pair,
    prompt: &str,
    backend: &dyn Backend,
    m: usize,
    cfg: &DecodeConfig,
    calib: Option<&CalibrationModel>,
) -> Result<Decision, BackendError> {
    let m = m.max(1);
    if let Some((logits, beta)) = calibrated_logits(backend, prompt, calib)? {
        return Ok(logit_decision(pair, Mode::Vote, logits, beta, m));
    }
    let mut votes = Vec::with_capacity(m);
    let mut verdicts = Vec::with_capacity(m);
    let mut calls = 0;
    for i in 0..m {
        let asked = ask(backend, prompt, cfg, i, cfg.sampled(cfg.seed_for(i, 1)))?;
        calls += asked.attempts;
        verdicts.push(asked.verdict);
        votes.push(asked.raw);
    }
    let tally = Tally::from_verdicts(&verdicts);
    Ok(Decision {
        pair_id: pair.id.clone(),
        label: tally.mode(),
        votes,
        tally,
        retries_used: calls,
        beta_applied: 0.0,
        mode: Mode::Vote,
        logits: None,
        failure: None,
    })
}

/// Fraction of margins classified ERR under offset `beta`.
pub fn err_rate(margins: &[f64], beta: f64) -> f64 {
    if margins.is_empty() {
        return 0.0;
    }
    margins.iter().filter(|&&d| d + beta > 0.0).count() as f64 / margins.len() as f64
}

/// Bisection for the offset whose ERR rate matches `prior` within tolerance.
/// Returns the best offset seen when the window is unreachable.
pub fn fit_beta(margins: &[f64], prior: f64) -> (f64, u32, bool) {
    let (mut lo, mut hi) = BETA_RANGE;
    let mut best = (f64::INFINITY, 0.0);
    for iter in 1..=BISECTION_MAX_ITER {
        let mid = 0.5 * (lo + hi);
        let rate = err_rate(margins, mid);
        let gap = (rate - prior).abs();
        if gap < best.0 {
            best = (gap, mid);
        }
        if gap <= BISECTION_TOLERANCE {
            return (mid, iter, true);
        }
        if rate < prior {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (best.1, BISECTION_MAX_ITER, false)
}

/// Fit the ERR offset on a held-out set from zero-shot label log-odds.
pub fn estimate_bias(
    heldout: &Dataset,
    builder: &PromptBuilder,
    backend: &dyn Backend,
) -> Result<CalibrationModel, DecideError> {
    if heldout.is_empty() {
        return Err(DecideError::EmptyHeldout);
    }
    let mut margins = Vec::with_capacity(heldout.len());
    let mut n_err = 0;
    for pair in &heldout.pairs {
        let gold = pair
            .gold
            .ok_or_else(|| DecideError::MissingGold(pair.id.clone()))?;
        if gold == Label::Err {
            n_err += 1;
        }
        let prompt = builder.build_zero_shot(pair)?;
        margins.push(backend.label_logits(prompt.text())?.margin());
    }
    let n = heldout.len();
    if n_err == 0 || n_err == n {
        return Err(DecideError::DegeneratePrior(n_err, n));
    }
    let prior = n_err as f64 / n as f64;
    let (beta, iterations, converged) = fit_beta(&margins, prior);
    Ok(CalibrationModel {
        beta,
        fitted_prior: prior,
        heldout_size: n,
        fit_method: FitMethod::PriorMatchingBisection,
        uncalibrated_err_rate: err_rate(&margins, 0.0),
        calibrated_err_rate: err_rate(&margins, beta),
        iterations,
        converged,
    })
}
