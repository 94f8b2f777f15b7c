//! Text-completion backends.
//!
//! [`Backend`] is the seam between the harness and an inference engine. Three
//! implementations ship here:
//!
//! * [`HttpBackend`] talks to a completion server over the wire protocol in
//!   `docs/protocol.md`.
//! * [`ScriptedMock`] replays fixed responses keyed by prompt hash.
//! * [`ParametricMock`] scores each query with a known logistic rule, so tests can
//!   recompute its probabilities independently.

use std::collections::HashMap;
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::Label;
use crate::prompting::{FallbackEstimator, TokenCounter};

pub const DEFAULT_TEMPERATURE: f64 = 0.2;
pub const DEFAULT_TOP_P: f64 = 0.9;
pub const DEFAULT_MAX_NEW_TOKENS: u32 = 2;
pub const DEFAULT_AUTH_ENV: &str = "CED_BACKEND_TOKEN";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("capability error: {0}")]
    Capability(String),
    #[error("invalid sampling policy: {0}")]
    InvalidPolicy(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Sampled { temperature: f64, top_p: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingPolicy {
    pub mode: DecodeMode,
    pub max_new_tokens: u32,
    pub seed: u64,
}

impl SamplingPolicy {
    pub fn greedy() -> SamplingPolicy {
        SamplingPolicy {
            mode: DecodeMode::Greedy,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            seed: 0,
        }
    }

    pub fn sampled(seed: u64) -> SamplingPolicy {
        SamplingPolicy {
            mode: DecodeMode::Sampled {
                temperature: DEFAULT_TEMPERATURE,
                top_p: DEFAULT_TOP_P,
            },
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if !(1..=2).contains(&self.max_new_tokens) {
            return Err(BackendError::InvalidPolicy(format!(
                "max_new_tokens must be 1 or 2, got {}",
                self.max_new_tokens
            )));
        }
        if let DecodeMode::Sampled { temperature, top_p } = self.mode {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(BackendError::InvalidPolicy(format!(
                    "temperature {temperature}"
                )));
            }
            if !(top_p > 0.0 && top_p <= 1.0) {
                return Err(BackendError::InvalidPolicy(format!("top_p {top_p}")));
            }
        }
        Ok(())
    }
}

/// Log-probabilities of the two labels, renormalized over the pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelLogits {
    pub err: f64,
    pub not: f64,
}

impl LabelLogits {
    /// Renormalize raw label log-probabilities so that `exp(err) + exp(not) = 1`.
    pub fn renormalize(raw_err: f64, raw_not: f64) -> Result<LabelLogits, BackendError> {
        if !(raw_err.is_finite() && raw_not.is_finite()) {
            return Err(BackendError::Protocol(format!(
                "non-finite label log-probabilities ({raw_err}, {raw_not})"
            )));
        }
        let z = log_sum_exp(raw_err, raw_not);
        Ok(LabelLogits {
            err: raw_err - z,
            not: raw_not - z,
        })
    }

    pub fn from_err_probability(p_err: f64) -> Result<LabelLogits, BackendError> {
        LabelLogits::renormalize(p_err.ln(), (1.0 - p_err).ln())
    }

    pub fn margin(&self) -> f64 {
        self.err - self.not
    }
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub label_logprobs: Option<LabelLogits>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    HttpCompletion,
    ScriptedMock,
    ParametricMock,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    pub model_id: String,
    /// Base URL for HTTP backends; free-form configuration echo for mocks.
    pub endpoint: String,
    /// Name of the environment variable carrying the bearer token.
    pub auth_env: Option<String>,
    pub supports_logprobs: bool,
    pub reports_memory: bool,
    /// `Some(1)` marks a backend that serves one request at a time.
    pub max_in_flight: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MemorySource {
    BackendReported,
    ProcessRss,
    Unsupported,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryProbe {
    pub bytes: Option<u64>,
    pub source: MemorySource,
}

impl MemoryProbe {
    pub fn unsupported() -> MemoryProbe {
        MemoryProbe {
            bytes: None,
            source: MemorySource::Unsupported,
        }
    }
}

/// Peak resident set size of this process (Linux `VmHWM`).
pub fn process_peak_rss() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// Falls back to process RSS, then to unsupported.
pub fn fallback_memory_probe() -> MemoryProbe {
    match process_peak_rss() {
        Some(bytes) => MemoryProbe {
            bytes: Some(bytes),
            source: MemorySource::ProcessRss,
        },
        None => MemoryProbe::unsupported(),
    }
}

pub trait Backend: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    fn complete(&self, prompt: &str, policy: &SamplingPolicy) -> Result<Completion, BackendError>;

    /// First-token label log-probabilities, renormalized over {ERR, NOT}.
    fn label_logits(&self, prompt: &str) -> Result<LabelLogits, BackendError>;

    fn probe_memory(&self) -> MemoryProbe {
        fallback_memory_probe()
    }

    /// Backend tokenizer count, when the backend exposes one.
    fn count_tokens(&self, _text: &str) -> Option<usize> {
        None
    }
}

fn capability_error(descriptor: &BackendDescriptor) -> BackendError {
    BackendError::Capability(format!(
        "backend {} does not expose log-probabilities; run in vote-only mode without calibration",
        descriptor.model_id
    ))
}

/// Token counter that asks the backend first and falls back to [`FallbackEstimator`].
pub struct BackendTokenCounter<B> {
    backend: B,
}

impl<B> BackendTokenCounter<B> {
    pub fn new(backend: B) -> Self {
        BackendTokenCounter { backend }
    }
}

impl<B: std::ops::Deref + Send + Sync> TokenCounter for BackendTokenCounter<B>
where
    B::Target: Backend,
{
    fn count(&self, text: &str) -> usize {
        self.backend
            .count_tokens(text)
            .unwrap_or_else(|| FallbackEstimator.count(text))
    }
}

pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

/// Keep at most `n` whitespace-delimited chunks of `text`, preserving the original bytes.
fn truncate_words(text: &str, n: u32) -> &str {
    let mut seen = 0;
    let mut in_word = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if in_word {
                seen += 1;
                if seen == n {
                    return &text[..i];
                }
            }
            in_word = false;
        } else {
            in_word = true;
        }
    }
    text
}

/// Replays scripted responses. Each prompt hash maps to a response sequence that
/// is consumed in call order and wraps around; unscripted prompts use the default
/// sequence.
pub struct ScriptedMock {
    descriptor: BackendDescriptor,
    scripts: HashMap<String, Vec<String>>,
    default: Vec<String>,
    logits: HashMap<String, LabelLogits>,
    label_confidence: f64,
    counters: Mutex<HashMap<String, usize>>,
    delay: Duration,
    serial: Option<Mutex<()>>,
    failures: Mutex<u32>,
}

impl ScriptedMock {
    pub fn new(default: impl IntoIterator<Item = impl Into<String>>) -> ScriptedMock {
        ScriptedMock {
            descriptor: BackendDescriptor {
                kind: BackendKind::ScriptedMock,
                model_id: "scripted-mock".into(),
                endpoint: "mock://scripted".into(),
                auth_env: None,
                supports_logprobs: true,
                reports_memory: false,
                max_in_flight: None,
            },
            scripts: HashMap::new(),
            default: default.into_iter().map(Into::into).collect(),
            logits: HashMap::new(),
            label_confidence: 0.9,
            counters: Mutex::new(HashMap::new()),
            delay: Duration::ZERO,
            serial: None,
            failures: Mutex::new(0),
        }
    }

    /// Always answers `text`.
    pub fn constant(text: &str) -> ScriptedMock {
        ScriptedMock::new([text])
    }

    pub fn with_model_id(mut self, id: &str) -> Self {
        self.descriptor.model_id = id.to_string();
        self
    }

    pub fn script(
        self,
        prompt: &str,
        responses: impl IntoIterator<Item = impl Into<String>>,
    ) -> Self {
        self.script_hash(&prompt_hash(prompt), responses)
    }

    pub fn script_hash(
        mut self,
        hash: &str,
        responses: impl IntoIterator<Item = impl Into<String>>,
    ) -> Self {
        self.scripts.insert(
            hash.to_string(),
            responses.into_iter().map(Into::into).collect(),
        );
        self
    }

    pub fn with_logits(mut self, prompt: &str, logits: LabelLogits) -> Self {
        self.logits.insert(prompt_hash(prompt), logits);
        self
    }

    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }

    /// Serve one request at a time.
    pub fn serialized(mut self) -> Self {
        self.serial = Some(Mutex::new(()));
        self.descriptor.max_in_flight = Some(1);
        self
    }

    pub fn without_logprobs(mut self) -> Self {
        self.descriptor.supports_logprobs = false;
        self
    }

    /// Fail the next `n` calls with a transport error.
    pub fn with_transport_failures(self, n: u32) -> Self {
        *self.failures.lock().unwrap() = n;
        self
    }

    /// Restart every response sequence from the beginning.
    pub fn reset(&self) {
        self.counters.lock().unwrap().clear();
    }

    fn inject_failure(&self) -> Result<(), BackendError> {
        let mut left = self.failures.lock().unwrap();
        if *left > 0 {
            *left -= 1;
            return Err(BackendError::Transport {
                attempts: 1,
                message: "injected failure".into(),
            });
        }
        Ok(())
    }

    fn wait(&self) {
        if self.delay.is_zero() {
            return;
        }
        match &self.serial {
            Some(lock) => {
                let _guard = lock.lock().unwrap();
                thread::sleep(self.delay);
            }
            None => thread::sleep(self.delay),
        }
    }
}

impl Backend for ScriptedMock {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn complete(&self, prompt: &str, policy: &SamplingPolicy) -> Result<Completion, BackendError> {
        policy.validate()?;
        self.inject_failure()?;
        let hash = prompt_hash(prompt);
        let seq = self.scripts.get(&hash).unwrap_or(&self.default);
        if seq.is_empty() {
            return Err(BackendError::Protocol(format!(
                "no script for prompt {hash}"
            )));
        }
        let idx = {
            let mut counters = self.counters.lock().unwrap();
            let c = counters.entry(hash).or_insert(0);
            let idx = *c;
            *c += 1;
            idx
        };
        self.wait();
        let text = truncate_words(&seq[idx % seq.len()], policy.max_new_tokens).to_string();
        Ok(Completion {
            text,
            label_logprobs: None,
        })
    }

    /// Scripted logits when present; otherwise derived from the first scripted
    /// response at the configured confidence (0.5/0.5 for non-label text).
    fn label_logits(&self, prompt: &str) -> Result<LabelLogits, BackendError> {
        if !self.descriptor.supports_logprobs {
            return Err(capability_error(&self.descriptor));
        }
        self.inject_failure()?;
        let hash = prompt_hash(prompt);
        self.wait();
        if let Some(l) = self.logits.get(&hash) {
            return Ok(*l);
        }
        let seq = self.scripts.get(&hash).unwrap_or(&self.default);
        let p_err = match seq.first().map(|s| s.trim()) {
            Some("ERR") => self.label_confidence,
            Some("NOT") => 1.0 - self.label_confidence,
            _ => 0.5,
        };
        LabelLogits::from_err_probability(p_err)
    }
}

/// Extract the final `Source:`/`Translation:` block of a rendered prompt.
pub fn query_from_prompt(prompt: &str) -> Option<(&str, &str)> {
    let start = prompt.rfind("Source: ")?;
    let rest = &prompt[start + "Source: ".len()..];
    let (source, rest) = rest.split_once("\nTranslation: ")?;
    let target = rest.strip_suffix("\nLabel:").unwrap_or(rest);
    Some((source, target))
}

/// Where a [`ParametricMock`] reads each query's feature value.
#[derive(Clone, Debug)]
pub enum FeatureSource {
    /// Uniform in `[-1, 1)` from the SHA-256 of `source \t target`.
    Hash,
    /// Values planted per `(source, target)`; unplanted queries fall back to the hash.
    Planted(HashMap<(String, String), f64>),
}

/// The hash feature: first eight digest bytes mapped to `[-1, 1)`.
pub fn hash_feature(source: &str, target: &str) -> f64 {
    let digest = Sha256::digest(format!("{source}\t{target}").as_bytes());
    let x = u64::from_be_bytes(digest[..8].try_into().unwrap());
    let u = (x >> 11) as f64 / (1u64 << 53) as f64;
    2.0 * u - 1.0
}

/// Scores queries with `p_err = sigmoid(slope * z + intercept)` where `z` is a
/// feature of the query pair.
///
/// `label_mass` is the probability left on the two label tokens; the remainder
/// goes to a non-label token `"UNSURE"`, which exercises renormalization and
/// re-asking.
#[derive(Clone, Debug)]
pub struct ParametricMock {
    descriptor: BackendDescriptor,
    pub slope: f64,
    pub intercept: f64,
    pub label_mass: f64,
    pub feature: FeatureSource,
    pub delay: Duration,
}

pub const UNSURE_TOKEN: &str = "UNSURE";

impl ParametricMock {
    pub fn new(slope: f64, intercept: f64) -> ParametricMock {
        ParametricMock {
            descriptor: BackendDescriptor {
                kind: BackendKind::ParametricMock,
                model_id: "parametric-mock".into(),
                endpoint: format!("mock://parametric?slope={slope}&intercept={intercept}"),
                auth_env: None,
                supports_logprobs: true,
                reports_memory: false,
                max_in_flight: None,
            },
            slope,
            intercept,
            label_mass: 1.0,
            feature: FeatureSource::Hash,
            delay: Duration::ZERO,
        }
    }

    /// Every query gets the same ERR probability.
    pub fn constant(p_err: f64) -> ParametricMock {
        ParametricMock::new(0.0, (p_err / (1.0 - p_err)).ln())
    }

    pub fn with_planted(mut self, planted: HashMap<(String, String), f64>) -> Self {
        self.feature = FeatureSource::Planted(planted);
        self
    }

    pub fn with_label_mass(mut self, mass: f64) -> Self {
        assert!(mass > 0.0 && mass <= 1.0);
        self.label_mass = mass;
        self
    }

    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }

    pub fn with_model_id(mut self, id: &str) -> Self {
        self.descriptor.model_id = id.to_string();
        self
    }

    pub fn feature_of(&self, source: &str, target: &str) -> f64 {
        match &self.feature {
            FeatureSource::Planted(map) => map
                .get(&(source.to_string(), target.to_string()))
                .copied()
                .unwrap_or_else(|| hash_feature(source, target)),
            FeatureSource::Hash => hash_feature(source, target),
        }
    }

    /// Raw (unrenormalized) log-probabilities of ERR and NOT for a prompt.
    fn raw_label_logprobs(&self, prompt: &str) -> Result<(f64, f64), BackendError> {
        let (source, target) = query_from_prompt(prompt)
            .ok_or_else(|| BackendError::Protocol("prompt has no query block".into()))?;
        let x = self.slope * self.feature_of(source, target) + self.intercept;
        // ln sigmoid(x) = -ln(1 + e^-x), computed stably
        let ln_sig = |v: f64| {
            -(if v > 0.0 {
                (-v).exp().ln_1p()
            } else {
                -v + v.exp().ln_1p()
            })
        };
        let mass = self.label_mass.ln();
        Ok((mass + ln_sig(x), mass + ln_sig(-x)))
    }

    fn candidates(&self, prompt: &str) -> Result<Vec<(&'static str, f64)>, BackendError> {
        let (le, ln) = self.raw_label_logprobs(prompt)?;
        let mut c = vec![("ERR", le.exp()), ("NOT", ln.exp())];
        if self.label_mass < 1.0 {
            c.push((UNSURE_TOKEN, 1.0 - self.label_mass));
        }
        Ok(c)
    }
}

/// Temperature-scaled nucleus sampling over a small candidate list.
fn sample_candidate<'a>(
    candidates: &[(&'a str, f64)],
    temperature: f64,
    top_p: f64,
    rng: &mut impl Rng,
) -> &'a str {
    let mut scaled: Vec<(&str, f64)> = candidates
        .iter()
        .map(|(t, p)| (*t, p.powf(1.0 / temperature)))
        .collect();
    let z: f64 = scaled.iter().map(|(_, p)| p).sum();
    scaled.iter_mut().for_each(|(_, p)| *p /= z);
    scaled.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut kept = Vec::new();
    let mut cum = 0.0;
    for (t, p) in scaled {
        kept.push((t, p));
        cum += p;
        if cum >= top_p {
            break;
        }
    }
    let total: f64 = kept.iter().map(|(_, p)| p).sum();
    let mut u = rng.random::<f64>() * total;
    for (t, p) in &kept {
        if u < *p {
            return t;
        }
        u -= p;
    }
    kept.last().unwrap().0
}

impl Backend for ParametricMock {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn complete(&self, prompt: &str, policy: &SamplingPolicy) -> Result<Completion, BackendError> {
        policy.validate()?;
        if !self.delay.is_zero() {
            thread::sleep(self.delay);
        }
        let candidates = self.candidates(prompt)?;
        let text = match policy.mode {
            DecodeMode::Greedy => {
                let (le, ln) = self.raw_label_logprobs(prompt)?;
                let best_label = if le > ln { "ERR" } else { "NOT" };
                let best_p = le.max(ln).exp();
                if self.label_mass < 1.0 && 1.0 - self.label_mass > best_p {
                    UNSURE_TOKEN
                } else {
                    best_label
                }
            }
            DecodeMode::Sampled { temperature, top_p } => {
                let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
                let h = Sha256::digest(prompt.as_bytes());
                rng.set_stream(u64::from_be_bytes(h[..8].try_into().unwrap()));
                sample_candidate(&candidates, temperature, top_p, &mut rng)
            }
        };
        let (le, ln) = self.raw_label_logprobs(prompt)?;
        Ok(Completion {
            text: text.to_string(),
            label_logprobs: Some(LabelLogits::renormalize(le, ln)?),
        })
    }

    fn label_logits(&self, prompt: &str) -> Result<LabelLogits, BackendError> {
        if !self.delay.is_zero() {
            thread::sleep(self.delay);
        }
        let (le, ln) = self.raw_label_logprobs(prompt)?;
        LabelLogits::renormalize(le, ln)
    }
}

/// How the HTTP backend scores the two labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelScoring {
    /// Read both labels from the first-token top candidates.
    FirstToken,
    /// Score each full label string by echoing it after the prompt and summing
    /// its token log-probabilities.
    JointSequence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    pub base_url: String,
    pub model: String,
    pub auth_env: Option<String>,
    pub timeout_ms: u64,
    pub attempts: u32,
    pub backoff_ms: u64,
    pub label_scoring: LabelScoring,
    pub top_logprobs: u32,
    pub supports_logprobs: bool,
    pub tokenize: bool,
    pub memory_stats: bool,
    pub max_in_flight: Option<usize>,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            base_url: "http://127.0.0.1:8000".into(),
            model: "default".into(),
            auth_env: Some(DEFAULT_AUTH_ENV.into()),
            timeout_ms: 30_000,
            attempts: 3,
            backoff_ms: 200,
            label_scoring: LabelScoring::FirstToken,
            top_logprobs: 20,
            supports_logprobs: true,
            tokenize: false,
            memory_stats: false,
            max_in_flight: None,
        }
    }
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: u32,
    temperature: f64,
    top_p: f64,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    logprobs: Option<u32>,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    echo: bool,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    text: String,
    #[serde(default)]
    logprobs: Option<ChoiceLogprobs>,
}

#[derive(Deserialize, Default)]
struct ChoiceLogprobs {
    #[serde(default)]
    token_logprobs: Vec<Option<f64>>,
    #[serde(default)]
    top_logprobs: Vec<Option<HashMap<String, f64>>>,
    #[serde(default)]
    text_offset: Vec<usize>,
}

#[derive(Deserialize)]
struct TokenizeResponse {
    count: usize,
}

#[derive(Deserialize)]
struct MemoryResponse {
    peak_bytes: u64,
}

/// Client for a generic completion server. See `docs/protocol.md`.
pub struct HttpBackend {
    descriptor: BackendDescriptor,
    config: HttpConfig,
    agent: ureq::Agent,
    token: Option<String>,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> HttpBackend {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        let token = config
            .auth_env
            .as_deref()
            .and_then(|var| std::env::var(var).ok())
            .filter(|t| !t.is_empty());
        HttpBackend {
            descriptor: BackendDescriptor {
                kind: BackendKind::HttpCompletion,
                model_id: config.model.clone(),
                endpoint: config.base_url.clone(),
                auth_env: config.auth_env.clone(),
                supports_logprobs: config.supports_logprobs,
                reports_memory: config.memory_stats,
                max_in_flight: config.max_in_flight,
            },
            config,
            agent,
            token,
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.config.base_url.trim_end_matches('/'), path)
    }

    /// One HTTP exchange with retry on transport failures and 5xx replies.
    fn exchange<T: serde::de::DeserializeOwned>(
        &self,
        path: &str,
        body: Option<&dyn erased::JsonBody>,
    ) -> Result<T, BackendError> {
        let url = self.url(path);
        let attempts = self.config.attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=attempts {
            if attempt > 1 {
                let backoff = self.config.backoff_ms.saturating_mul(1 << (attempt - 2));
                thread::sleep(Duration::from_millis(backoff));
            }
            let result = match body {
                Some(b) => {
                    let mut req = self.agent.post(&url);
                    if let Some(t) = &self.token {
                        req = req.header("Authorization", &format!("Bearer {t}"));
                    }
                    req.header("Content-Type", "application/json")
                        .send(b.to_json())
                }
                None => {
                    let mut req = self.agent.get(&url);
                    if let Some(t) = &self.token {
                        req = req.header("Authorization", &format!("Bearer {t}"));
                    }
                    req.call()
                }
            };
            match result {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    if status >= 500 {
                        last = format!("{url}: HTTP {status}");
                        continue;
                    }
                    if status >= 400 {
                        let detail = resp.body_mut().read_to_string().unwrap_or_default();
                        return Err(BackendError::Protocol(format!(
                            "{url}: HTTP {status} {detail}"
                        )));
                    }
                    return resp.body_mut().read_json::<T>().map_err(|e| {
                        BackendError::Protocol(format!("{url}: malformed reply: {e}"))
                    });
                }
                Err(e) => last = format!("{url}: {e}"),
            }
        }
        Err(BackendError::Transport {
            attempts,
            message: last,
        })
    }

    fn post_completion(&self, req: &CompletionRequest<'_>) -> Result<Choice, BackendError> {
        let resp: CompletionResponse = self.exchange("/v1/completions", Some(req))?;
        resp.choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Protocol("reply has no choices".into()))
    }

    fn first_token_logits(&self, prompt: &str) -> Result<LabelLogits, BackendError> {
        let choice = self.post_completion(&CompletionRequest {
            model: &self.config.model,
            prompt,
            max_tokens: 1,
            temperature: 0.0,
            top_p: 1.0,
            seed: 0,
            logprobs: Some(self.config.top_logprobs),
            echo: false,
        })?;
        let top = choice
            .logprobs
            .and_then(|lp| lp.top_logprobs.into_iter().next().flatten())
            .ok_or_else(|| BackendError::Protocol("reply lacks top_logprobs".into()))?;
        let lookup = |label: Label| {
            let variants: Vec<f64> = top
                .iter()
                .filter(|(tok, _)| tok.trim() == label.as_str())
                .map(|(_, lp)| *lp)
                .collect();
            variants.into_iter().reduce(log_sum_exp).ok_or_else(|| {
                BackendError::Protocol(format!("label token {label} not among top candidates"))
            })
        };
        LabelLogits::renormalize(lookup(Label::Err)?, lookup(Label::Not)?)
    }

    fn joint_sequence_logits(&self, prompt: &str) -> Result<LabelLogits, BackendError> {
        let score = |label: Label| -> Result<f64, BackendError> {
            let full = format!("{prompt} {label}");
            let choice = self.post_completion(&CompletionRequest {
                model: &self.config.model,
                prompt: &full,
                max_tokens: 0,
                temperature: 0.0,
                top_p: 1.0,
                seed: 0,
                logprobs: Some(0),
                echo: true,
            })?;
            let lp = choice.logprobs.unwrap_or_default();
            if lp.text_offset.len() != lp.token_logprobs.len() {
                return Err(BackendError::Protocol("echo logprobs misaligned".into()));
            }
            let mut total = 0.0;
            let mut any = false;
            for (off, l) in lp.text_offset.iter().zip(&lp.token_logprobs) {
                if *off >= prompt.len() {
                    total += l.ok_or_else(|| {
                        BackendError::Protocol("missing label token logprob".into())
                    })?;
                    any = true;
                }
            }
            if !any {
                return Err(BackendError::Protocol(format!(
                    "no scored tokens for label {label}"
                )));
            }
            Ok(total)
        };
        LabelLogits::renormalize(score(Label::Err)?, score(Label::Not)?)
    }
}

mod erased {
    /// Object-safe JSON body so one retry loop serves every request type.
    pub trait JsonBody {
        fn to_json(&self) -> String;
    }

    impl<T: serde::Serialize> JsonBody for T {
        fn to_json(&self) -> String {
            serde_json::to_string(self).expect("request serializes")
        }
    }
}

impl Backend for HttpBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn complete(&self, prompt: &str, policy: &SamplingPolicy) -> Result<Completion, BackendError> {
        policy.validate()?;
        let (temperature, top_p) = match policy.mode {
            DecodeMode::Greedy => (0.0, 1.0),
            DecodeMode::Sampled { temperature, top_p } => (temperature, top_p),
        };
        let choice = self.post_completion(&CompletionRequest {
            model: &self.config.model,
            prompt,
            max_tokens: policy.max_new_tokens,
            temperature,
            top_p,
            seed: policy.seed,
            logprobs: None,
            echo: false,
        })?;
        Ok(Completion {
            text: choice.text,
            label_logprobs: None,
        })
    }

    fn label_logits(&self, prompt: &str) -> Result<LabelLogits, BackendError> {
        if !self.descriptor.supports_logprobs {
            return Err(capability_error(&self.descriptor));
        }
        match self.config.label_scoring {
            LabelScoring::FirstToken => self.first_token_logits(prompt),
            LabelScoring::JointSequence => self.joint_sequence_logits(prompt),
        }
    }

    fn probe_memory(&self) -> MemoryProbe {
        if self.config.memory_stats {
            if let Ok(m) = self.exchange::<MemoryResponse>("/v1/memory", None) {
                return MemoryProbe {
                    bytes: Some(m.peak_bytes),
                    source: MemorySource::BackendReported,
                };
            }
        }
        fallback_memory_probe()
    }

    fn count_tokens(&self, text: &str) -> Option<usize> {
        if !self.config.tokenize {
            return None;
        }
        #[derive(Serialize)]
        struct Req<'a> {
            model: &'a str,
            prompt: &'a str,
        }
        self.exchange::<TokenizeResponse>(
            "/tokenize",
            Some(&Req {
                model: &self.config.model,
                prompt: text,
            }),
        )
        .ok()
        .map(|r| r.count)
    }
}
