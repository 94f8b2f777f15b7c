//! Latency, throughput and peak-memory measurement.
//!
//! Latency spans prompt build through parse for one pair at a time. Throughput
//! issues waves of 16 concurrent requests, the wire-level stand-in for batch 16.
//! All timing uses the monotonic clock.

use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    Backend, BackendDescriptor, BackendError, Completion, LabelLogits, MemoryProbe, SamplingPolicy,
};
use crate::corpus::Pair;
use crate::pipeline::{Pipeline, PipelineError};

pub const DEFAULT_REPEATS: usize = 3;
pub const DEFAULT_WARMUP: usize = 2;
pub const DEFAULT_BATCH: usize = 16;
pub const MIN_WAVES: usize = 3;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("measurement aborted: {0}")]
    Aborted(#[from] PipelineError),
    #[error("throughput needs at least {needed} pairs, got {got}")]
    TooFewPairs { needed: usize, got: usize },
    #[error("repeats must be at least 1")]
    NoRepeats,
}

impl From<BackendError> for ProfileError {
    fn from(e: BackendError) -> Self {
        ProfileError::Aborted(PipelineError::Backend(e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Warmup,
    Measured,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub phase: Phase,
    pub index: usize,
    pub total_ms: f64,
    pub first_attempt_ms: f64,
    pub backend_calls: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    /// Measured repeats only, end to end including re-asks.
    pub repeats_ms: Vec<f64>,
    pub mean_ms: f64,
    pub cv: f64,
    /// Prompt build plus the first backend call, per measured repeat.
    pub first_attempt_ms: Vec<f64>,
    pub first_attempt_mean_ms: f64,
    pub warmup_runs: usize,
    /// Every run in execution order, warmups included.
    pub log: Vec<Sample>,
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Sample standard deviation over mean; 0 for fewer than two values or zero mean.
pub fn coefficient_of_variation(xs: &[f64]) -> f64 {
    let m = mean(xs);
    if xs.len() < 2 || m == 0.0 {
        return 0.0;
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    var.sqrt() / m
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}

/// Records when the first backend call after `arm` returns.
struct FirstCallTimer<'a> {
    inner: &'a dyn Backend,
    start: Mutex<Option<Instant>>,
    first: Mutex<Option<Duration>>,
}

impl<'a> FirstCallTimer<'a> {
    fn new(inner: &'a dyn Backend) -> Self {
        FirstCallTimer {
            inner,
            start: Mutex::new(None),
            first: Mutex::new(None),
        }
    }

    fn arm(&self, start: Instant) {
        *self.start.lock().unwrap() = Some(start);
        *self.first.lock().unwrap() = None;
    }

    fn mark(&self) {
        let mut first = self.first.lock().unwrap();
        if first.is_none() {
            if let Some(s) = *self.start.lock().unwrap() {
                *first = Some(s.elapsed());
            }
        }
    }

    fn first(&self) -> Option<Duration> {
        *self.first.lock().unwrap()
    }
}

impl Backend for FirstCallTimer<'_> {
    fn descriptor(&self) -> &BackendDescriptor {
        self.inner.descriptor()
    }

    fn complete(&self, prompt: &str, policy: &SamplingPolicy) -> Result<Completion, BackendError> {
        let r = self.inner.complete(prompt, policy);
        self.mark();
        r
    }

    fn label_logits(&self, prompt: &str) -> Result<LabelLogits, BackendError> {
        let r = self.inner.label_logits(prompt);
        self.mark();
        r
    }

    fn probe_memory(&self) -> MemoryProbe {
        self.inner.probe_memory()
    }

    fn count_tokens(&self, text: &str) -> Option<usize> {
        self.inner.count_tokens(text)
    }
}

/// Single-pair latency. Must not share the backend with other traffic.
pub fn measure_latency(
    pipeline: &Pipeline<'_>,
    pair: &Pair,
    repeats: usize,
    warmup: usize,
) -> Result<LatencyStats, ProfileError> {
    if repeats == 0 {
        return Err(ProfileError::NoRepeats);
    }
    let timer = FirstCallTimer::new(pipeline.backend);
    let timed = Pipeline {
        backend: &timer,
        ..pipeline.clone()
    };
    let mut log = Vec::with_capacity(warmup + repeats);
    for i in 0..warmup + repeats {
        let start = Instant::now();
        timer.arm(start);
        let decision = timed.run(pair)?;
        let total = start.elapsed();
        let (phase, index) = if i < warmup {
            (Phase::Warmup, i)
        } else {
            (Phase::Measured, i - warmup)
        };
        log.push(Sample {
            phase,
            index,
            total_ms: ms(total),
            first_attempt_ms: ms(timer.first().unwrap_or(total)),
            backend_calls: decision.retries_used,
        });
    }
    let measured: Vec<&Sample> = log.iter().filter(|s| s.phase == Phase::Measured).collect();
    let repeats_ms: Vec<f64> = measured.iter().map(|s| s.total_ms).collect();
    let first_attempt_ms: Vec<f64> = measured.iter().map(|s| s.first_attempt_ms).collect();
    Ok(LatencyStats {
        mean_ms: mean(&repeats_ms),
        cv: coefficient_of_variation(&repeats_ms),
        first_attempt_mean_ms: mean(&first_attempt_ms),
        repeats_ms,
        first_attempt_ms,
        warmup_runs: warmup,
        log,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThroughputStats {
    pub batch: usize,
    pub waves: usize,
    pub pairs_per_repeat: usize,
    pub repeats_sps: Vec<f64>,
    pub mean_sps: f64,
    /// The backend announced it serves one request at a time.
    pub serialized_backend: bool,
    /// Memory probe taken right after the last wave.
    pub memory: MemoryProbe,
}

/// Pairs per second with `batch` requests in flight per wave, at least three
/// waves per repeat (pairs are cycled when the set is small).
pub fn measure_throughput(
    pipeline: &Pipeline<'_>,
    pairs: &[Pair],
    batch: usize,
    repeats: usize,
) -> Result<ThroughputStats, ProfileError> {
    let batch = batch.max(1);
    if pairs.len() < batch {
        return Err(ProfileError::TooFewPairs {
            needed: batch,
            got: pairs.len(),
        });
    }
    if repeats == 0 {
        return Err(ProfileError::NoRepeats);
    }
    let waves = pairs.len().div_ceil(batch).max(MIN_WAVES);
    let total = waves * batch;
    let mut repeats_sps = Vec::with_capacity(repeats);
    let mut memory = MemoryProbe::unsupported();
    for _ in 0..repeats {
        let start = Instant::now();
        for w in 0..waves {
            let wave: Vec<&Pair> = (0..batch)
                .map(|j| &pairs[(w * batch + j) % pairs.len()])
                .collect();
            let results: Vec<Result<_, PipelineError>> = thread::scope(|s| {
                let handles: Vec<_> = wave
                    .iter()
                    .map(|p| s.spawn(move || pipeline.run(p)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("worker panicked"))
                    .collect()
            });
            for r in results {
                r?;
            }
        }
        let elapsed = start.elapsed().as_secs_f64();
        memory = pipeline.backend.probe_memory();
        repeats_sps.push(total as f64 / elapsed);
    }
    Ok(ThroughputStats {
        batch,
        waves,
        pairs_per_repeat: total,
        mean_sps: mean(&repeats_sps),
        repeats_sps,
        serialized_backend: pipeline.backend.descriptor().max_in_flight == Some(1),
        memory,
    })
}

/// Peak memory as the backend (or this process) reports it.
pub fn measure_peak_memory(pipeline: &Pipeline<'_>) -> MemoryProbe {
    pipeline.backend.probe_memory()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub model: String,
    pub mode: String,
    pub hardware: String,
    pub repeats: usize,
    pub warmup_runs: usize,
    pub latency_ms: f64,
    pub latency_repeats_ms: Vec<f64>,
    pub latency_cv: f64,
    pub first_attempt_ms: f64,
    pub throughput_sps: f64,
    pub throughput_repeats_sps: Vec<f64>,
    pub serialized_backend: bool,
    pub peak_memory_bytes: Option<u64>,
    pub memory_source: crate::backend::MemorySource,
    #[serde(default)]
    pub manifest_hash: String,
    pub latency_log: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileConfig {
    pub repeats: usize,
    pub warmup: usize,
    pub batch: usize,
    pub hardware: String,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        ProfileConfig {
            repeats: DEFAULT_REPEATS,
            warmup: DEFAULT_WARMUP,
            batch: DEFAULT_BATCH,
            hardware: String::new(),
        }
    }
}

/// Latency on the first pair, then throughput over all pairs, then memory.
pub fn profile(
    pipeline: &Pipeline<'_>,
    pairs: &[Pair],
    cfg: &ProfileConfig,
) -> Result<ProfileReport, ProfileError> {
    let first = pairs.first().ok_or(ProfileError::TooFewPairs {
        needed: cfg.batch,
        got: 0,
    })?;
    let lat = measure_latency(pipeline, first, cfg.repeats, cfg.warmup)?;
    let thr = measure_throughput(pipeline, pairs, cfg.batch, cfg.repeats)?;
    Ok(ProfileReport {
        model: pipeline.backend.descriptor().model_id.clone(),
        mode: pipeline.mode.as_str().to_string(),
        hardware: cfg.hardware.clone(),
        repeats: cfg.repeats,
        warmup_runs: cfg.warmup,
        latency_ms: lat.mean_ms,
        latency_repeats_ms: lat.repeats_ms,
        latency_cv: lat.cv,
        first_attempt_ms: lat.first_attempt_mean_ms,
        throughput_sps: thr.mean_sps,
        throughput_repeats_sps: thr.repeats_sps,
        serialized_backend: thr.serialized_backend,
        peak_memory_bytes: thr.memory.bytes,
        memory_source: thr.memory.source,
        manifest_hash: String::new(),
        latency_log: lat.log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MemorySource, ScriptedMock};
    use crate::corpus::Label;
    use crate::decide::Mode;

    fn pairs(n: usize) -> Vec<Pair> {
        (0..n)
            .map(|i| {
                Pair::new(
                    format!("p{i}"),
                    &format!("Sentence {i}."),
                    &format!("Satz {i}."),
                    Some(Label::Not),
                )
            })
            .collect()
    }

    #[test]
    fn warmups_excluded_and_mean_exact() {
        let mock = ScriptedMock::constant("NOT");
        let p = Pipeline::new(&mock, Mode::ZeroShot);
        let s = measure_latency(&p, &pairs(1)[0], 3, 2).unwrap();
        assert_eq!(s.repeats_ms.len(), 3);
        assert_eq!(s.log.len(), 5);
        assert_eq!(s.log.iter().filter(|x| x.phase == Phase::Warmup).count(), 2);
        assert_eq!(
            s.mean_ms,
            (s.repeats_ms[0] + s.repeats_ms[1] + s.repeats_ms[2]) / 3.0
        );
        assert!(s.mean_ms >= 0.0 && s.cv >= 0.0);
        let measured: Vec<f64> = s.log[2..].iter().map(|x| x.total_ms).collect();
        assert_eq!(measured, s.repeats_ms);
    }

    #[test]
    fn first_attempt_excludes_reasks() {
        let mock =
            ScriptedMock::new(["maybe", "maybe", "ERR"]).with_delay(Duration::from_millis(10));
        let p = Pipeline::new(&mock, Mode::ZeroShot);
        let s = measure_latency(&p, &pairs(1)[0], 1, 0).unwrap();
        assert_eq!(s.log[0].backend_calls, 3);
        assert!(s.first_attempt_ms[0] >= 10.0);
        assert!(s.repeats_ms[0] >= 30.0);
        assert!(s.first_attempt_mean_ms < s.mean_ms);
    }

    #[test]
    fn failure_aborts_latency() {
        let mock = ScriptedMock::constant("NOT").with_transport_failures(1);
        let p = Pipeline::new(&mock, Mode::ZeroShot);
        assert!(matches!(
            measure_latency(&p, &pairs(1)[0], 3, 2),
            Err(ProfileError::Aborted(_))
        ));
    }

    #[test]
    fn throughput_needs_full_batch() {
        let mock = ScriptedMock::constant("NOT");
        let p = Pipeline::new(&mock, Mode::ZeroShot);
        assert!(matches!(
            measure_throughput(&p, &pairs(15), 16, 1),
            Err(ProfileError::TooFewPairs {
                needed: 16,
                got: 15
            })
        ));
        let t = measure_throughput(&p, &pairs(16), 16, 1).unwrap();
        assert_eq!(t.waves, 3);
        assert_eq!(t.pairs_per_repeat, 48);
    }

    #[test]
    fn concurrency_and_serialization() {
        let d = Duration::from_millis(20);
        let conc = ScriptedMock::constant("NOT").with_delay(d);
        let t =
            measure_throughput(&Pipeline::new(&conc, Mode::ZeroShot), &pairs(32), 16, 1).unwrap();
        assert!(t.mean_sps >= 0.5 * 16.0 / 0.02, "{}", t.mean_sps);
        assert!(!t.serialized_backend);

        let serial = ScriptedMock::constant("NOT").with_delay(d).serialized();
        let t =
            measure_throughput(&Pipeline::new(&serial, Mode::ZeroShot), &pairs(16), 16, 1).unwrap();
        assert!(t.serialized_backend);
        assert!(t.mean_sps <= 1.0 / 0.02 * 1.05, "{}", t.mean_sps);
    }

    #[test]
    fn memory_probe_falls_back_to_rss() {
        let mock = ScriptedMock::constant("NOT");
        let m = measure_peak_memory(&Pipeline::new(&mock, Mode::ZeroShot));
        if cfg!(target_os = "linux") {
            assert_eq!(m.source, MemorySource::ProcessRss);
            assert!(m.bytes.unwrap() > 0);
        }
    }

    #[test]
    fn cv_examples() {
        assert_eq!(coefficient_of_variation(&[5.0]), 0.0);
        assert_eq!(coefficient_of_variation(&[2.0, 2.0, 2.0]), 0.0);
        // mean 2, sample sd 1
        assert!((coefficient_of_variation(&[1.0, 2.0, 3.0]) - 0.5).abs() < 1e-15);
    }
}
