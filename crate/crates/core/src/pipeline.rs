//! Prompt build, backend call(s) and parse for one pair, plus an ordered
//! concurrent runner over many pairs.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use thiserror::Error;

use crate::backend::{Backend, BackendError};
use crate::corpus::Pair;
use crate::decide::{
    decide_greedy, vote, CalibrationModel, Decision, DecodeConfig, Mode, DEFAULT_VOTES,
};
use crate::prompting::{ExemplarPool, FewShotPolicy, Prompt, PromptBuilder, PromptError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("few-shot mode needs an exemplar pool")]
    MissingPool,
}

#[derive(Clone)]
pub struct Pipeline<'a> {
    pub builder: PromptBuilder,
    pub backend: &'a dyn Backend,
    pub mode: Mode,
    /// Exemplars for few-shot and vote modes. Vote mode without a pool votes on
    /// zero-shot prompts.
    pub pool: Option<ExemplarPool>,
    pub few_shot: FewShotPolicy,
    pub votes: usize,
    pub decode: DecodeConfig,
    pub calibration: Option<CalibrationModel>,
}

impl<'a> Pipeline<'a> {
    pub fn new(backend: &'a dyn Backend, mode: Mode) -> Pipeline<'a> {
        Pipeline {
            builder: PromptBuilder::default(),
            backend,
            mode,
            pool: None,
            few_shot: FewShotPolicy::default(),
            votes: DEFAULT_VOTES,
            decode: DecodeConfig::default(),
            calibration: None,
        }
    }

    pub fn with_pool(mut self, pool: ExemplarPool) -> Self {
        self.pool = Some(pool);
        self
    }

    pub fn with_calibration(mut self, model: CalibrationModel) -> Self {
        self.calibration = Some(model);
        self
    }

    pub fn prompt(&self, pair: &Pair) -> Result<Prompt, PipelineError> {
        match (self.mode, &self.pool) {
            (Mode::FewShot, None) => Err(PipelineError::MissingPool),
            (Mode::FewShot | Mode::Vote, Some(pool)) => {
                let set = pool.select(pair, &self.few_shot)?;
                Ok(self.builder.build_few_shot(pair, &set)?)
            }
            _ => Ok(self.builder.build_zero_shot(pair)?),
        }
    }

    pub fn run(&self, pair: &Pair) -> Result<Decision, PipelineError> {
        let prompt = self.prompt(pair)?;
        let calib = self.calibration.as_ref();
        let decision = match self.mode {
            Mode::Vote => vote(
                pair,
                prompt.text(),
                self.backend,
                self.votes,
                &self.decode,
                calib,
            )?,
            mode => decide_greedy(pair, prompt.text(), self.backend, calib, &self.decode, mode)?,
        };
        Ok(decision)
    }

    /// Runs every pair with at most `concurrency` in flight; results keep input
    /// order. Backend failures become Invalid decisions carrying the error; prompt
    /// errors abort the run.
    pub fn run_all(
        &self,
        pairs: &[Pair],
        concurrency: usize,
    ) -> Result<Vec<Decision>, PipelineError> {
        let slots: Vec<Mutex<Option<Result<Decision, PipelineError>>>> =
            pairs.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = concurrency.clamp(1, pairs.len().max(1));
        thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= pairs.len() {
                        break;
                    }
                    let r = match self.run(&pairs[i]) {
                        Err(PipelineError::Backend(e)) => {
                            Ok(Decision::failed(&pairs[i].id, self.mode, &e))
                        }
                        other => other,
                    };
                    *slots[i].lock().unwrap() = Some(r);
                });
            }
        });
        slots
            .into_iter()
            .map(|m| m.into_inner().unwrap().expect("every slot filled"))
            .collect()
    }
}
