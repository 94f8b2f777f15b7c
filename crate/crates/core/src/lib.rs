//! Evaluation harness for critical error detection (CED) on English→German
//! translations with compact language models.
//!
//! A pair is classified `ERR` (meaning-altering error) or `NOT`. The crate covers
//! dataset ingestion ([`corpus`]), prompt construction ([`prompting`]), inference
//! backends ([`backend`]), decision rules with voting and logit-bias calibration
//! ([`decide`]), metrics with bootstrap intervals and McNemar tests ([`metrics`]),
//! compute profiling ([`profile`]), tables and manifests ([`report`]) and the
//! config-driven commands behind the `ced` binary ([`cli`]).

pub mod backend;
pub mod cli;
pub mod corpus;
pub mod decide;
pub mod metrics;
pub mod pipeline;
pub mod profile;
pub mod prompting;
pub mod report;
pub mod stub;
pub mod synth;
