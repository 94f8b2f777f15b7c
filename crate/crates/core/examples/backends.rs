// The three backends: a scripted mock, a parametric mock with label
// log-probabilities, and the HTTP completion client talking to the bundled stub
// server.
//
//     cargo run --example backends

use std::error::Error;
use std::fmt::Write as _;
use std::sync::Arc;

use ced_harness::backend::{
    Backend, HttpBackend, HttpConfig, LabelScoring, ParametricMock, SamplingPolicy, ScriptedMock,
};
use ced_harness::corpus::Pair;
use ced_harness::prompting::PromptBuilder;
use ced_harness::stub::{StubOptions, StubServer};

pub fn run_example() -> Result<String, Box<dyn Error>> {
    let mut out = String::new();
    let pair = Pair::new(
        "p",
        "Take two tablets daily.",
        "Nehmen Sie zwanzig Tabletten täglich.",
        None,
    );
    let prompt = PromptBuilder::default().build_zero_shot(&pair)?;

    let scripted = ScriptedMock::new(["ERR", "NOT"]);
    let a = scripted
        .complete(prompt.text(), &SamplingPolicy::greedy())?
        .text;
    let b = scripted
        .complete(prompt.text(), &SamplingPolicy::greedy())?
        .text;
    writeln!(out, "scripted: {a} then {b}")?;

    let parametric = ParametricMock::new(2.0, 0.5);
    let l = parametric.label_logits(prompt.text())?;
    writeln!(
        out,
        "parametric: log p(ERR) {:.3}, log p(NOT) {:.3}",
        l.err, l.not
    )?;

    // serve the parametric mock over HTTP and query it with the real client
    let server = StubServer::spawn(Arc::new(parametric), StubOptions::default())?;
    for scoring in [LabelScoring::FirstToken, LabelScoring::JointSequence] {
        let client = HttpBackend::new(HttpConfig {
            base_url: server.url(),
            model: "stub".into(),
            label_scoring: scoring,
            ..Default::default()
        });
        let h = client.label_logits(prompt.text())?;
        writeln!(out, "http {scoring:?}: log p(ERR) {:.3}", h.err)?;
    }
    let client = HttpBackend::new(HttpConfig {
        base_url: server.url(),
        ..Default::default()
    });
    let text = client
        .complete(prompt.text(), &SamplingPolicy::sampled(7))?
        .text;
    writeln!(out, "http sampled completion: {text}")?;
    Ok(out)
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    print!("{}", run_example()?);
    Ok(())
}
