// m=3 majority voting with re-asks for unparseable generations.
//
//     cargo run --example majority_vote

use std::error::Error;
use std::fmt::Write as _;

use ced_harness::backend::{ParametricMock, ScriptedMock};
use ced_harness::corpus::Pair;
use ced_harness::decide::{vote, DecodeConfig};
use ced_harness::prompting::PromptBuilder;

pub fn run_example() -> Result<String, Box<dyn Error>> {
    let mut out = String::new();
    let pair = Pair::new(
        "p",
        "The bridge is not open.",
        "Die Brücke ist offen.",
        None,
    );
    let prompt = PromptBuilder::default().build_zero_shot(&pair)?;
    let cfg = DecodeConfig::default();

    let scripted = ScriptedMock::new(["ERR", "ERR", "NOT"]);
    let d = vote(&pair, prompt.text(), &scripted, 3, &cfg, None)?;
    writeln!(
        out,
        "scripted votes {:?} -> {:?} tally ({}, {})",
        d.votes, d.label, d.tally.n_err, d.tally.n_not
    )?;

    let chatty = ScriptedMock::new(["I think", "ERR"]);
    let d = vote(&pair, prompt.text(), &chatty, 3, &cfg, None)?;
    writeln!(
        out,
        "with re-asks: {:?} after {} backend calls",
        d.label, d.retries_used
    )?;

    // sampled votes at T=0.2, top-p 0.9; 30% of the mass goes to a non-label token
    let sampler = ParametricMock::constant(0.55).with_label_mass(0.7);
    let d = vote(
        &pair,
        prompt.text(),
        &sampler,
        3,
        &DecodeConfig { seed: 42, ..cfg },
        None,
    )?;
    writeln!(
        out,
        "parametric: {:?} votes {:?}, {} calls",
        d.label, d.votes, d.retries_used
    )?;
    Ok(out)
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    print!("{}", run_example()?);
    Ok(())
}
