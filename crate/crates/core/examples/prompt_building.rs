// Zero-shot and balanced few-shot prompts under the 1024-token budget.
//
//     cargo run --example prompt_building

use std::error::Error;
use std::fmt::Write as _;

use ced_harness::corpus::{Label, Pair, Split};
use ced_harness::prompting::{ExemplarPool, FewShotPolicy, PromptBuilder};
use ced_harness::synth::{generate, Spec};

pub fn run_example() -> Result<String, Box<dyn Error>> {
    let mut out = String::new();
    let builder = PromptBuilder::default();
    let query = Pair::new(
        "q1",
        "The museum is closed on Mondays.",
        "Das Museum ist montags geöffnet.",
        None,
    );

    let zs = builder.build_zero_shot(&query)?;
    writeln!(
        out,
        "zero-shot prompt ({} tokens):\n{}\n",
        zs.token_count(),
        zs.text()
    )?;

    let train = generate(&Spec::new("train", Split::Train, 100, 100).seed(3));
    let pool = ExemplarPool::draw(&train, 3);
    let policy = FewShotPolicy::default();
    let set = pool.select(&query, &policy)?;
    let fs = builder.build_few_shot(&query, &set)?;
    let labels = fs.exemplar_labels();
    writeln!(
        out,
        "few-shot: {} exemplars ({} ERR, {} NOT), {} tokens, budget {}",
        labels.len(),
        labels.iter().filter(|l| **l == Label::Err).count(),
        labels.iter().filter(|l| **l == Label::Not).count(),
        fs.token_count(),
        builder.limit
    )?;

    // a long query forces exemplar pairs out until the prompt fits
    let long = Pair::new("q2", &"very long source sentence ".repeat(45), "kurz", None);
    let trimmed = builder.build_few_shot(&long, &pool.select(&long, &policy)?)?;
    writeln!(
        out,
        "long query keeps {} exemplars at {} tokens",
        trimmed.exemplar_ids().len(),
        trimmed.token_count()
    )?;
    Ok(out)
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    print!("{}", run_example()?);
    Ok(())
}
