// Fit a single ERR offset on held-out label log-odds so the predicted ERR
// rate matches the held-out prior, then decide greedily with it.
//
//     cargo run --example bias_calibration

use std::error::Error;
use std::fmt::Write as _;

use ced_harness::backend::ParametricMock;
use ced_harness::corpus::Split;
use ced_harness::decide::{biased_decision, estimate_bias, Mode, Verdict};
use ced_harness::pipeline::Pipeline;
use ced_harness::prompting::PromptBuilder;
use ced_harness::synth::{generate, Spec};

pub fn run_example() -> Result<String, Box<dyn Error>> {
    let mut out = String::new();
    // feature uniform in [-1, 1): sigmoid(2z - 1.8) > 0.5 only for z > 0.9, a 5% raw ERR rate
    let backend = ParametricMock::new(2.0, -1.8);
    let heldout = generate(&Spec::new("heldout", Split::Train, 500, 500).seed(21));
    let model = estimate_bias(&heldout, &PromptBuilder::default(), &backend)?;
    writeln!(
        out,
        "prior {:.3}: raw ERR rate {:.3} -> {:.3} with beta {:.3} ({} bisection steps)",
        model.fitted_prior,
        model.uncalibrated_err_rate,
        model.calibrated_err_rate,
        model.beta,
        model.iterations
    )?;

    let logits = ced_harness::backend::LabelLogits::from_err_probability(0.3)?;
    writeln!(
        out,
        "p(ERR)=0.3: beta 0 -> {:?}, beta {:.2} -> {:?}",
        biased_decision(logits, 0.0),
        model.beta,
        biased_decision(logits, model.beta)
    )?;

    let dev = generate(&Spec::new("dev", Split::Dev, 300, 300).seed(22));
    let raw = Pipeline::new(&backend, Mode::ZeroShot).run_all(&dev.pairs, 4)?;
    let calibrated = Pipeline::new(&backend, Mode::ZeroShot)
        .with_calibration(model)
        .run_all(&dev.pairs, 4)?;
    let rate = |ds: &[ced_harness::decide::Decision]| {
        ds.iter().filter(|d| d.label == Verdict::Err).count() as f64 / ds.len() as f64
    };
    writeln!(
        out,
        "dev ERR rate: raw {:.3}, calibrated {:.3}",
        rate(&raw),
        rate(&calibrated)
    )?;
    Ok(out)
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    print!("{}", run_example()?);
    Ok(())
}
