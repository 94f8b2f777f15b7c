// Export zero-shot prompt/label records and the fine-tuning manifest for
// supervised fine-tuning.
//
//     cargo run --example sft_export

use std::error::Error;
use std::fmt::Write as _;

use ced_harness::corpus::Split;
use ced_harness::prompting::{
    export_sft, ExemplarOrder, FewShotPolicy, PromptTemplate, TrainingManifest,
};
use ced_harness::synth::{generate, Spec};

pub fn run_example() -> Result<String, Box<dyn Error>> {
    let mut out = String::new();
    let train = generate(&Spec::new("synced-train", Split::Train, 50, 50).seed(9));
    let policy = FewShotPolicy {
        seed: 13,
        order: ExemplarOrder::ShufflePerEpoch,
        ..Default::default()
    };
    let bundle = export_sft(
        &train,
        &PromptTemplate::default(),
        &policy,
        TrainingManifest::default(),
    )?;
    let dir = tempfile::tempdir()?;
    let (records, manifest) = bundle.write_to(dir.path())?;
    writeln!(
        out,
        "{} records over {} epochs -> {} and {}",
        bundle.records.len(),
        bundle.manifest.epochs,
        records.file_name().unwrap().to_string_lossy(),
        manifest.file_name().unwrap().to_string_lossy()
    )?;
    let first = &bundle.records[0];
    writeln!(
        out,
        "first record completion {:?}, prompt tail: {:?}",
        first.completion,
        first.prompt.lines().rev().take(3).collect::<Vec<_>>()
    )?;
    writeln!(
        out,
        "lr {} {} warmup {}, batch {} = {} x {}",
        bundle.manifest.learning_rate,
        bundle.manifest.lr_scheduler,
        bundle.manifest.warmup_ratio,
        bundle.manifest.global_batch_size,
        bundle.manifest.micro_batch_size,
        bundle.manifest.gradient_accumulation_steps
    )?;
    Ok(out)
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    print!("{}", run_example()?);
    Ok(())
}
