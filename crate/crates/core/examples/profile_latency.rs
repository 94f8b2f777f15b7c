// Single-pair latency with warm-up, batched throughput and peak memory against
// a mock that sleeps 50 ms per call.
//
//     cargo run --example profile_latency

use std::error::Error;
use std::fmt::Write as _;
use std::time::Duration;

use ced_harness::backend::ScriptedMock;
use ced_harness::corpus::Split;
use ced_harness::decide::Mode;
use ced_harness::pipeline::Pipeline;
use ced_harness::profile::{profile, ProfileConfig};
use ced_harness::synth::{generate, Spec};

pub fn run_example() -> Result<String, Box<dyn Error>> {
    let mut out = String::new();
    let pairs = generate(&Spec::new("dev", Split::Dev, 16, 16).seed(1)).pairs;
    let cfg = ProfileConfig {
        hardware: "local mock".into(),
        ..Default::default()
    };

    let concurrent = ScriptedMock::constant("NOT").with_delay(Duration::from_millis(50));
    let serial = ScriptedMock::constant("NOT")
        .with_delay(Duration::from_millis(50))
        .serialized();
    for (name, backend) in [("concurrent", &concurrent), ("serialized", &serial)] {
        let r = profile(&Pipeline::new(backend, Mode::ZeroShot), &pairs, &cfg)?;
        writeln!(
            out,
            "{name}: latency {:.1} ms (repeats {:?}, cv {:.3}), throughput {:.1} pairs/s, memory {:?} via {:?}",
            r.latency_ms,
            r.latency_repeats_ms.iter().map(|x| x.round()).collect::<Vec<_>>(),
            r.latency_cv,
            r.throughput_sps,
            r.peak_memory_bytes,
            r.memory_source
        )?;
    }
    Ok(out)
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    print!("{}", run_example()?);
    Ok(())
}
