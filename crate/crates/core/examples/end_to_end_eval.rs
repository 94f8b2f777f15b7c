// A config-driven run through the same entry points as the `ced` binary:
// ingest, calibrate, eval in two modes, profile and report, all against the
// parametric mock.
//
//     cargo run --example end_to_end_eval

use std::error::Error;
use std::fmt::Write as _;

use ced_harness::cli::{cmd_calibrate, cmd_eval, cmd_ingest, cmd_profile, cmd_report, RunConfig};
use ced_harness::corpus::{write_dataset, Format, Split};
use ced_harness::decide::Mode;
use ced_harness::synth::{generate, Spec};

pub fn run_example() -> Result<String, Box<dyn Error>> {
    let mut out = String::new();
    let dir = tempfile::tempdir()?;
    let train = dir.path().join("synced-train.tsv");
    let dev = dir.path().join("synced-dev.tsv");
    std::fs::write(
        &train,
        write_dataset(
            &generate(&Spec::new("synced-train", Split::Train, 400, 400).seed(1)),
            Format::Tsv,
        ),
    )?;
    std::fs::write(
        &dev,
        write_dataset(
            &generate(&Spec::new("synced-dev", Split::Dev, 100, 100).seed(2)),
            Format::Tsv,
        ),
    )?;

    let toml = format!(
        r#"
output_dir = "{out}"
concurrency = 4

[train]
path = "{train}"

[dev]
path = "{dev}"

[seeds]
data = 1
exemplar = 2
vote = 3
bootstrap = 4

[bootstrap]
resamples = 1000

[calibration]
heldout_fraction = 0.25

[profile]
repeats = 2
warmup = 1
batch = 8

[backend]
kind = "parametric-mock"
model_id = "toy-1b"
slope = 2.0
intercept = -1.8
"#,
        out = dir.path().join("runs").display(),
        train = train.display(),
        dev = dev.display(),
    );
    let mut cfg = RunConfig::from_toml(&toml)?;

    write!(out, "{}", cmd_ingest(&cfg)?.render())?;
    let cal = cmd_calibrate(&cfg)?;
    writeln!(
        out,
        "calibration written to {}",
        cal.path.file_name().unwrap().to_string_lossy()
    )?;

    for (mode, calibrated) in [(Mode::ZeroShot, false), (Mode::FewShot, true)] {
        cfg.mode = mode;
        cfg.calibration.enabled = calibrated;
        let r = cmd_eval(&cfg)?.report;
        writeln!(
            out,
            "{} (calibrated: {calibrated}): MCC {:.3} [{:.3}, {:.3}] acc {:.3}",
            mode.as_str(),
            r.mcc,
            r.ci_mcc.0,
            r.ci_mcc.1,
            r.accuracy
        )?;
    }
    cfg.mode = Mode::ZeroShot;
    cfg.calibration.enabled = false;
    let p = cmd_profile(&cfg)?;
    writeln!(
        out,
        "latency {:.2} ms, throughput {:.0} pairs/s",
        p.latency_ms, p.throughput_sps
    )?;

    let rep = cmd_report(&cfg)?;
    writeln!(out, "{}", rep.results.markdown)?;
    for f in &rep.files {
        writeln!(out, "wrote {}", f.file_name().unwrap().to_string_lossy())?;
    }
    Ok(out)
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    print!("{}", run_example()?);
    Ok(())
}
