// Results and compute tables plus the latency/MCC Pareto frontier.
//
//     cargo run --example report_tables

use std::error::Error;
use std::fmt::Write as _;

use ced_harness::metrics::MetricsReport;
use ced_harness::report::{frontier_csv, pareto_frontier, render_results_table, FrontierPoint};

pub fn run_example() -> Result<String, Box<dyn Error>> {
    let mut out = String::new();
    let row = |model: &str, mcc: f64, f1_err: f64, f1_not: f64| MetricsReport {
        dataset: "synced-dev".into(),
        model: model.into(),
        mode: "zero-shot".into(),
        mcc,
        f1_err,
        f1_not,
        ..Default::default()
    };
    let table = render_results_table(&[
        row("gemma-3-1b", 0.48, 0.71, 0.77),
        row("qwen3-0.6b", 0.20, 0.42, 0.74),
        row("lfm2-350m", 0.05, 0.12, 0.66),
    ])?;
    writeln!(out, "{}", table.markdown)?;

    let points = [
        FrontierPoint::new("gemma-3-1b", 250.0, 0.48),
        FrontierPoint::new("qwen3-0.6b", 905.0, 0.20),
        FrontierPoint::new("lfm2-350m", 365.0, 0.05),
    ];
    let front = pareto_frontier(&points);
    writeln!(out, "frontier:\n{}", frontier_csv(&front))?;
    Ok(out)
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    print!("{}", run_example()?);
    Ok(())
}
