// Confusion-matrix metrics, percentile-bootstrap intervals, an exact McNemar
// test between two systems and a per-category recall breakdown.
//
//     cargo run --example metrics_and_significance

use std::error::Error;
use std::fmt::Write as _;

use ced_harness::corpus::{Label, Split};
use ced_harness::decide::Verdict;
use ced_harness::metrics::{
    bootstrap_ci, error_type_breakdown, evaluate, f1, mcc, mcnemar, mcnemar_exact_p,
    ConfusionMatrix, Outcome, Statistic,
};
use ced_harness::synth::{generate, Spec};

pub fn run_example() -> Result<String, Box<dyn Error>> {
    let mut out = String::new();
    let cm = ConfusionMatrix::new(3, 1, 1, 5);
    writeln!(
        out,
        "tp3 fp1 fn1 tn5: MCC {:.4}, F1-ERR {:.4}, F1-NOT {:.4}",
        mcc(&cm),
        f1(&cm, Label::Err),
        f1(&cm, Label::Not)
    )?;
    writeln!(out, "McNemar b=8 c=2: p = {:.4}", mcnemar_exact_p(8, 2))?;

    // two simulated systems on the same dev set: A misses every NUM error, B flags some clean pairs
    let dev = generate(&Spec::new("dev", Split::Dev, 300, 200).seed(5));
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (i, p) in dev.pairs.iter().enumerate() {
        let gold = p.gold.unwrap();
        let say = |l: Label| {
            if l == Label::Err {
                Verdict::Err
            } else {
                Verdict::Not
            }
        };
        let pa = if p.category == Some(ced_harness::corpus::ErrorCategory::Num) {
            Verdict::Not
        } else {
            say(gold)
        };
        let pb = if gold == Label::Not && i % 7 == 0 {
            Verdict::Err
        } else {
            say(gold)
        };
        let o = |predicted| Outcome {
            id: p.id.clone(),
            gold,
            predicted,
            category: p.category,
        };
        a.push(o(pa));
        b.push(o(pb));
    }
    for (name, outcomes) in [("A", &a), ("B", &b)] {
        let r = evaluate(outcomes, 2000, 7)?;
        writeln!(
            out,
            "{name}: MCC {:.3} [{:.3}, {:.3}], F1-ERR {:.3}",
            r.mcc, r.ci_mcc.0, r.ci_mcc.1, r.f1_err
        )?;
    }
    let t = mcnemar(&a, &b)?;
    writeln!(out, "A vs B: b={} c={} p={:.4}", t.b, t.c, t.p_value)?;
    let ci = bootstrap_ci(&a, Statistic::Accuracy, 2000, 7)?;
    writeln!(
        out,
        "A accuracy {:.3} [{:.3}, {:.3}]",
        ci.point, ci.lo, ci.hi
    )?;
    for row in error_type_breakdown(&a).rows {
        writeln!(
            out,
            "  {:?}: {}/{} recall {:.2}",
            row.category, row.detected, row.gold_err, row.recall
        )?;
    }
    Ok(out)
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    print!("{}", run_example()?);
    Ok(())
}
