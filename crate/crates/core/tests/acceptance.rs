// Acceptance suite. Runs without the libtest harness so each criterion prints
// exactly one PASS/FAIL line; the process exits nonzero if any fails.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ced_harness::backend::{Backend, ParametricMock, ScriptedMock};
use ced_harness::cli::{cmd_eval, BackendConfig, DatasetConfig, RunConfig, ScriptedConfig};
use ced_harness::corpus::{
    load_dataset, parse_dataset, split_stats, write_dataset, Dataset, Format, Label, LabelScheme,
    Pair, Split,
};
use ced_harness::decide::{
    biased_decision, decide_greedy, estimate_bias, CalibrationModel, DecodeConfig, Mode, Verdict,
};
use ced_harness::metrics::{
    accuracy, bootstrap_ci, evaluate, f1, mcc, mcnemar_exact_p, ConfusionMatrix, Outcome, Statistic,
};
use ced_harness::pipeline::Pipeline;
use ced_harness::profile::{measure_latency, measure_throughput};
use ced_harness::prompting::{ExemplarPool, FewShotPolicy, PromptBuilder};
use ced_harness::report::{pareto_frontier, FrontierPoint};
use ced_harness::synth::{generate, Spec};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---- oracles ----

/// Expands counts into gold/pred indicator vectors (1 = ERR) and evaluates the
/// textbook formulas on them.
struct VectorOracle {
    mcc: f64,
    f1_err: f64,
    f1_not: f64,
    accuracy: f64,
}

fn vector_oracle(tp: u64, fp: u64, fn_: u64, tn: u64) -> VectorOracle {
    let mut gold = Vec::new();
    let mut pred = Vec::new();
    for (g, p, n) in [(1u8, 1u8, tp), (0, 1, fp), (1, 0, fn_), (0, 0, tn)] {
        for _ in 0..n {
            gold.push(g);
            pred.push(p);
        }
    }
    let n = gold.len() as f64;
    let (mut sx, mut sy, mut sxy, mut agree) = (0f64, 0f64, 0f64, 0f64);
    let (mut c11, mut c10, mut c01, mut c00) = (0f64, 0f64, 0f64, 0f64);
    for (&g, &p) in gold.iter().zip(&pred) {
        let (x, y) = (f64::from(p), f64::from(g));
        sx += x;
        sy += y;
        sxy += x * y;
        if g == p {
            agree += 1.0;
        }
        match (p, g) {
            (1, 1) => c11 += 1.0,
            (1, 0) => c10 += 1.0,
            (0, 1) => c01 += 1.0,
            _ => c00 += 1.0,
        }
    }
    // Pearson correlation of the indicator vectors; x and y are 0/1 so sum x^2 = sum x
    let var_x = n * sx - sx * sx;
    let var_y = n * sy - sy * sy;
    let mcc = if var_x == 0.0 || var_y == 0.0 {
        0.0
    } else {
        (n * sxy - sx * sy) / (var_x.sqrt() * var_y.sqrt())
    };
    let harmonic = |tp: f64, fp: f64, fn_: f64| {
        if tp == 0.0 {
            return 0.0;
        }
        let p = tp / (tp + fp);
        let r = tp / (tp + fn_);
        2.0 * p * r / (p + r)
    };
    VectorOracle {
        mcc,
        f1_err: harmonic(c11, c10, c01),
        f1_not: harmonic(c00, c01, c10),
        accuracy: if n == 0.0 { 0.0 } else { agree / n },
    }
}

fn binomial_enumeration_p(b: u64, c: u64) -> f64 {
    let n = b + c;
    if n == 0 {
        return 1.0;
    }
    let k = b.min(c);
    // exact integer binomial coefficients; n <= 30 fits easily
    let mut row = vec![1u128];
    for _ in 0..n {
        let mut next = vec![1u128; row.len() + 1];
        for i in 1..row.len() {
            next[i] = row[i - 1] + row[i];
        }
        row = next;
    }
    let tail: u128 = row[..=k as usize].iter().sum();
    (2.0 * tail as f64 / 2f64.powi(n as i32)).min(1.0)
}

fn brute_frontier(points: &[FrontierPoint]) -> Vec<(u64, u64)> {
    let mut keep: Vec<(u64, u64)> = points
        .iter()
        .filter(|p| {
            !points.iter().any(|q| {
                q.latency_ms <= p.latency_ms
                    && q.mcc >= p.mcc
                    && (q.latency_ms < p.latency_ms || q.mcc > p.mcc)
            })
        })
        .map(|p| (p.latency_ms.to_bits(), p.mcc.to_bits()))
        .collect();
    keep.sort();
    keep.dedup();
    keep
}

fn outcomes_from(gold: &[Label], pred: &[Verdict]) -> Vec<Outcome> {
    gold.iter()
        .zip(pred)
        .enumerate()
        .map(|(i, (&g, &p))| Outcome {
            id: format!("o{i}"),
            gold: g,
            predicted: p,
            category: None,
        })
        .collect()
}

fn verdict(l: Label) -> Verdict {
    match l {
        Label::Err => Verdict::Err,
        Label::Not => Verdict::Not,
    }
}

// ---- criteria ----

fn metric_oracle() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0f64;
    for i in 0..1000 {
        let mut c: [u64; 4] = std::array::from_fn(|_| rng.random_range(0..=10_000));
        // every tenth matrix zeroes a row or column
        if i % 10 == 0 {
            match rng.random_range(0..4) {
                0 => (c[0], c[1]) = (0, 0),
                1 => (c[2], c[3]) = (0, 0),
                2 => (c[0], c[2]) = (0, 0),
                _ => (c[1], c[3]) = (0, 0),
            }
        }
        let cm = ConfusionMatrix::new(c[0], c[1], c[2], c[3]);
        let o = vector_oracle(c[0], c[1], c[2], c[3]);
        for (got, want, what) in [
            (mcc(&cm), o.mcc, "mcc"),
            (f1(&cm, Label::Err), o.f1_err, "f1-err"),
            (f1(&cm, Label::Not), o.f1_not, "f1-not"),
            (accuracy(&cm), o.accuracy, "accuracy"),
        ] {
            let d = (got - want).abs();
            worst = worst.max(d);
            ensure(d <= 1e-12, format!("{what} off by {d:e} on {c:?}"))?;
        }
        let zero_factor =
            c[0] + c[1] == 0 || c[2] + c[3] == 0 || c[0] + c[2] == 0 || c[1] + c[3] == 0;
        if zero_factor {
            ensure(
                mcc(&cm) == 0.0,
                format!("zero-factor {c:?} gave MCC {}", mcc(&cm)),
            )?;
        }
        if c[0] == 0 {
            ensure(
                f1(&cm, Label::Err) == 0.0,
                format!("tp=0 {c:?} gave nonzero F1-ERR"),
            )?;
        }
    }
    for c in [
        (0, 0, 0, 0),
        (0, 0, 5, 7),
        (4, 9, 0, 0),
        (0, 3, 0, 8),
        (6, 0, 2, 0),
    ] {
        let cm = ConfusionMatrix::new(c.0, c.1, c.2, c.3);
        ensure(
            mcc(&cm) == 0.0,
            format!("zero-factor {c:?} gave MCC {}", mcc(&cm)),
        )?;
    }
    let cm = ConfusionMatrix::new(0, 0, 5, 7);
    ensure(
        f1(&cm, Label::Err) == 0.0,
        "no predicted ERR gave nonzero F1-ERR",
    )?;
    let elapsed = start.elapsed();
    ensure(
        elapsed < Duration::from_secs(5),
        format!("took {elapsed:?}"),
    )?;
    Ok(format!(
        "1000 matrices, max deviation {worst:e}, {elapsed:.2?}"
    ))
}

fn mcc_spot_values() -> Check {
    let v = mcc(&ConfusionMatrix::new(3, 1, 1, 5));
    // (3*5 - 1*1) / sqrt(4*4*6*6) = 14/24
    ensure((v - 0.5833).abs() <= 1e-4, format!("(3,1,1,5) gave {v}"))?;
    ensure(
        (v - 14.0 / 24.0).abs() < 1e-15,
        format!("(3,1,1,5) gave {v}, expected 14/24"),
    )?;
    let perfect = mcc(&ConfusionMatrix::new(40, 0, 0, 60));
    ensure(perfect == 1.0, format!("perfect gave {perfect}"))?;
    let constant = mcc(&ConfusionMatrix::new(0, 0, 30, 70));
    ensure(
        constant == 0.0,
        format!("constant predictor gave {constant}"),
    )?;
    Ok(format!("(3,1,1,5) -> {v:.6}, perfect -> 1, constant -> 0"))
}

fn mcnemar_exactness() -> Check {
    let mut worst = 0f64;
    for n in 0..=30u64 {
        for b in 0..=n {
            let c = n - b;
            let got = mcnemar_exact_p(b, c);
            let want = binomial_enumeration_p(b, c);
            let d = (got - want).abs();
            worst = worst.max(d);
            ensure(
                d <= 1e-12,
                format!("(b={b}, c={c}) gave {got}, enumeration {want}"),
            )?;
        }
    }
    let p = mcnemar_exact_p(8, 2);
    ensure((p - 0.1094).abs() <= 1e-4, format!("(8,2) gave {p}"))?;
    // 2 * (1 + 10 + 45) / 1024
    ensure(
        (p - 112.0 / 1024.0).abs() < 1e-15,
        format!("(8,2) gave {p}, expected 112/1024"),
    )?;
    Ok(format!(
        "496 (b,c) cells, max deviation {worst:e}; (8,2) -> {p:.4}"
    ))
}

fn bootstrap_determinism() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let gold: Vec<Label> = (0..1000)
        .map(|_| {
            if rng.random_bool(0.3) {
                Label::Err
            } else {
                Label::Not
            }
        })
        .collect();
    let pred: Vec<Verdict> = gold
        .iter()
        .map(|&g| {
            if rng.random_bool(0.8) {
                verdict(g)
            } else {
                verdict(g.flipped())
            }
        })
        .collect();
    let noisy = outcomes_from(&gold, &pred);

    let start = Instant::now();
    let a = bootstrap_ci(&noisy, Statistic::Mcc, 10_000, 99).map_err(e2s)?;
    let elapsed = start.elapsed();
    let b = bootstrap_ci(&noisy, Statistic::Mcc, 10_000, 99).map_err(e2s)?;
    ensure(a == b, format!("same seed gave {a:?} then {b:?}"))?;
    let ra = evaluate(&noisy, 2_000, 5).map_err(e2s)?;
    let rb = evaluate(&noisy, 2_000, 5).map_err(e2s)?;
    ensure(ra == rb, "evaluate differs across identical calls")?;
    ensure(
        elapsed < Duration::from_secs(60),
        format!("B=10000 on n=1000 took {elapsed:?}"),
    )?;

    let perfect = outcomes_from(&gold, &gold.iter().map(|&g| verdict(g)).collect::<Vec<_>>());
    let p = evaluate(&perfect, 10_000, 3).map_err(e2s)?;
    ensure(
        p.ci_mcc == (1.0, 1.0),
        format!("perfect MCC CI {:?}", p.ci_mcc),
    )?;
    ensure(
        p.ci_f1_err == (1.0, 1.0),
        format!("perfect F1-ERR CI {:?}", p.ci_f1_err),
    )?;
    Ok(format!(
        "CI [{:.4}, {:.4}] reproduced; perfect -> (1, 1); B=10000 n=1000 in {elapsed:.2?}",
        a.lo, a.hi
    ))
}

fn calibration() -> Check {
    let heldout = generate(&Spec::new("heldout", Split::Train, 500, 500).seed(55));
    // slope 1, intercept 0 makes the ERR-NOT margin equal the planted feature
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut idx: Vec<usize> = (0..heldout.len()).collect();
    rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
    let mut planted = HashMap::new();
    for (rank, &i) in idx.iter().enumerate() {
        let p = &heldout.pairs[i];
        let z = if rank < 50 {
            rng.random_range(0.01..3.0)
        } else {
            rng.random_range(-3.0..-0.01)
        };
        planted.insert((p.source.clone(), p.target.clone()), z);
    }
    let backend = ParametricMock::new(1.0, 0.0).with_planted(planted);
    let builder = PromptBuilder::default();

    let mut margins = Vec::new();
    for p in &heldout.pairs {
        let prompt = builder.build_zero_shot(p).map_err(e2s)?;
        margins.push(backend.label_logits(prompt.text()).map_err(e2s)?);
    }
    let raw_rate = margins.iter().filter(|l| l.err > l.not).count() as f64 / margins.len() as f64;
    ensure(
        (raw_rate - 0.05).abs() < 1e-12,
        format!("planted raw ERR rate is {raw_rate}"),
    )?;

    let model = estimate_bias(&heldout, &builder, &backend).map_err(e2s)?;
    let post = margins
        .iter()
        .filter(|l| biased_decision(**l, model.beta) == Label::Err)
        .count() as f64
        / margins.len() as f64;
    ensure(
        (post - 0.5).abs() <= 0.005,
        format!("post-fit ERR rate {post} with beta {}", model.beta),
    )?;

    // beta = 0 is the plain argmax, both on the logit table and through decide_greedy
    let zero = CalibrationModel {
        beta: 0.0,
        ..model.clone()
    };
    let cfg = DecodeConfig::default();
    for (p, l) in heldout.pairs.iter().zip(&margins) {
        let argmax = if l.err > l.not {
            Label::Err
        } else {
            Label::Not
        };
        ensure(
            biased_decision(*l, 0.0) == argmax,
            format!("beta 0 moved {}", p.id),
        )?;
        let prompt = builder.build_zero_shot(p).map_err(e2s)?;
        let with = decide_greedy(
            p,
            prompt.text(),
            &backend,
            Some(&zero),
            &cfg,
            Mode::ZeroShot,
        )
        .map_err(e2s)?;
        let without =
            decide_greedy(p, prompt.text(), &backend, None, &cfg, Mode::ZeroShot).map_err(e2s)?;
        ensure(
            with.label == verdict(argmax) && without.label == verdict(argmax),
            format!("beta 0 decision differs from argmax on {}", p.id),
        )?;
    }

    // sweeping beta over 1000 grid points flips each pair at most once
    let grid: Vec<f64> = (0..1000).map(|i| -10.0 + 20.0 * i as f64 / 999.0).collect();
    let mut max_flips = 0;
    for l in &margins {
        let labels: Vec<Label> = grid.iter().map(|&b| biased_decision(*l, b)).collect();
        let flips = labels.windows(2).filter(|w| w[0] != w[1]).count();
        max_flips = max_flips.max(flips);
    }
    ensure(max_flips <= 1, format!("a pair flipped {max_flips} times"))?;
    Ok(format!(
        "raw 5.0% -> {:.1}% with beta {:.3}; beta 0 = argmax on 1000 pairs; max flips {max_flips}",
        post * 100.0,
        model.beta
    ))
}

fn eval_config(dir: &Path, dev: &Path, out: &str) -> RunConfig {
    RunConfig {
        output_dir: dir.join(out),
        dev: Some(DatasetConfig::new(dev)),
        backend: BackendConfig::ScriptedMock(ScriptedConfig {
            responses: vec!["NOT".into()],
            ..Default::default()
        }),
        ..Default::default()
    }
}

fn end_to_end() -> Check {
    let dir = tempfile::tempdir().map_err(e2s)?;
    let dev = dir.path().join("wmt21-dev.tsv");
    let ds = generate(&Spec::new("wmt21-dev", Split::Dev, 700, 300).seed(21));
    fs::write(&dev, write_dataset(&ds, Format::Tsv)).map_err(e2s)?;

    let a = cmd_eval(&eval_config(dir.path(), &dev, "a")).map_err(e2s)?;
    let b = cmd_eval(&eval_config(dir.path(), &dev, "b")).map_err(e2s)?;
    let r = &a.report;
    ensure(r.n == 1000, format!("n = {}", r.n))?;
    ensure(r.accuracy == 0.7, format!("accuracy {}", r.accuracy))?;
    ensure(r.mcc == 0.0, format!("MCC {}", r.mcc))?;
    ensure(r.f1_err == 0.0, format!("F1-ERR {}", r.f1_err))?;
    ensure(
        (r.f1_not - 0.8235).abs() <= 1e-4,
        format!("F1-NOT {}", r.f1_not),
    )?;
    ensure(
        (r.f1_not - 1.4 / 1.7).abs() < 1e-12,
        format!("F1-NOT {} vs 1.4/1.7", r.f1_not),
    )?;
    let la = fs::read(&a.decisions_path).map_err(e2s)?;
    let lb = fs::read(&b.decisions_path).map_err(e2s)?;
    ensure(
        !la.is_empty() && la == lb,
        "decision logs differ between runs",
    )?;
    Ok(format!(
        "acc {:.3} MCC {} F1-ERR {} F1-NOT {:.4}; {} byte logs identical",
        r.accuracy,
        r.mcc,
        r.f1_err,
        r.f1_not,
        la.len()
    ))
}

fn voting() -> Check {
    let dev = generate(&Spec::new("vote", Split::Dev, 25, 25).seed(7));
    let builder = PromptBuilder::default();
    let mut scripted = ScriptedMock::constant("NOT");
    for p in &dev.pairs {
        let prompt = builder.build_zero_shot(p).map_err(e2s)?;
        scripted = scripted.script(prompt.text(), ["ERR", "ERR", "NOT"]);
    }
    let decisions = Pipeline::new(&scripted, Mode::Vote)
        .run_all(&dev.pairs, 8)
        .map_err(e2s)?;
    for d in &decisions {
        ensure(
            d.label == Verdict::Err,
            format!("{} voted {:?}", d.pair_id, d.label),
        )?;
        ensure(
            (d.tally.n_err, d.tally.n_not) == (2, 1),
            format!("{} tally ({}, {})", d.pair_id, d.tally.n_err, d.tally.n_not),
        )?;
    }

    let invalid = ScriptedMock::constant("Maybe");
    let decisions = Pipeline::new(&invalid, Mode::Vote)
        .run_all(&dev.pairs, 8)
        .map_err(e2s)?;
    for d in &decisions {
        ensure(
            d.label == Verdict::Invalid,
            format!("{} gave {:?}", d.pair_id, d.label),
        )?;
        ensure(
            d.retries_used == 9,
            format!(
                "{} used {} calls, expected 3 per vote",
                d.pair_id, d.retries_used
            ),
        )?;
    }
    Ok(format!(
        "{} pairs ERR (2,1); all-invalid -> Invalid after 3x3 asks",
        dev.len()
    ))
}

const INSTRUCTION: &str = "You are an EXPERT translation quality evaluator for EN→DE Critical Error Detection.
Classify each translation as ERR or NOT based on these CRITICAL errors:
• ERR: Major meaning changes, omissions, hallucinations, wrong entities, negation flips, toxic/safety issues, significant number/date errors.
• NOT: Minor style/grammar issues, acceptable paraphrasing, preserved meaning.
IMPORTANT: Output ONLY ERR or NOT (no punctuation, no explanation).";

fn prompt_fidelity() -> Check {
    let builder = PromptBuilder::default();
    let train = generate(&Spec::new("train", Split::Train, 400, 400).seed(2));
    let dev = generate(&Spec::new("dev", Split::Dev, 100, 100).seed(3));
    let pool = ExemplarPool::draw(&train, 4);
    let policy = FewShotPolicy::default();
    ensure(policy.k == 12, format!("default k is {}", policy.k))?;
    let mut longest = 0;
    for q in &dev.pairs {
        let zs = builder.build_zero_shot(q).map_err(e2s)?;
        ensure(
            zs.text().contains(INSTRUCTION),
            "zero-shot prompt lacks the instruction verbatim",
        )?;
        ensure(
            zs.text().contains("Output ONLY ERR or NOT"),
            "missing output constraint",
        )?;
        let fs = builder
            .build_few_shot(q, &pool.select(q, &policy).map_err(e2s)?)
            .map_err(e2s)?;
        let labels = fs.exemplar_labels();
        let n_err = labels.iter().filter(|l| **l == Label::Err).count();
        let n_not = labels.iter().filter(|l| **l == Label::Not).count();
        ensure(
            (n_err, n_not) == (6, 6),
            format!("{} has {n_err} ERR + {n_not} NOT exemplars", q.id),
        )?;
        for p in [&zs, &fs] {
            let t = builder.counter.count(p.text());
            ensure(t <= 1024, format!("{} renders to {t} tokens", q.id))?;
            longest = longest.max(t);
        }
    }
    // an oversized query still comes in under the cap or is refused
    let long = Pair::new("long", &"word ".repeat(300), "Wort", None);
    if let Ok(p) = builder.build_few_shot(&long, &pool.select(&long, &policy).map_err(e2s)?) {
        ensure(
            builder.counter.count(p.text()) <= 1024,
            "trimmed prompt exceeds 1024 tokens",
        )?;
    }
    Ok(format!(
        "instruction verbatim; 6+6 exemplars on {} queries; longest prompt {longest} tokens",
        dev.len()
    ))
}

fn profiling() -> Check {
    let pairs = generate(&Spec::new("prof", Split::Dev, 16, 16).seed(9)).pairs;
    let backend = ScriptedMock::constant("NOT").with_delay(Duration::from_millis(50));
    let pipeline = Pipeline::new(&backend, Mode::ZeroShot);
    let lat = measure_latency(&pipeline, &pairs[0], 3, 2).map_err(e2s)?;
    ensure(
        lat.repeats_ms.len() == 3,
        format!("{} repeats recorded", lat.repeats_ms.len()),
    )?;
    ensure(lat.warmup_runs == 2, format!("{} warmups", lat.warmup_runs))?;
    ensure(
        (50.0..=65.0).contains(&lat.mean_ms),
        format!("latency mean {} ms", lat.mean_ms),
    )?;
    let arith = (lat.repeats_ms[0] + lat.repeats_ms[1] + lat.repeats_ms[2]) / 3.0;
    ensure(
        lat.mean_ms == arith,
        format!("mean {} != arithmetic mean {arith}", lat.mean_ms),
    )?;

    let thr = measure_throughput(&pipeline, &pairs, 16, 3).map_err(e2s)?;
    let ceiling = 16.0 / 0.05;
    ensure(
        thr.mean_sps >= 0.5 * ceiling,
        format!("throughput {} < {}", thr.mean_sps, 0.5 * ceiling),
    )?;
    let arith = thr.repeats_sps.iter().sum::<f64>() / thr.repeats_sps.len() as f64;
    ensure(
        thr.mean_sps == arith,
        "throughput mean is not the arithmetic mean",
    )?;
    Ok(format!(
        "latency {:.2} ms over {:.1?}; throughput {:.0}/s vs ceiling {ceiling:.0}/s",
        lat.mean_ms, lat.repeats_ms, thr.mean_sps
    ))
}

fn corpus_checks() -> Check {
    let dir = tempfile::tempdir().map_err(e2s)?;
    let write = |name: &str, ds: &Dataset| -> Result<std::path::PathBuf, String> {
        let p = dir.path().join(name);
        fs::write(&p, write_dataset(ds, Format::Tsv)).map_err(e2s)?;
        Ok(p)
    };
    let train_path = write(
        "synced-train.tsv",
        &generate(&Spec::new("synced-train", Split::Train, 4000, 4000).seed(1)),
    )?;
    let dev_path = write(
        "synced-dev.tsv",
        &generate(&Spec::new("synced-dev", Split::Dev, 500, 500).seed(2)),
    )?;
    let train =
        load_dataset(&train_path, Format::Tsv, LabelScheme::Native, Split::Train).map_err(e2s)?;
    let dev = load_dataset(&dev_path, Format::Tsv, LabelScheme::Native, Split::Dev).map_err(e2s)?;
    let (t, d) = (split_stats(&train), split_stats(&dev));
    ensure(
        (t.n_not, t.n_err) == (4000, 4000),
        format!("train {}/{}", t.n_not, t.n_err),
    )?;
    ensure(
        (d.n_not, d.n_err) == (500, 500),
        format!("dev {}/{}", d.n_not, d.n_err),
    )?;

    // WMT22-shaped: OK/BAD labels, heavy NOT skew
    let mut wmt = String::from("id\tsource\ttarget\tlabel\n");
    for i in 0..120 {
        let label = if i % 17 == 0 { "BAD" } else { "OK" };
        wmt.push_str(&format!(
            "w{i}\tSentence {i} here.\tSatz {i} hier.\t{label}\n"
        ));
    }
    let ds = parse_dataset(
        wmt.as_bytes(),
        "wmt22-dev",
        Split::Dev,
        Format::Tsv,
        LabelScheme::OkBad,
    )
    .map_err(e2s)?;
    for (i, p) in ds.pairs.iter().enumerate() {
        let want = if i % 17 == 0 { Label::Err } else { Label::Not };
        ensure(
            p.gold == Some(want),
            format!("{} mapped to {:?}", p.id, p.gold),
        )?;
    }
    let s = split_stats(&ds);
    ensure(
        parse_dataset(
            wmt.as_bytes(),
            "wmt22-dev",
            Split::Dev,
            Format::Tsv,
            LabelScheme::Native,
        )
        .is_err(),
        "native scheme accepted OK/BAD",
    )?;

    // plant a dev pair into train and require a nonzero strict exit from the binary entry point
    let mut leaky = generate(&Spec::new("leak-train", Split::Train, 50, 50).seed(3));
    let leak_dev = generate(&Spec::new("leak-dev", Split::Dev, 20, 20).seed(4));
    leaky.pairs.push(Pair::new(
        "planted",
        &leak_dev.pairs[5].source,
        &leak_dev.pairs[5].target,
        leak_dev.pairs[5].gold,
    ));
    let lt = write("leak-train.tsv", &leaky)?;
    let ld = write("leak-dev.tsv", &leak_dev)?;
    let cfg = dir.path().join("leak.toml");
    fs::write(
        &cfg,
        format!(
            "output_dir = {:?}\n[train]\npath = {:?}\n[dev]\npath = {:?}\n[backend]\nkind = \"scripted-mock\"\n",
            dir.path().join("runs").display().to_string(),
            lt.display().to_string(),
            ld.display().to_string()
        ),
    )
    .map_err(e2s)?;
    let cfg_s = cfg.display().to_string();
    let lax = ced_harness::cli::run(["ced", "ingest", "--config", &cfg_s]);
    let strict = ced_harness::cli::run(["ced", "ingest", "--config", &cfg_s, "--strict"]);
    ensure(lax == 0, format!("non-strict ingest exited {lax}"))?;
    ensure(strict != 0, "strict ingest with a planted leak exited 0")?;
    Ok(format!(
        "train 4000/4000, dev 500/500; OK/BAD -> {}/{} NOT/ERR; strict leak exit {strict}",
        s.n_not, s.n_err
    ))
}

fn frontier() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for set in 0..500 {
        let n = rng.random_range(1..40);
        let points: Vec<FrontierPoint> = (0..n)
            .map(|i| {
                // coarse grids force ties in both coordinates
                let lat = f64::from(rng.random_range(1..20u32)) * 50.0;
                let m = f64::from(rng.random_range(-10..=10i32)) / 10.0;
                FrontierPoint::new(format!("p{i}"), lat, m)
            })
            .collect();
        let mut got: Vec<(u64, u64)> = pareto_frontier(&points)
            .iter()
            .map(|p| (p.latency_ms.to_bits(), p.mcc.to_bits()))
            .collect();
        got.sort();
        got.dedup();
        ensure(
            got == brute_frontier(&points),
            format!("set {set} differs from the O(n^2) filter"),
        )?;
    }
    let table = [
        FrontierPoint::new("gemma", 250.0, 0.48),
        FrontierPoint::new("qwen", 905.0, 0.20),
        FrontierPoint::new("lfm2", 365.0, 0.05),
    ];
    let f = pareto_frontier(&table);
    ensure(
        f.len() == 1 && f[0].latency_ms == 250.0 && f[0].mcc == 0.48,
        format!(
            "frontier {:?}",
            f.iter().map(|p| (p.latency_ms, p.mcc)).collect::<Vec<_>>()
        ),
    )?;
    Ok("500 random sets match brute force; {(250,0.48)} is the frontier".into())
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("metric oracle equivalence", metric_oracle),
        ("MCC spot values", mcc_spot_values),
        ("McNemar exactness", mcnemar_exactness),
        ("bootstrap determinism", bootstrap_determinism),
        ("calibration", calibration),
        ("end-to-end determinism", end_to_end),
        ("voting", voting),
        ("prompt fidelity", prompt_fidelity),
        ("profiling sanity", profiling),
        ("corpus checks", corpus_checks),
        ("frontier correctness", frontier),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        match check() {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
