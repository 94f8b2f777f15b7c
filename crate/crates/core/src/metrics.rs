//! Quality metrics with ERR as the positive class.
//!
//! Invalid decisions are scored as the wrong label for their gold, so they land in
//! `fn` (gold ERR) or `fp` (gold NOT). Every ratio with a zero denominator is 0.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ErrorCategory, Label, Pair};
use crate::decide::{Decision, Verdict};

pub const DEFAULT_RESAMPLES: usize = 10_000;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("decision/gold length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no decision for gold pair {0:?}")]
    MissingDecision(String),
    #[error("id mismatch at position {index}: {left:?} vs {right:?}")]
    IdMismatch {
        index: usize,
        left: String,
        right: String,
    },
    #[error("gold pair {0:?} has no label")]
    MissingGold(String),
    #[error("bootstrap needs at least 2 pairs, got {0}")]
    TooFewPairs(usize),
}

/// One scored pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    pub id: String,
    pub gold: Label,
    pub predicted: Verdict,
    pub category: Option<ErrorCategory>,
}

impl Outcome {
    /// The label this outcome counts as; Invalid counts as the opposite of gold.
    pub fn effective(&self) -> Label {
        self.predicted.label().unwrap_or(self.gold.flipped())
    }

    pub fn is_correct(&self) -> bool {
        self.effective() == self.gold
    }
}

/// Pair decisions with gold labels by id, in gold order.
pub fn align(decisions: &[Decision], gold: &[Pair]) -> Result<Vec<Outcome>, MetricsError> {
    if decisions.len() != gold.len() {
        return Err(MetricsError::LengthMismatch(decisions.len(), gold.len()));
    }
    let by_id: HashMap<&str, &Decision> =
        decisions.iter().map(|d| (d.pair_id.as_str(), d)).collect();
    gold.iter()
        .map(|p| {
            let d = by_id
                .get(p.id.as_str())
                .ok_or_else(|| MetricsError::MissingDecision(p.id.clone()))?;
            Ok(Outcome {
                id: p.id.clone(),
                gold: p
                    .gold
                    .ok_or_else(|| MetricsError::MissingGold(p.id.clone()))?,
                predicted: d.label,
                category: p.category,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> ConfusionMatrix {
        ConfusionMatrix { tp, fp, fn_, tn }
    }

    pub fn from_outcomes<'a>(outcomes: impl IntoIterator<Item = &'a Outcome>) -> ConfusionMatrix {
        let mut cm = ConfusionMatrix::default();
        for o in outcomes {
            cm.add(o.gold, o.effective());
        }
        cm
    }

    fn add(&mut self, gold: Label, predicted: Label) {
        match (gold, predicted) {
            (Label::Err, Label::Err) => self.tp += 1,
            (Label::Not, Label::Err) => self.fp += 1,
            (Label::Err, Label::Not) => self.fn_ += 1,
            (Label::Not, Label::Not) => self.tn += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// The same matrix with NOT as the positive class.
    pub fn swapped(&self) -> ConfusionMatrix {
        ConfusionMatrix::new(self.tn, self.fn_, self.fp, self.tp)
    }
}

/// Confusion matrix from aligned decisions and gold pairs.
pub fn confusion(decisions: &[Decision], gold: &[Pair]) -> Result<ConfusionMatrix, MetricsError> {
    Ok(ConfusionMatrix::from_outcomes(&align(decisions, gold)?))
}

pub fn accuracy(cm: &ConfusionMatrix) -> f64 {
    let total = cm.total();
    if total == 0 {
        0.0
    } else {
        (cm.tp + cm.tn) as f64 / total as f64
    }
}

pub fn f1(cm: &ConfusionMatrix, positive: Label) -> f64 {
    let cm = match positive {
        Label::Err => *cm,
        Label::Not => cm.swapped(),
    };
    let denom = 2 * cm.tp + cm.fp + cm.fn_;
    if cm.tp == 0 || denom == 0 {
        0.0
    } else {
        (2 * cm.tp) as f64 / denom as f64
    }
}

/// Matthews correlation; 0 when any marginal is empty.
pub fn mcc(cm: &ConfusionMatrix) -> f64 {
    let ConfusionMatrix { tp, fp, fn_, tn } = *cm;
    let (a, b, c, d) = (tp + fp, tp + fn_, tn + fp, tn + fn_);
    if a == 0 || b == 0 || c == 0 || d == 0 {
        return 0.0;
    }
    let num = i128::from(tp) * i128::from(tn) - i128::from(fp) * i128::from(fn_);
    let den = ((a as f64) * (b as f64)).sqrt() * ((c as f64) * (d as f64)).sqrt();
    num as f64 / den
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    Mcc,
    F1Err,
    F1Not,
    Accuracy,
}

impl Statistic {
    pub fn eval(self, cm: &ConfusionMatrix) -> f64 {
        match self {
            Statistic::Mcc => mcc(cm),
            Statistic::F1Err => f1(cm, Label::Err),
            Statistic::F1Not => f1(cm, Label::Not),
            Statistic::Accuracy => accuracy(cm),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub lo: f64,
    pub hi: f64,
    pub point: f64,
    pub resamples: usize,
    pub seed: u64,
}

/// The statistic on each of `resamples` with-replacement resamples.
///
/// Resample `r` draws from a ChaCha stream selected by `r`, so the trace does not
/// depend on evaluation order.
pub fn bootstrap_distribution(
    outcomes: &[Outcome],
    statistic: Statistic,
    resamples: usize,
    seed: u64,
) -> Result<Vec<f64>, MetricsError> {
    let n = outcomes.len();
    if n < 2 {
        return Err(MetricsError::TooFewPairs(n));
    }
    let cells: Vec<(Label, Label)> = outcomes.iter().map(|o| (o.gold, o.effective())).collect();
    Ok((0..resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let mut cm = ConfusionMatrix::default();
            for _ in 0..n {
                let (g, p) = cells[rng.random_range(0..n)];
                cm.add(g, p);
            }
            statistic.eval(&cm)
        })
        .collect())
}

/// Linear-interpolation percentile of sorted data, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// 95% percentile-bootstrap interval.
pub fn bootstrap_ci(
    outcomes: &[Outcome],
    statistic: Statistic,
    resamples: usize,
    seed: u64,
) -> Result<BootstrapCi, MetricsError> {
    let mut trace = bootstrap_distribution(outcomes, statistic, resamples, seed)?;
    trace.sort_by(f64::total_cmp);
    Ok(BootstrapCi {
        lo: percentile(&trace, 0.025),
        hi: percentile(&trace, 0.975),
        point: statistic.eval(&ConfusionMatrix::from_outcomes(outcomes)),
        resamples,
        seed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McNemarResult {
    /// A correct, B wrong.
    pub b: u64,
    /// A wrong, B correct.
    pub c: u64,
    pub p_value: f64,
}

/// Two-sided exact binomial p-value on discordant counts.
pub fn mcnemar_exact_p(b: u64, c: u64) -> f64 {
    let n = b + c;
    if n == 0 {
        return 1.0;
    }
    let k = b.min(c);
    let p = if n <= 120 {
        let mut coef: u128 = 1;
        let mut sum: u128 = 1;
        for i in 0..k {
            coef = coef * u128::from(n - i) / u128::from(i + 1);
            sum += coef;
        }
        // 2 * sum / 2^n
        sum as f64 / 2f64.powi((n - 1) as i32)
    } else {
        let mut log_coef = 0.0f64;
        let mut log_sum = 0.0f64;
        for i in 0..k {
            log_coef += ((n - i) as f64).ln() - ((i + 1) as f64).ln();
            let m = log_sum.max(log_coef);
            log_sum = m + ((log_sum - m).exp() + (log_coef - m).exp()).ln();
        }
        (log_sum - (n - 1) as f64 * std::f64::consts::LN_2).exp()
    };
    p.min(1.0)
}

/// Paired comparison of two systems on the same pairs (same ids, same order).
pub fn mcnemar(a: &[Outcome], b: &[Outcome]) -> Result<McNemarResult, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    let (mut only_a, mut only_b) = (0u64, 0u64);
    for (index, (x, y)) in a.iter().zip(b).enumerate() {
        if x.id != y.id {
            return Err(MetricsError::IdMismatch {
                index,
                left: x.id.clone(),
                right: y.id.clone(),
            });
        }
        match (x.is_correct(), y.is_correct()) {
            (true, false) => only_a += 1,
            (false, true) => only_b += 1,
            _ => {}
        }
    }
    Ok(McNemarResult {
        b: only_a,
        c: only_b,
        p_value: mcnemar_exact_p(only_a, only_b),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub category: ErrorCategory,
    pub gold_err: usize,
    pub detected: usize,
    pub recall: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    pub rows: Vec<CategoryRow>,
    /// Among TOX-tagged pairs predicted ERR, the fraction whose gold is ERR.
    pub tox_precision: Option<f64>,
    pub warning: Option<String>,
}

/// Per-category recall over categorized gold-ERR pairs.
pub fn error_type_breakdown(outcomes: &[Outcome]) -> ErrorBreakdown {
    let mut rows = Vec::new();
    for category in ErrorCategory::ALL {
        let tagged: Vec<&Outcome> = outcomes
            .iter()
            .filter(|o| o.category == Some(category) && o.gold == Label::Err)
            .collect();
        if tagged.is_empty() {
            continue;
        }
        let detected = tagged
            .iter()
            .filter(|o| o.predicted == Verdict::Err)
            .count();
        rows.push(CategoryRow {
            category,
            gold_err: tagged.len(),
            detected,
            recall: detected as f64 / tagged.len() as f64,
        });
    }
    let tox_flagged: Vec<&Outcome> = outcomes
        .iter()
        .filter(|o| o.category == Some(ErrorCategory::Tox) && o.predicted == Verdict::Err)
        .collect();
    let tox_precision = (!tox_flagged.is_empty()).then(|| {
        tox_flagged.iter().filter(|o| o.gold == Label::Err).count() as f64
            / tox_flagged.len() as f64
    });
    let warning = rows
        .is_empty()
        .then(|| "no categorized gold-ERR pairs; breakdown is empty".to_string());
    ErrorBreakdown {
        rows,
        tox_precision,
        warning,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub model: String,
    pub mode: String,
    pub manifest_hash: String,
    pub n: usize,
    pub invalid: usize,
    pub backend_failures: usize,
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub f1_err: f64,
    pub f1_not: f64,
    pub mcc: f64,
    pub ci_mcc: (f64, f64),
    pub ci_f1_err: (f64, f64),
    pub resamples: usize,
    pub seed: u64,
}

/// Point metrics plus bootstrap intervals for MCC and F1-ERR.
pub fn evaluate(
    outcomes: &[Outcome],
    resamples: usize,
    seed: u64,
) -> Result<MetricsReport, MetricsError> {
    let cm = ConfusionMatrix::from_outcomes(outcomes);
    let ci_mcc = bootstrap_ci(outcomes, Statistic::Mcc, resamples, seed)?;
    let ci_f1 = bootstrap_ci(outcomes, Statistic::F1Err, resamples, seed)?;
    Ok(MetricsReport {
        n: outcomes.len(),
        invalid: outcomes
            .iter()
            .filter(|o| o.predicted == Verdict::Invalid)
            .count(),
        confusion: cm,
        accuracy: accuracy(&cm),
        f1_err: f1(&cm, Label::Err),
        f1_not: f1(&cm, Label::Not),
        mcc: mcc(&cm),
        ci_mcc: (ci_mcc.lo, ci_mcc.hi),
        ci_f1_err: (ci_f1.lo, ci_f1.hi),
        resamples,
        seed,
        ..Default::default()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decide::{Mode, Tally};
    use proptest::prelude::*;

    fn outcome(id: usize, gold: Label, predicted: Verdict) -> Outcome {
        Outcome {
            id: id.to_string(),
            gold,
            predicted,
            category: None,
        }
    }

    fn ten_pairs(pred: impl Fn(usize, Label) -> Verdict) -> Vec<Outcome> {
        (0..10)
            .map(|i| {
                let gold = if i < 4 { Label::Err } else { Label::Not };
                outcome(i, gold, pred(i, gold))
            })
            .collect()
    }

    #[test]
    fn confusion_examples() {
        let perfect = ten_pairs(|_, g| g.into());
        assert_eq!(
            ConfusionMatrix::from_outcomes(&perfect),
            ConfusionMatrix::new(4, 0, 0, 6)
        );
        let all_not = ten_pairs(|_, _| Verdict::Not);
        assert_eq!(
            ConfusionMatrix::from_outcomes(&all_not),
            ConfusionMatrix::new(0, 0, 4, 6)
        );
        let one_invalid = ten_pairs(|i, g| if i == 0 { Verdict::Invalid } else { g.into() });
        assert_eq!(
            ConfusionMatrix::from_outcomes(&one_invalid),
            ConfusionMatrix::new(3, 0, 1, 6)
        );
        let invalid_on_not = ten_pairs(|i, g| if i == 9 { Verdict::Invalid } else { g.into() });
        assert_eq!(ConfusionMatrix::from_outcomes(&invalid_on_not).fp, 1);
    }

    fn decision(id: &str, label: Verdict) -> Decision {
        Decision {
            pair_id: id.into(),
            label,
            votes: vec![],
            tally: Tally::default(),
            retries_used: 1,
            beta_applied: 0.0,
            mode: Mode::ZeroShot,
            logits: None,
            failure: None,
        }
    }

    #[test]
    fn confusion_aligns_by_id() {
        let gold = vec![
            Pair::new("a", "s", "t", Some(Label::Err)),
            Pair::new("b", "s", "t", Some(Label::Not)),
        ];
        let ds = vec![decision("b", Verdict::Not), decision("a", Verdict::Err)];
        assert_eq!(
            confusion(&ds, &gold).unwrap(),
            ConfusionMatrix::new(1, 0, 0, 1)
        );
        let bad = vec![decision("a", Verdict::Err), decision("c", Verdict::Not)];
        assert_eq!(
            confusion(&bad, &gold),
            Err(MetricsError::MissingDecision("b".into()))
        );
        assert!(matches!(
            confusion(&bad[..1], &gold),
            Err(MetricsError::LengthMismatch(1, 2))
        ));
    }

    #[test]
    fn mcc_examples() {
        assert_eq!(mcc(&ConfusionMatrix::new(4, 0, 0, 6)), 1.0);
        assert_eq!(mcc(&ConfusionMatrix::new(0, 0, 4, 6)), 0.0);
        // (15 - 1) / sqrt(4 * 4 * 6 * 6) = 14 / 24
        assert!((mcc(&ConfusionMatrix::new(3, 1, 1, 5)) - 14.0 / 24.0).abs() < 1e-15);
    }

    #[test]
    fn f1_examples() {
        assert!((f1(&ConfusionMatrix::new(3, 1, 1, 5), Label::Err) - 0.75).abs() < 1e-15);
        let all_not = ConfusionMatrix::new(0, 0, 4, 6);
        assert_eq!(f1(&all_not, Label::Err), 0.0);
        // precision 0.6, recall 1.0
        assert!((f1(&all_not, Label::Not) - 0.75).abs() < 1e-15);
        assert_eq!(f1(&ConfusionMatrix::default(), Label::Err), 0.0);
        assert_eq!(accuracy(&ConfusionMatrix::default()), 0.0);
    }

    #[test]
    fn mcnemar_examples() {
        assert_eq!(mcnemar_exact_p(0, 0), 1.0);
        assert!((mcnemar_exact_p(8, 2) - 112.0 / 1024.0).abs() < 1e-15);
        assert_eq!(mcnemar_exact_p(8, 2), mcnemar_exact_p(2, 8));
        assert_eq!(mcnemar_exact_p(5, 5), 1.0);
    }

    #[test]
    fn mcnemar_large_n_paths_agree() {
        // n = 120 uses integers, n = 121 log space; neighbours must be close
        let p120 = mcnemar_exact_p(50, 70);
        let p121 = mcnemar_exact_p(50, 71);
        assert!(p121 < p120 && p121 > 0.5 * p120, "{p120} {p121}");
        let big = mcnemar_exact_p(400, 600);
        assert!(big > 0.0 && big < 1e-9);
    }

    #[test]
    fn mcnemar_counts_invalid_as_wrong() {
        let gold = [Label::Err, Label::Not, Label::Err];
        let a: Vec<Outcome> = gold
            .iter()
            .enumerate()
            .map(|(i, g)| outcome(i, *g, (*g).into()))
            .collect();
        let b = vec![
            outcome(0, Label::Err, Verdict::Invalid),
            outcome(1, Label::Not, Verdict::Not),
            outcome(2, Label::Err, Verdict::Not),
        ];
        let r = mcnemar(&a, &b).unwrap();
        assert_eq!((r.b, r.c), (2, 0));
        let swapped = mcnemar(&b, &a).unwrap();
        assert_eq!((swapped.b, swapped.c, swapped.p_value), (0, 2, r.p_value));
        let mut misaligned = b.clone();
        misaligned[1].id = "x".into();
        assert!(matches!(
            mcnemar(&a, &misaligned),
            Err(MetricsError::IdMismatch { index: 1, .. })
        ));
    }

    #[test]
    fn bootstrap_degenerate_and_deterministic() {
        let perfect: Vec<Outcome> = (0..50)
            .map(|i| {
                let g = if i % 3 == 0 { Label::Err } else { Label::Not };
                outcome(i, g, g.into())
            })
            .collect();
        let ci = bootstrap_ci(&perfect, Statistic::Mcc, 500, 1).unwrap();
        assert_eq!((ci.lo, ci.hi), (1.0, 1.0));
        let noisy = ten_pairs(|i, g| {
            if i % 4 == 0 {
                g.flipped().into()
            } else {
                g.into()
            }
        });
        let a = bootstrap_ci(&noisy, Statistic::F1Err, 300, 9).unwrap();
        let b = bootstrap_ci(&noisy, Statistic::F1Err, 300, 9).unwrap();
        assert_eq!(a, b);
        assert!(bootstrap_ci(&noisy[..1], Statistic::Mcc, 10, 0).is_err());
    }

    #[test]
    fn percentile_interpolates() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&xs, 0.0), 1.0);
        assert_eq!(percentile(&xs, 1.0), 5.0);
        assert_eq!(percentile(&xs, 0.5), 3.0);
        assert!((percentile(&xs, 0.1) - 1.4).abs() < 1e-12);
    }

    #[test]
    fn breakdown_counts() {
        let mut outs = Vec::new();
        for i in 0..10 {
            let pred = if i < 7 { Verdict::Err } else { Verdict::Not };
            outs.push(Outcome {
                id: format!("n{i}"),
                gold: Label::Err,
                predicted: pred,
                category: Some(ErrorCategory::Num),
            });
        }
        for i in 0..4 {
            outs.push(Outcome {
                id: format!("t{i}"),
                gold: Label::Err,
                predicted: Verdict::Err,
                category: Some(ErrorCategory::Tox),
            });
        }
        outs.push(outcome(99, Label::Not, Verdict::Err));
        let b = error_type_breakdown(&outs);
        assert_eq!(b.rows.len(), 2);
        assert_eq!(b.rows[0].category, ErrorCategory::Num);
        assert!((b.rows[0].recall - 0.7).abs() < 1e-15);
        assert_eq!(b.rows[1].recall, 1.0);
        assert_eq!(b.tox_precision, Some(1.0));
        assert!(b.warning.is_none());

        let empty = error_type_breakdown(&[outcome(0, Label::Err, Verdict::Err)]);
        assert!(empty.rows.is_empty());
        assert!(empty.warning.is_some());
    }

    fn cm_strategy() -> impl Strategy<Value = ConfusionMatrix> {
        (0u64..200, 0u64..200, 0u64..200, 0u64..200)
            .prop_map(|(a, b, c, d)| ConfusionMatrix::new(a, b, c, d))
    }

    proptest! {
        #[test]
        fn label_swap_duality(cm in cm_strategy()) {
            let s = cm.swapped();
            prop_assert_eq!(f1(&cm, Label::Err), f1(&s, Label::Not));
            prop_assert_eq!(f1(&cm, Label::Not), f1(&s, Label::Err));
            prop_assert!((mcc(&cm) - mcc(&s)).abs() < 1e-12);
        }

        #[test]
        fn metric_ranges(cm in cm_strategy()) {
            let m = mcc(&cm);
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&m));
            for v in [f1(&cm, Label::Err), f1(&cm, Label::Not), accuracy(&cm)] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn mcnemar_symmetry(b in 0u64..300, c in 0u64..300) {
            let p = mcnemar_exact_p(b, c);
            prop_assert!(p > 0.0 && p <= 1.0);
            prop_assert_eq!(p, mcnemar_exact_p(c, b));
        }
    }
}
