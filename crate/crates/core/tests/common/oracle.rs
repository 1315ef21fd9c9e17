//! Brute-force references the metric code is checked against.

use rand::Rng;
use vesselgrade::evaluation::{apply_bins, confusion, fit_thresholds, mcc, roc_auc, ConfusionMatrix};

/// Probability that a random positive outscores a random negative, ties
/// counting one half, by enumerating every pair.
pub fn mann_whitney(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &p) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &n) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Classical two-class MCC from the four cells, class 1 positive.
pub fn binary_mcc(cm: &ConfusionMatrix) -> f64 {
    let tp = cm.get(1, 1) as f64;
    let tn = cm.get(0, 0) as f64;
    let fp = cm.get(0, 1) as f64;
    let fn_ = cm.get(1, 0) as f64;
    let den = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    if den == 0.0 {
        0.0
    } else {
        (tp * tn - fp * fn_) / den
    }
}

/// Random scored instance with at least one member of each class; scores are
/// drawn from a few levels so ties are common.
pub fn random_instance(rng: &mut impl Rng) -> (Vec<f64>, Vec<bool>) {
    let n = rng.gen_range(2..=200);
    let levels = rng.gen_range(2..=40);
    loop {
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
            let scores = labels
                .iter()
                .map(|&l| (rng.gen_range(0..levels) as f64 + if l { 2.0 } else { 0.0 }) * 0.25)
                .collect();
            return (scores, labels);
        }
    }
}

/// Largest |trapezoidal AUC − pair count| over `count` random instances.
pub fn auc_discrepancy(rng: &mut impl Rng, count: usize) -> f64 {
    (0..count)
        .map(|_| {
            let (s, l) = random_instance(rng);
            (roc_auc(&s, &l).unwrap().auc - mann_whitney(&s, &l)).abs()
        })
        .fold(0.0, f64::max)
}

/// Number of random two-class matrices where the general MCC departs from
/// the binary formula or from its transpose.
pub fn mcc_mismatches(rng: &mut impl Rng, count: usize) -> usize {
    let mut bad = 0;
    for i in 0..count {
        let counts: Vec<u64> = (0..4)
            .map(|_| {
                if i % 7 == 0 && rng.gen_bool(0.5) {
                    0
                } else {
                    rng.gen_range(0..50)
                }
            })
            .collect();
        let cm = ConfusionMatrix::from_counts(2, counts).unwrap();
        let g = mcc(&cm);
        if (g - binary_mcc(&cm)).abs() > 1e-12 || (g - mcc(&cm.transposed())).abs() > 1e-12 {
            bad += 1;
        }
    }
    bad
}

/// Checks distribution matching and monotonicity of fitted thresholds on
/// `count` random sets; returns a description of the first violation.
pub fn binning_violation(rng: &mut impl Rng, count: usize) -> Option<String> {
    for set in 0..count {
        let k = rng.gen_range(2..=6);
        let n = rng.gen_range(k..=150);
        let mut labels: Vec<usize> = (0..k).collect();
        labels.extend((k..n).map(|_| rng.gen_range(0..k)));
        let scores: Vec<f64> = labels
            .iter()
            .map(|&c| c as f64 * 0.3 + rng.gen_range(-1.0..1.0))
            .collect();
        let t = fit_thresholds(&scores, &labels, k, "random").unwrap();
        let pred = apply_bins(&scores, &t.cuts);
        let fitted = confusion(&labels, &pred, k).unwrap();
        let (want, got) = (fitted.row_sums(), fitted.col_sums());
        for c in 0..k {
            if want[c].abs_diff(got[c]) > 1 {
                return Some(format!(
                    "set {set}: class {c} has {} binned vs {} labelled",
                    got[c], want[c]
                ));
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
        if order.windows(2).any(|w| pred[w[0]] > pred[w[1]]) {
            return Some(format!("set {set}: binning is not monotone"));
        }
    }
    None
}
