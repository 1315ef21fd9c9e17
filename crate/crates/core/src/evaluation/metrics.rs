use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `k×k` counts, rows true class, columns predicted class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        if k == 0 || counts.len() != k * k {
            return Err(Error::dim(format!("{} counts for a {k}×{k} matrix", counts.len())));
        }
        Ok(ConfusionMatrix { k, counts })
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        (0..self.k).map(|r| (0..self.k).map(|c| self.get(r, c)).sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        (0..self.k).map(|c| (0..self.k).map(|r| self.get(r, c)).sum()).collect()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    pub fn transposed(&self) -> Self {
        let k = self.k;
        ConfusionMatrix {
            k,
            counts: (0..k * k).map(|i| self.get(i % k, i / k)).collect(),
        }
    }

    /// Relabels classes: entry `(i, j)` moves to `(perm[i], perm[j])`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.k];
        if perm.len() != self.k
            || perm
                .iter()
                .any(|&p| p >= self.k || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::contract(format!(
                "{perm:?} is not a permutation of 0..{}",
                self.k
            )));
        }
        let mut counts = vec![0; self.k * self.k];
        for i in 0..self.k {
            for j in 0..self.k {
                counts[perm[i] * self.k + perm[j]] = self.get(i, j);
            }
        }
        Ok(ConfusionMatrix { k: self.k, counts })
    }
}

pub fn confusion(truth: &[usize], pred: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if truth.len() != pred.len() {
        return Err(Error::dim(format!(
            "{} true labels against {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    let mut counts = vec![0; k * k];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= k || p >= k {
            return Err(Error::contract(format!("class pair ({t}, {p}) outside 0..{k}")));
        }
        counts[t * k + p] += 1;
    }
    ConfusionMatrix::from_counts(k, counts)
}

/// Trace over total; 0 for an empty matrix.
pub fn accuracy(cm: &ConfusionMatrix) -> f64 {
    ratio(cm.trace(), cm.total()).unwrap_or(0.0)
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// One-vs-rest recall and true-negative rate of class `c`, `None` when
/// undefined.
pub fn one_vs_rest(cm: &ConfusionMatrix, c: usize) -> (Option<f64>, Option<f64>) {
    let rows = cm.row_sums();
    let cols = cm.col_sums();
    let total = cm.total();
    let tp = cm.get(c, c);
    let fp = cols[c] - tp;
    let negatives = total - rows[c];
    (ratio(tp, rows[c]), ratio(negatives - fp, negatives))
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Macro-averaged one-vs-rest sensitivity and specificity over the classes
/// present in the truth. Undefined terms are skipped; 0 when none remain.
pub fn macro_sens_spec(cm: &ConfusionMatrix) -> (f64, f64) {
    let rows = cm.row_sums();
    let present: Vec<usize> = (0..cm.classes()).filter(|&c| rows[c] > 0).collect();
    let pairs: Vec<_> = present.iter().map(|&c| one_vs_rest(cm, c)).collect();
    (
        mean(pairs.iter().filter_map(|p| p.0)),
        mean(pairs.iter().filter_map(|p| p.1)),
    )
}

/// Micro-averaged one-vs-rest sensitivity and specificity (pooled counts).
pub fn micro_sens_spec(cm: &ConfusionMatrix) -> (f64, f64) {
    let total = cm.total();
    let tp = cm.trace();
    let fp = total - tp;
    let k = cm.classes() as u64;
    let tn = total * k.saturating_sub(1) - fp;
    (ratio(tp, total).unwrap_or(0.0), ratio(tn, tn + fp).unwrap_or(0.0))
}

/// Sensitivity and specificity of class 1 in a 2×2 matrix.
pub fn binary_sens_spec(cm: &ConfusionMatrix) -> Result<(f64, f64)> {
    if cm.classes() != 2 {
        return Err(Error::contract("binary rates need a 2×2 matrix"));
    }
    let (sens, spec) = one_vs_rest(cm, 1);
    Ok((sens.unwrap_or(0.0), spec.unwrap_or(0.0)))
}

/// Generalised (covariance-form) Matthews correlation; 0 when undefined.
pub fn mcc(cm: &ConfusionMatrix) -> f64 {
    let s = cm.total() as f64;
    let c = cm.trace() as f64;
    let t: Vec<f64> = cm.row_sums().into_iter().map(|v| v as f64).collect();
    let p: Vec<f64> = cm.col_sums().into_iter().map(|v| v as f64).collect();
    let pt: f64 = p.iter().zip(&t).map(|(a, b)| a * b).sum();
    let pp: f64 = p.iter().map(|a| a * a).sum();
    let tt: f64 = t.iter().map(|a| a * a).sum();
    let den = ((s * s - pp) * (s * s - tt)).sqrt();
    if den == 0.0 {
        0.0
    } else {
        ((c * s - pt) / den).clamp(-1.0, 1.0)
    }
}
