use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cut points turning continuous scores into `cuts.len() + 1` ordinal classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinningThresholds {
    pub cuts: Vec<f64>,
    pub fitted_on: String,
}

impl BinningThresholds {
    pub fn classes(&self) -> usize {
        self.cuts.len() + 1
    }

    pub fn apply(&self, scores: &[f64]) -> Vec<usize> {
        apply_bins(scores, &self.cuts)
    }

    pub fn bin(&self, score: f64) -> usize {
        bin_of(score, &self.cuts)
    }
}

fn class_counts(labels: &[usize], k: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0; k];
    for &l in labels {
        if l >= k {
            return Err(Error::contract(format!("label {l} outside 0..{k}")));
        }
        counts[l] += 1;
    }
    Ok(counts)
}

fn validate_scores(scores: &[f64], labels: &[usize], k: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::contract("binning needs at least two classes"));
    }
    if scores.len() != labels.len() {
        return Err(Error::dim(format!(
            "{} scores against {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!("score {s} is not finite")));
    }
    Ok(())
}

fn cuts_from(sorted: &[f64], counts: &[usize]) -> Vec<f64> {
    let mut cuts = Vec::with_capacity(counts.len() - 1);
    let mut rank = 0;
    for &c in &counts[..counts.len() - 1] {
        rank += c;
        let cut = if rank == 0 {
            f64::NEG_INFINITY
        } else if rank == sorted.len() {
            f64::INFINITY
        } else {
            0.5 * (sorted[rank - 1] + sorted[rank])
        };
        cuts.push(cut);
    }
    cuts
}

/// Distribution-matched thresholds: the cut after the first `n_0 + … + n_j`
/// sorted scores sits midway between the two scores straddling it. Scores
/// equal to a cut bin below it.
pub fn fit_thresholds(scores: &[f64], labels: &[usize], k: usize, fitted_on: &str) -> Result<BinningThresholds> {
    validate_scores(scores, labels, k)?;
    let counts = class_counts(labels, k)?;
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::ThresholdFit(format!(
            "class {empty} has no samples among {} labels",
            labels.len()
        )));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(BinningThresholds {
        cuts: cuts_from(&sorted, &counts),
        fitted_on: fitted_on.to_string(),
    })
}

/// [`fit_thresholds`] that tolerates empty classes: a cut with no scores
/// below it is −∞, one with every score below it is +∞, and an empty middle
/// class gets two equal cuts.
pub fn fit_thresholds_lenient(
    scores: &[f64],
    labels: &[usize],
    k: usize,
    fitted_on: &str,
) -> Result<BinningThresholds> {
    validate_scores(scores, labels, k)?;
    if scores.is_empty() {
        return Err(Error::ThresholdFit("no scores to fit".into()));
    }
    let counts = class_counts(labels, k)?;
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(BinningThresholds {
        cuts: cuts_from(&sorted, &counts),
        fitted_on: fitted_on.to_string(),
    })
}

/// Number of cuts strictly below `score`.
pub fn bin_of(score: f64, cuts: &[f64]) -> usize {
    cuts.iter().filter(|&&t| t < score).count()
}

pub fn apply_bins(scores: &[f64], cuts: &[f64]) -> Vec<usize> {
    scores.iter().map(|&s| bin_of(s, cuts)).collect()
}
