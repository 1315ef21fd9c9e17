use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores at or above this value are called positive.
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// Sweeps every distinct score from high to low; AUC by the trapezoidal rule.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::dim(format!(
            "{} scores against {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Numeric(format!("score {s} is NaN")));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedAuc(format!(
            "{pos} positives and {neg} negatives; both classes are required"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let prev = points.last().expect("seeded");
        let p = RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold,
        };
        auc += (p.fpr - prev.fpr) * (p.tpr + prev.tpr) / 2.0;
        points.push(p);
    }
    Ok(RocCurve { points, auc })
}

/// TPR at `fpr`: linear between sweep points, the upper end of any vertical
/// run.
pub fn tpr_at(curve: &RocCurve, fpr: f64) -> f64 {
    let pts = &curve.points;
    let mut best = 0.0f64;
    for w in pts.windows(2) {
        let (a, b) = (w[0], w[1]);
        if fpr >= a.fpr && fpr <= b.fpr {
            let v = if b.fpr == a.fpr {
                b.tpr
            } else {
                a.tpr + (b.tpr - a.tpr) * (fpr - a.fpr) / (b.fpr - a.fpr)
            };
            best = best.max(v);
        }
    }
    best
}

/// Vertical average of TPR on an evenly spaced FPR grid of `grid` points.
pub fn mean_roc(curves: &[RocCurve], grid: usize) -> Vec<(f64, f64)> {
    if curves.is_empty() || grid < 2 {
        return Vec::new();
    }
    (0..grid)
        .map(|i| {
            let fpr = i as f64 / (grid - 1) as f64;
            let tpr = curves.iter().map(|c| tpr_at(c, fpr)).sum::<f64>() / curves.len() as f64;
            (fpr, tpr)
        })
        .collect()
}

pub const MEAN_ROC_GRID: usize = 101;
