//! Distribution-matched binning, classification metrics and the clinical
//! binary tasks.

mod binning;
mod metrics;
mod report;
mod roc;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use binning::{apply_bins, bin_of, fit_thresholds, fit_thresholds_lenient, BinningThresholds};
pub use metrics::{
    accuracy, binary_sens_spec, confusion, macro_sens_spec, mcc, micro_sens_spec, one_vs_rest, ConfusionMatrix,
};
pub use report::{format_summary, metrics_csv, write_fold_artifacts, write_metrics_csv, SummaryRow};
pub use roc::{mean_roc, roc_auc, tpr_at, RocCurve, RocPoint, MEAN_ROC_GRID};

use crate::error::{Error, Result};
use crate::phantom::labels::SEGMENT_COUNT;
use crate::phantom::PatientLabels;

/// Binary decisions derived from the ordinal labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BinaryTask {
    /// CAD-RADS 0 against 1–5.
    RuleOut,
    /// CAD-RADS 0–2 against 3–5.
    HoldOut,
    /// Per segment, stenosis class ≥ 3 (≥ 50 %).
    SignificantStenosis,
}

impl BinaryTask {
    pub const ALL: [BinaryTask; 3] = [
        BinaryTask::RuleOut,
        BinaryTask::HoldOut,
        BinaryTask::SignificantStenosis,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BinaryTask::RuleOut => "rule_out",
            BinaryTask::HoldOut => "hold_out",
            BinaryTask::SignificantStenosis => "significant_stenosis",
        }
    }

    pub fn is_positive(self, class: usize) -> bool {
        match self {
            BinaryTask::RuleOut => class >= 1,
            BinaryTask::HoldOut | BinaryTask::SignificantStenosis => class >= 3,
        }
    }
}

impl fmt::Display for BinaryTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BinaryTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown binary task {s:?}")))
    }
}

/// Positive flags for `classes`, scores passed through unchanged.
pub fn binarize(task: BinaryTask, classes: &[usize], scores: &[f64]) -> Result<(Vec<bool>, Vec<f64>)> {
    if classes.len() != scores.len() {
        return Err(Error::dim(format!(
            "{} classes against {} scores",
            classes.len(),
            scores.len()
        )));
    }
    Ok((classes.iter().map(|&c| task.is_positive(c)).collect(), scores.to_vec()))
}

/// Severest segment score, the patient score of the stenosis-only baseline.
pub fn patient_level_baseline(segment_scores: &[f64]) -> Result<f64> {
    if segment_scores.len() != SEGMENT_COUNT {
        return Err(Error::dim(format!(
            "baseline needs {SEGMENT_COUNT} segment scores, got {}",
            segment_scores.len()
        )));
    }
    Ok(segment_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// Which network output acts as the patient CAD-RADS score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PatientScore {
    CadradsHead,
    MaxSegment,
}

/// Binning fitted on a fold's fit split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSet {
    pub patient_score: PatientScore,
    pub cadrads: BinningThresholds,
    pub calc: Option<BinningThresholds>,
    pub segment: Option<BinningThresholds>,
}

/// Continuous outputs of one patient plus the labels they are judged by.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredPatient {
    pub id: u64,
    pub labels: PatientLabels,
    pub segment_scores: [f64; SEGMENT_COUNT],
    pub cadrads_score: f64,
    pub calc_score: f64,
    pub attribution: [usize; SEGMENT_COUNT],
}

impl ScoredPatient {
    pub fn patient_score(&self, kind: PatientScore) -> f64 {
        match kind {
            PatientScore::CadradsHead => self.cadrads_score,
            PatientScore::MaxSegment => self.segment_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Fits every threshold a model with the given outputs needs.
pub fn fit_threshold_set(
    patients: &[ScoredPatient],
    kind: PatientScore,
    with_calc: bool,
    with_segments: bool,
    fitted_on: &str,
) -> Result<ThresholdSet> {
    let scores: Vec<f64> = patients.iter().map(|p| p.patient_score(kind)).collect();
    let cad: Vec<usize> = patients.iter().map(|p| p.labels.cad_rads.value() as usize).collect();
    let cadrads = fit_thresholds_lenient(&scores, &cad, 6, fitted_on)?;
    let calc = if with_calc {
        let s: Vec<f64> = patients.iter().map(|p| p.calc_score).collect();
        let l: Vec<usize> = patients.iter().map(|p| p.labels.calc_grade.value() as usize).collect();
        Some(fit_thresholds_lenient(&s, &l, 5, fitted_on)?)
    } else {
        None
    };
    let segment = if with_segments {
        let (s, l) = segment_pairs(patients);
        Some(fit_thresholds_lenient(&s, &l, 6, fitted_on)?)
    } else {
        None
    };
    Ok(ThresholdSet {
        patient_score: kind,
        cadrads,
        calc,
        segment,
    })
}

fn segment_pairs(patients: &[ScoredPatient]) -> (Vec<f64>, Vec<usize>) {
    let mut s = Vec::with_capacity(patients.len() * SEGMENT_COUNT);
    let mut l = Vec::with_capacity(patients.len() * SEGMENT_COUNT);
    for p in patients {
        s.extend_from_slice(&p.segment_scores);
        l.extend(p.labels.segment_labels.iter().map(|c| c.value() as usize));
    }
    (s, l)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    /// Pooled one-vs-rest rates; multiclass tasks only.
    pub sensitivity_micro: Option<f64>,
    pub specificity_micro: Option<f64>,
    pub mcc: f64,
    /// Binary tasks only, from continuous scores.
    pub auc: Option<f64>,
    pub confusion: ConfusionMatrix,
    pub roc: Option<RocCurve>,
}

impl TaskMetrics {
    pub fn multiclass(truth: &[usize], pred: &[usize], k: usize) -> Result<Self> {
        let cm = confusion(truth, pred, k)?;
        let (sens, spec) = macro_sens_spec(&cm);
        let (sm, pm) = micro_sens_spec(&cm);
        Ok(TaskMetrics {
            accuracy: accuracy(&cm),
            sensitivity: sens,
            specificity: spec,
            sensitivity_micro: Some(sm),
            specificity_micro: Some(pm),
            mcc: mcc(&cm),
            auc: None,
            confusion: cm,
            roc: None,
        })
    }

    /// Binary task from binned classes, AUC from the continuous scores when
    /// both outcomes occur.
    pub fn binary(task: BinaryTask, truth: &[usize], pred: &[usize], scores: &[f64]) -> Result<Self> {
        let (t, s) = binarize(task, truth, scores)?;
        let p: Vec<usize> = pred.iter().map(|&c| usize::from(task.is_positive(c))).collect();
        let t_idx: Vec<usize> = t.iter().map(|&b| usize::from(b)).collect();
        let cm = confusion(&t_idx, &p, 2)?;
        let (sens, spec) = binary_sens_spec(&cm)?;
        let roc = match roc_auc(&s, &t) {
            Ok(r) => Some(r),
            Err(Error::UndefinedAuc(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(TaskMetrics {
            accuracy: accuracy(&cm),
            sensitivity: sens,
            specificity: spec,
            sensitivity_micro: None,
            specificity_micro: None,
            mcc: mcc(&cm),
            auc: roc.as_ref().map(|r| r.auc),
            confusion: cm,
            roc,
        })
    }

    /// Named scalar values in reporting order; absent values are skipped.
    pub fn scalars(&self) -> Vec<(&'static str, f64)> {
        let mut v = vec![
            ("accuracy", self.accuracy),
            ("sensitivity", self.sensitivity),
            ("specificity", self.specificity),
        ];
        if let Some(x) = self.sensitivity_micro {
            v.push(("sensitivity_micro", x));
        }
        if let Some(x) = self.specificity_micro {
            v.push(("specificity_micro", x));
        }
        v.push(("mcc", self.mcc));
        if let Some(x) = self.auc {
            v.push(("auc", x));
        }
        v
    }
}

pub const TASK_CADRADS: &str = "cadrads";
pub const TASK_CALC: &str = "calc";

#[derive(Clone, Debug, PartialEq)]
pub struct FoldReport {
    pub fold: usize,
    pub tasks: BTreeMap<String, TaskMetrics>,
    /// Patient id and per-segment attribution counts.
    pub attribution: Vec<(u64, [usize; SEGMENT_COUNT])>,
}

/// Scores held-out patients with a fold's thresholds.
pub fn evaluate_fold(fold: usize, patients: &[ScoredPatient], thresholds: &ThresholdSet) -> Result<FoldReport> {
    if patients.is_empty() {
        return Err(Error::contract("no patients to evaluate"));
    }
    let mut tasks = BTreeMap::new();
    let scores: Vec<f64> = patients
        .iter()
        .map(|p| p.patient_score(thresholds.patient_score))
        .collect();
    let truth: Vec<usize> = patients.iter().map(|p| p.labels.cad_rads.value() as usize).collect();
    let pred = thresholds.cadrads.apply(&scores);
    tasks.insert(TASK_CADRADS.to_string(), TaskMetrics::multiclass(&truth, &pred, 6)?);
    for task in [BinaryTask::RuleOut, BinaryTask::HoldOut] {
        tasks.insert(
            task.name().to_string(),
            TaskMetrics::binary(task, &truth, &pred, &scores)?,
        );
    }
    if let Some(t) = &thresholds.calc {
        let s: Vec<f64> = patients.iter().map(|p| p.calc_score).collect();
        let l: Vec<usize> = patients.iter().map(|p| p.labels.calc_grade.value() as usize).collect();
        tasks.insert(TASK_CALC.to_string(), TaskMetrics::multiclass(&l, &t.apply(&s), 5)?);
    }
    if let Some(t) = &thresholds.segment {
        let (s, l) = segment_pairs(patients);
        let task = BinaryTask::SignificantStenosis;
        tasks.insert(
            task.name().to_string(),
            TaskMetrics::binary(task, &l, &t.apply(&s), &s)?,
        );
    }
    Ok(FoldReport {
        fold,
        tasks,
        attribution: patients.iter().map(|p| (p.id, p.attribution)).collect(),
    })
}

/// Fold-averaged scalars and the vertically averaged ROC of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanMetrics {
    pub scalars: Vec<(&'static str, f64)>,
    pub roc: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub folds: Vec<FoldReport>,
    pub mean: BTreeMap<String, MeanMetrics>,
}

impl MetricsReport {
    pub fn from_folds(folds: Vec<FoldReport>) -> Self {
        let mut mean = BTreeMap::new();
        let names: Vec<String> = folds
            .first()
            .map(|f| f.tasks.keys().cloned().collect())
            .unwrap_or_default();
        for name in names {
            let per: Vec<&TaskMetrics> = folds.iter().filter_map(|f| f.tasks.get(&name)).collect();
            let mut sums: Vec<(&'static str, f64, usize)> = Vec::new();
            for m in &per {
                for (k, v) in m.scalars() {
                    match sums.iter_mut().find(|e| e.0 == k) {
                        Some(e) => {
                            e.1 += v;
                            e.2 += 1;
                        }
                        None => sums.push((k, v, 1)),
                    }
                }
            }
            let curves: Vec<RocCurve> = per.iter().filter_map(|m| m.roc.clone()).collect();
            mean.insert(
                name,
                MeanMetrics {
                    scalars: sums.into_iter().map(|(k, s, n)| (k, s / n as f64)).collect(),
                    roc: mean_roc(&curves, MEAN_ROC_GRID),
                },
            );
        }
        MetricsReport { folds, mean }
    }

    pub fn mean_of(&self, task: &str, metric: &str) -> Option<f64> {
        self.mean
            .get(task)?
            .scalars
            .iter()
            .find(|(k, _)| *k == metric)
            .map(|(_, v)| *v)
    }

    pub fn per_fold(&self, task: &str, metric: &str) -> Vec<f64> {
        self.folds
            .iter()
            .filter_map(|f| f.tasks.get(task))
            .filter_map(|m| m.scalars().into_iter().find(|(k, _)| *k == metric).map(|(_, v)| v))
            .collect()
    }
}
