use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{BinaryTask, MetricsReport, TASK_CADRADS};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::phantom::labels::SegmentId;

/// `metrics.csv` body: per-fold rows then `mean` rows.
pub fn metrics_csv(report: &MetricsReport) -> String {
    let mut out = String::from("task,fold,metric,value\n");
    for f in &report.folds {
        for (task, m) in &f.tasks {
            for (k, v) in m.scalars() {
                let _ = writeln!(out, "{task},{},{k},{v}", f.fold);
            }
        }
    }
    for (task, m) in &report.mean {
        for (k, v) in &m.scalars {
            let _ = writeln!(out, "{task},mean,{k},{v}");
        }
    }
    out
}

pub fn write_metrics_csv(path: &Path, report: &MetricsReport) -> Result<()> {
    write_atomic(path, metrics_csv(report).as_bytes())
}

/// Confusion matrices, ROC point files and the attribution table. Returns
/// the files written.
pub fn write_fold_artifacts(dir: &Path, report: &MetricsReport) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut put = |name: String, body: String| -> Result<()> {
        let p = dir.join(name);
        write_atomic(&p, body.as_bytes())?;
        written.push(p);
        Ok(())
    };
    let mut attribution = String::from("fold,patient_id,segment,count\n");
    for f in &report.folds {
        for (task, m) in &f.tasks {
            let k = m.confusion.classes();
            let mut cm = String::from("true");
            for c in 0..k {
                let _ = write!(cm, ",pred_{c}");
            }
            cm.push('\n');
            for r in 0..k {
                let _ = write!(cm, "{r}");
                for c in 0..k {
                    let _ = write!(cm, ",{}", m.confusion.get(r, c));
                }
                cm.push('\n');
            }
            put(format!("confusion_{task}_{}.csv", f.fold), cm)?;
            if let Some(roc) = &m.roc {
                let mut body = String::from("fpr,tpr,threshold\n");
                for p in &roc.points {
                    let _ = writeln!(body, "{},{},{}", p.fpr, p.tpr, p.threshold);
                }
                put(format!("roc_{task}_{}.csv", f.fold), body)?;
            }
        }
        for (id, counts) in &f.attribution {
            for s in SegmentId::ALL {
                let _ = writeln!(attribution, "{},{id},{s},{}", f.fold, counts[s.index()]);
            }
        }
    }
    for (task, m) in &report.mean {
        if !m.roc.is_empty() {
            let mut body = String::from("fpr,tpr\n");
            for (x, y) in &m.roc {
                let _ = writeln!(body, "{x},{y}");
            }
            put(format!("roc_{task}_mean.csv"), body)?;
        }
    }
    put("attribution.csv".to_string(), attribution)?;
    Ok(written)
}

/// One configuration's line in the summary tables: fold-mean metrics by
/// task and name.
pub struct SummaryRow {
    pub name: String,
    pub means: BTreeMap<String, BTreeMap<String, f64>>,
}

impl SummaryRow {
    pub fn from_report(name: impl Into<String>, report: &MetricsReport) -> Self {
        let means = report
            .mean
            .iter()
            .map(|(task, m)| {
                (
                    task.clone(),
                    m.scalars.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
                )
            })
            .collect();
        SummaryRow {
            name: name.into(),
            means,
        }
    }

    /// Reads the `mean` rows back out of a `metrics.csv` body.
    pub fn from_metrics_csv(name: impl Into<String>, csv: &str) -> Result<Self> {
        let mut lines = csv.lines();
        if lines.next() != Some("task,fold,metric,value") {
            return Err(Error::format(0, "metrics file lacks the task,fold,metric,value header"));
        }
        let mut means: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        let mut offset = 0u64;
        for line in csv.lines() {
            let fields: Vec<&str> = line.split(',').collect();
            if offset > 0 {
                let [task, fold, metric, value] = fields[..] else {
                    return Err(Error::format(offset, format!("malformed metrics row {line:?}")));
                };
                if fold == "mean" {
                    let v: f64 = value
                        .parse()
                        .map_err(|_| Error::format(offset, format!("bad metric value {value:?}")))?;
                    means.entry(task.to_string()).or_default().insert(metric.to_string(), v);
                }
            }
            offset += line.len() as u64 + 1;
        }
        Ok(SummaryRow {
            name: name.into(),
            means,
        })
    }

    fn get(&self, task: &str, metric: &str) -> Option<f64> {
        self.means.get(task)?.get(metric).copied()
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"))
}

/// Plain-text tables: six-class performance, then rule-out and hold-out.
pub fn format_summary(rows: &[SummaryRow]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(14);
    let mut out = String::new();
    let _ = writeln!(out, "Six-class CAD-RADS (mean over folds)");
    let _ = writeln!(
        out,
        "{:<width$}  {:>8}  {:>11}  {:>11}  {:>6}",
        "Configuration", "Accuracy", "Sensitivity", "Specificity", "MCC"
    );
    for r in rows {
        let m = |k| cell(r.get(TASK_CADRADS, k));
        let _ = writeln!(
            out,
            "{:<width$}  {:>8}  {:>11}  {:>11}  {:>6}",
            r.name,
            m("accuracy"),
            m("sensitivity"),
            m("specificity"),
            m("mcc")
        );
    }
    for task in [
        BinaryTask::RuleOut,
        BinaryTask::HoldOut,
        BinaryTask::SignificantStenosis,
    ] {
        let title = match task {
            BinaryTask::RuleOut => "Rule-out (CAD-RADS 0 vs 1-5)",
            BinaryTask::HoldOut => "Hold-out (CAD-RADS 0-2 vs 3-5)",
            BinaryTask::SignificantStenosis => "Significant stenosis (segment, >=50%)",
        };
        let _ = writeln!(out, "\n{title}");
        let _ = writeln!(
            out,
            "{:<width$}  {:>8}  {:>11}  {:>11}  {:>6}  {:>6}",
            "Configuration", "Accuracy", "Sensitivity", "Specificity", "MCC", "AUC"
        );
        for r in rows {
            let m = |k| cell(r.get(task.name(), k));
            let _ = writeln!(
                out,
                "{:<width$}  {:>8}  {:>11}  {:>11}  {:>6}  {:>6}",
                r.name,
                m("accuracy"),
                m("sensitivity"),
                m("specificity"),
                m("mcc"),
                m("auc")
            );
        }
    }
    out
}
