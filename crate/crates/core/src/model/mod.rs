//! The scoring network: a shared per-segment feature extractor, a
//! per-segment stenosis head, and patient heads on the feature-wise maximum
//! over segments.

mod checkpoint;
mod config;
mod forward;
mod params;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointMeta, ThresholdSet};
pub use config::{LossWeights, ModelConfig};
pub use forward::{extract_features, forward_graph, multitask_loss, stenosis_head, Graph, ParamVars, Targets};
pub use params::{ConvBlock, Dense, Extractor, Head, ModelParams, ParamGroup};

use crate::autodiff::{Mode, RunningStats, Tape, Tensor};
use crate::error::{Error, Result};
use crate::phantom::labels::{SegmentId, SEGMENT_COUNT};
use crate::phantom::preprocess::{write_planes, AugmentDraw, PlaneView, MPR_LENGTH, MPR_SIZE};
use crate::phantom::{PatientLabels, PatientSample};

/// Per-patient network output.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub segment_scores: [f64; SEGMENT_COUNT],
    pub cadrads_score: f64,
    pub calc_score: f64,
    /// `11×F`.
    pub segment_features: Vec<Vec<f64>>,
    /// Segment index attaining each pooled feature.
    pub pooled_feature_argmax: Vec<usize>,
}

impl ForwardOutput {
    pub fn pooled_features(&self) -> Vec<f64> {
        self.pooled_feature_argmax
            .iter()
            .enumerate()
            .map(|(f, &s)| self.segment_features[s][f])
            .collect()
    }

    /// Maximum segment score, the patient score of the stenosis-only baseline.
    pub fn max_segment_score(&self) -> f64 {
        self.segment_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Stacks plane views into one `(B·11)×P×H×W` input.
pub fn stack_views<'a>(views: impl IntoIterator<Item = &'a PlaneView>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut count = 0;
    let mut shape: Option<Vec<usize>> = None;
    for v in views {
        let s = v.planes.shape();
        match &shape {
            None => shape = Some(s.to_vec()),
            Some(prev) if prev != s => return Err(Error::dim(format!("plane views {prev:?} and {s:?} differ"))),
            _ => {}
        }
        data.extend_from_slice(v.planes.data());
        count += 1;
    }
    let Some(s) = shape else {
        return Err(Error::dim("no plane views"));
    };
    let mut full = vec![count];
    full.extend(s);
    Tensor::new(full, data)
}

/// Slices `samples` with per-segment draws straight into a batched input.
pub fn assemble_input(
    samples: &[&PatientSample],
    draws: &[[AugmentDraw; SEGMENT_COUNT]],
    config: &ModelConfig,
) -> Result<Tensor> {
    if samples.len() != draws.len() {
        return Err(Error::contract("one draw set per patient is required"));
    }
    let per = patient_input_len(config)?;
    let mut data = vec![0.0; samples.len() * per];
    for ((s, d), out) in samples.iter().zip(draws).zip(data.chunks_mut(per)) {
        write_patient_input(s, d, config, out)?;
    }
    let [p, h, w] = config.view_shape();
    Tensor::new(vec![samples.len() * SEGMENT_COUNT, p, h, w], data)
}

/// Values one patient occupies in a batched input.
pub fn patient_input_len(config: &ModelConfig) -> Result<usize> {
    let [p, h, w] = config.view_shape();
    if (h, w) != (MPR_LENGTH, MPR_SIZE) {
        return Err(Error::config(format!(
            "model expects {h}×{w} views but stacks slice to {MPR_LENGTH}×{MPR_SIZE}"
        )));
    }
    Ok(SEGMENT_COUNT * p * h * w)
}

/// Writes the 11 sliced views of one patient into `out`.
pub fn write_patient_input(
    sample: &PatientSample,
    draws: &[AugmentDraw; SEGMENT_COUNT],
    config: &ModelConfig,
    out: &mut [f64],
) -> Result<()> {
    let per = patient_input_len(config)?;
    if out.len() != per {
        return Err(Error::dim(format!(
            "patient slot holds {} values, need {per}",
            out.len()
        )));
    }
    let p = config.input_planes;
    for ((stack, draw), slot) in sample
        .segments
        .iter()
        .zip(draws)
        .zip(out.chunks_mut(per / SEGMENT_COUNT))
    {
        write_planes(stack, draw.angle_offset, p, draw.shift, slot)?;
    }
    Ok(())
}

impl ModelParams {
    /// Inference without touching running statistics.
    pub fn predict(&self, input: &Tensor) -> Result<Vec<ForwardOutput>> {
        let mut stats = self.running_stats();
        self.run(input, Mode::Eval, &mut stats)
    }

    /// Forward pass over one patient's 11 views. Train mode folds the batch
    /// statistics of those 11 segments into the running averages.
    pub fn forward(&mut self, views: &[PlaneView], mode: Mode) -> Result<ForwardOutput> {
        if views.len() != SEGMENT_COUNT {
            return Err(Error::contract(format!(
                "forward needs all {SEGMENT_COUNT} segments, got {}",
                views.len()
            )));
        }
        let input = stack_views(views)?;
        let mut stats = self.running_stats();
        let out = self.run(&input, mode, &mut stats)?;
        for (b, s) in self.extractor.blocks.iter_mut().zip(stats) {
            b.stats = s;
        }
        Ok(out.into_iter().next().expect("one patient"))
    }

    pub fn running_stats(&self) -> Vec<RunningStats> {
        self.extractor.blocks.iter().map(|b| b.stats.clone()).collect()
    }

    fn run(&self, input: &Tensor, mode: Mode, stats: &mut [RunningStats]) -> Result<Vec<ForwardOutput>> {
        self.check_input(input.shape())?;
        let mut tape = Tape::new();
        let vars = ParamVars::bind(&mut tape, self);
        let x = tape.constant(input.detached());
        let g = forward_graph(&mut tape, &vars, stats, x, mode)?;
        Ok(outputs(&tape, &g))
    }

    pub(crate) fn check_input(&self, shape: &[usize]) -> Result<()> {
        let v = self.config.view_shape();
        if shape.len() != 4 || shape[1..] != v {
            return Err(Error::dim(format!("input {shape:?} does not match N×{v:?}")));
        }
        Ok(())
    }
}

/// Unpacks a recorded graph into per-patient outputs.
pub fn outputs(tape: &Tape, g: &Graph) -> Vec<ForwardOutput> {
    let seg = tape.value(g.segment_scores).data();
    let feat = tape.value(g.features).data();
    let f = tape.shape(g.features)[1];
    let cad = tape.value(g.cadrads).data();
    let calc = tape.value(g.calc).data();
    (0..g.batch)
        .map(|b| ForwardOutput {
            segment_scores: std::array::from_fn(|s| seg[b * SEGMENT_COUNT + s]),
            cadrads_score: cad[b],
            calc_score: calc[b],
            segment_features: (0..SEGMENT_COUNT)
                .map(|s| feat[(b * SEGMENT_COUNT + s) * f..(b * SEGMENT_COUNT + s + 1) * f].to_vec())
                .collect(),
            pooled_feature_argmax: g.argmax[b * f..(b + 1) * f].to_vec(),
        })
        .collect()
}

/// Number of pooled features each segment supplied.
pub fn explain(output: &ForwardOutput) -> [usize; SEGMENT_COUNT] {
    let mut counts = [0; SEGMENT_COUNT];
    for &s in &output.pooled_feature_argmax {
        counts[s] += 1;
    }
    counts
}

/// Segments by descending attribution count, lower index first on ties.
pub fn attribution_ranking(counts: &[usize; SEGMENT_COUNT]) -> Vec<(SegmentId, usize)> {
    let mut v: Vec<(SegmentId, usize)> = SegmentId::ALL.iter().map(|&s| (s, counts[s.index()])).collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    v
}

/// Squared errors of one patient: CAD-RADS, mean over segments, calcium.
pub fn loss_terms(
    segment_scores: &[f64; SEGMENT_COUNT],
    cadrads_score: f64,
    calc_score: f64,
    labels: &PatientLabels,
) -> [f64; 3] {
    let sten: f64 = segment_scores
        .iter()
        .zip(&labels.segment_labels)
        .map(|(s, c)| (s - f64::from(c.value())).powi(2))
        .sum();
    [
        (cadrads_score - f64::from(labels.cad_rads.value())).powi(2),
        sten / SEGMENT_COUNT as f64,
        (calc_score - f64::from(labels.calc_grade.value())).powi(2),
    ]
}

/// Weighted sum of per-term means; zero-weight terms are left out.
pub fn combine_terms(mean_terms: [f64; 3], weights: &LossWeights) -> f64 {
    [weights.cadrads, weights.stenosis, weights.calc]
        .iter()
        .zip(mean_terms)
        .filter(|(w, _)| **w != 0.0)
        .map(|(w, l)| w * l)
        .sum()
}

/// The training loss evaluated on plain values.
pub fn loss_value(outputs: &[ForwardOutput], labels: &[PatientLabels], weights: &LossWeights) -> Result<f64> {
    weights.validate()?;
    if outputs.len() != labels.len() || outputs.is_empty() {
        return Err(Error::dim(format!(
            "{} outputs against {} label sets",
            outputs.len(),
            labels.len()
        )));
    }
    let mut sums = [0.0; 3];
    for (o, l) in outputs.iter().zip(labels) {
        let t = loss_terms(&o.segment_scores, o.cadrads_score, o.calc_score, l);
        for (s, v) in sums.iter_mut().zip(t) {
            *s += v;
        }
    }
    let n = outputs.len() as f64;
    Ok(combine_terms(sums.map(|s| s / n), weights))
}
