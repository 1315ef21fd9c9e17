use super::params::{Dense, Head, ModelParams, ParamGroup};
use crate::autodiff::{Mode, RunningStats, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::phantom::labels::SEGMENT_COUNT;
use crate::phantom::PatientLabels;

#[derive(Clone, Copy, Debug)]
struct DenseVars {
    weight: Var,
    bias: Var,
}

#[derive(Clone, Copy, Debug)]
struct HeadVars {
    hidden: DenseVars,
    out: DenseVars,
}

#[derive(Clone, Copy, Debug)]
struct BlockVars {
    kernel: Var,
    bias: Var,
    gamma: Var,
    beta: Var,
}

/// Parameters recorded as leaves of one tape.
#[derive(Clone, Debug)]
pub struct ParamVars {
    blocks: Vec<BlockVars>,
    fc: DenseVars,
    stenosis: HeadVars,
    cadrads: HeadVars,
    calc: HeadVars,
}

fn leaf(tape: &mut Tape, t: &Tensor) -> Var {
    let mut copy = t.detached();
    copy.set_requires_grad(t.requires_grad());
    tape.leaf(copy)
}

fn bind_dense(tape: &mut Tape, d: &Dense) -> DenseVars {
    DenseVars {
        weight: leaf(tape, &d.weight),
        bias: leaf(tape, &d.bias),
    }
}

fn bind_head(tape: &mut Tape, h: &Head) -> HeadVars {
    HeadVars {
        hidden: bind_dense(tape, &h.hidden),
        out: bind_dense(tape, &h.out),
    }
}

impl ParamVars {
    pub fn bind(tape: &mut Tape, params: &ModelParams) -> Self {
        let blocks = params
            .extractor
            .blocks
            .iter()
            .map(|b| BlockVars {
                kernel: leaf(tape, &b.kernel),
                bias: leaf(tape, &b.bias),
                gamma: leaf(tape, &b.gamma),
                beta: leaf(tape, &b.beta),
            })
            .collect();
        ParamVars {
            blocks,
            fc: bind_dense(tape, &params.extractor.fc),
            stenosis: bind_head(tape, &params.stenosis_head),
            cadrads: bind_head(tape, &params.cadrads_head),
            calc: bind_head(tape, &params.calc_head),
        }
    }

    /// Leaves of `g` in the order of [`ModelParams::group_named`].
    pub fn group(&self, g: ParamGroup) -> Vec<Var> {
        let head = |h: &HeadVars| vec![h.hidden.weight, h.hidden.bias, h.out.weight, h.out.bias];
        match g {
            ParamGroup::Extractor => {
                let mut v: Vec<Var> = self
                    .blocks
                    .iter()
                    .flat_map(|b| [b.kernel, b.bias, b.gamma, b.beta])
                    .collect();
                v.extend([self.fc.weight, self.fc.bias]);
                v
            }
            ParamGroup::StenosisHead => head(&self.stenosis),
            ParamGroup::CadradsHead => head(&self.cadrads),
            ParamGroup::CalcHead => head(&self.calc),
        }
    }

    /// Adds the tape's leaf gradients into the matching parameter tensors.
    pub fn collect_grads(&self, tape: &Tape, params: &mut ModelParams) -> Result<()> {
        for g in ParamGroup::ALL {
            for (v, t) in self.group(g).into_iter().zip(params.group_mut(g)) {
                if let Some(grad) = tape.grad(v) {
                    t.accumulate_grad(grad)?;
                }
            }
        }
        Ok(())
    }
}

fn dense(tape: &mut Tape, x: Var, d: DenseVars) -> Result<Var> {
    tape.fully_connected(x, d.weight, d.bias)
}

fn head(tape: &mut Tape, x: Var, h: HeadVars) -> Result<Var> {
    let hid = dense(tape, x, h.hidden)?;
    let act = tape.relu(hid);
    dense(tape, act, h.out)
}

/// Shared feature extractor on `N×P×H×W`; returns `N×F`.
pub fn extract_features(
    tape: &mut Tape,
    vars: &ParamVars,
    stats: &mut [RunningStats],
    input: Var,
    mode: Mode,
) -> Result<Var> {
    let mut x = input;
    for (b, st) in vars.blocks.iter().zip(stats.iter_mut()) {
        let c = tape.conv2d(x, b.kernel, b.bias)?;
        let n = tape.batch_norm(c, b.gamma, b.beta, st, mode)?;
        let r = tape.relu(n);
        x = tape.max_pool2d(r)?;
    }
    let pooled = tape.global_max_pool_spatial(x)?;
    dense(tape, pooled, vars.fc)
}

/// Per-segment score for `N×F` features; returns `N×1`.
pub fn stenosis_head(tape: &mut Tape, vars: &ParamVars, features: Var) -> Result<Var> {
    head(tape, features, vars.stenosis)
}

/// Output of a batched forward pass over `B` patients.
#[derive(Clone, Debug)]
pub struct Graph {
    pub batch: usize,
    /// `B×11`.
    pub segment_scores: Var,
    /// `(B·11)×F`.
    pub features: Var,
    /// `B×F`.
    pub pooled: Var,
    /// Winning segment per pooled feature, `B·F` entries.
    pub argmax: Vec<usize>,
    /// `B×1`.
    pub cadrads: Var,
    /// `B×1`.
    pub calc: Var,
}

/// Full network on `(B·11)×P×H×W`, segments of each patient contiguous.
pub fn forward_graph(
    tape: &mut Tape,
    vars: &ParamVars,
    stats: &mut [RunningStats],
    input: Var,
    mode: Mode,
) -> Result<Graph> {
    let n = tape.shape(input)[0];
    if n % SEGMENT_COUNT != 0 || n == 0 {
        return Err(Error::dim(format!(
            "batch of {n} segment views is not a whole number of patients"
        )));
    }
    let batch = n / SEGMENT_COUNT;
    let features = extract_features(tape, vars, stats, input, mode)?;
    let f = tape.shape(features)[1];
    let seg = stenosis_head(tape, vars, features)?;
    let segment_scores = tape.reshape(seg, &[batch, SEGMENT_COUNT])?;
    let grouped = tape.reshape(features, &[batch, SEGMENT_COUNT, f])?;
    let (pooled, argmax) = tape.max_over_middle_axis(grouped)?;
    let cadrads = head(tape, pooled, vars.cadrads)?;
    let calc = head(tape, pooled, vars.calc)?;
    Ok(Graph {
        batch,
        segment_scores,
        features,
        pooled,
        argmax,
        cadrads,
        calc,
    })
}

/// Regression targets of a batch, as reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub cadrads: Tensor,
    pub stenosis: Tensor,
    pub calc: Tensor,
}

impl Targets {
    pub fn from_labels(labels: &[PatientLabels]) -> Result<Self> {
        let b = labels.len();
        if b == 0 {
            return Err(Error::contract("no labels"));
        }
        Ok(Targets {
            cadrads: Tensor::new(
                vec![b, 1],
                labels.iter().map(|l| f64::from(l.cad_rads.value())).collect(),
            )?,
            stenosis: Tensor::new(
                vec![b, SEGMENT_COUNT],
                labels
                    .iter()
                    .flat_map(|l| l.segment_labels.iter().map(|c| f64::from(c.value())))
                    .collect(),
            )?,
            calc: Tensor::new(
                vec![b, 1],
                labels.iter().map(|l| f64::from(l.calc_grade.value())).collect(),
            )?,
        })
    }
}

/// Weighted sum of the three MSE terms; zero-weight terms are not recorded.
pub fn multitask_loss(tape: &mut Tape, graph: &Graph, targets: &Targets, weights: &super::LossWeights) -> Result<Var> {
    weights.validate()?;
    let terms = [
        (weights.cadrads, graph.cadrads, &targets.cadrads),
        (weights.stenosis, graph.segment_scores, &targets.stenosis),
        (weights.calc, graph.calc, &targets.calc),
    ];
    let mut total: Option<Var> = None;
    for (w, pred, target) in terms {
        if w == 0.0 {
            continue;
        }
        let t = tape.constant(target.clone());
        let l = tape.mse_loss(pred, t)?;
        let l = if w == 1.0 { l } else { tape.scale(l, w) };
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    Ok(total.expect("validated weights include a positive term"))
}
