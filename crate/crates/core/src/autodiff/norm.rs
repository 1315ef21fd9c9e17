use serde::{Deserialize, Serialize};

use super::tape::{Adjoints, Node, Op, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel running mean and variance used in eval mode.
///
/// `momentum` is the weight kept on the previous running value.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl RunningStats {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum,
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// `(n, c, spatial)` for `N×C`, `N×C×L` or `N×C×H×W` inputs.
fn layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::dim(format!(
            "batch norm needs a leading batch axis, got {shape:?}"
        )));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

impl Tape {
    /// Per-channel normalisation over the batch and spatial axes.
    ///
    /// Train mode uses batch statistics and folds them into `stats`
    /// (unbiased variance); eval mode uses `stats` as-is.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: Mode,
    ) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let (n, c, sp) = layout(&shape)?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || stats.channels() != c {
            return Err(Error::dim(format!(
                "batch norm over {c} channels: gamma {:?}, beta {:?}, stats {}",
                self.shape(gamma),
                self.shape(beta),
                stats.channels()
            )));
        }
        if mode == Mode::Train && n < 2 {
            return Err(Error::DegenerateBatch(format!(
                "train-mode batch norm needs at least 2 samples, got {n}"
            )));
        }
        let x = self.value(input).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let count = (n * sp) as f64;
        let mut inv_std = vec![0.0; c];
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for ch in 0..c {
            let samples = (0..n).flat_map(|s| {
                let base = (s * c + ch) * sp;
                base..base + sp
            });
            let (mean, var) = match mode {
                Mode::Train => {
                    let mean = samples.clone().map(|i| x[i]).sum::<f64>() / count;
                    let var = samples.clone().map(|i| (x[i] - mean) * (x[i] - mean)).sum::<f64>() / count;
                    let m = stats.momentum;
                    stats.mean[ch] = m * stats.mean[ch] + (1.0 - m) * mean;
                    stats.var[ch] = m * stats.var[ch] + (1.0 - m) * var * count / (count - 1.0);
                    (mean, var)
                }
                Mode::Eval => (stats.mean[ch], stats.var[ch]),
            };
            let is = 1.0 / (var + stats.eps).sqrt();
            inv_std[ch] = is;
            for i in samples {
                let xh = (x[i] - mean) * is;
                xhat[i] = xh;
                out[i] = gd[ch] * xh + bd[ch];
            }
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: mode == Mode::Train,
            },
            &[input, gamma, beta],
        ))
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_norm_backward(
    nodes: &[Node],
    input: Var,
    gamma: Var,
    beta: Var,
    xhat: &[f64],
    inv_std: &[f64],
    batch_stats: bool,
    g: &[f64],
    adj: &mut Adjoints<'_>,
) {
    let (n, c, sp) = layout(nodes[input.0].value.shape()).expect("validated in forward");
    let gd = nodes[gamma.0].value.data();
    let count = (n * sp) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ch in 0..c {
        for s in 0..n {
            let base = (s * c + ch) * sp;
            for i in base..base + sp {
                dgamma[ch] += g[i] * xhat[i];
                dbeta[ch] += g[i];
            }
        }
    }
    if let Some(dx) = adj.slot(input) {
        for ch in 0..c {
            let scale = gd[ch] * inv_std[ch];
            for s in 0..n {
                let base = (s * c + ch) * sp;
                for i in base..base + sp {
                    dx[i] += if batch_stats {
                        scale / count * (count * g[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                    } else {
                        scale * g[i]
                    };
                }
            }
        }
    }
    adj.add(gamma, &dgamma);
    adj.add(beta, &dbeta);
}
