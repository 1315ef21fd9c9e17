use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// Bias-corrected Adam with zero-initialised moments.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    /// One moment slot per tensor, in iteration order of `params`.
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let sizes: Vec<usize> = params.into_iter().map(Tensor::numel).collect();
        AdamState {
            config,
            step: 0,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable tensor from its gradient slot.
    ///
    /// Tensors must come in the order used at construction. Non-trainable
    /// tensors are left untouched; a missing gradient counts as zero. Any
    /// non-finite gradient aborts the step before anything is modified.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>) -> Result<()> {
        let mut params: Vec<&mut Tensor> = params.into_iter().collect();
        if params.len() != self.first.len() {
            return Err(Error::dim(format!(
                "optimizer tracks {} tensors, got {}",
                self.first.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.numel() != self.first[i].len() {
                return Err(Error::dim(format!(
                    "tensor {i} has {} elements, optimizer slot has {}",
                    p.numel(),
                    self.first[i].len()
                )));
            }
            if let Some(g) = p.grad() {
                if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient {} at element {j} of tensor {i}",
                        g[j]
                    )));
                }
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            if !p.requires_grad() {
                continue;
            }
            let grad: Vec<f64> = match p.grad() {
                Some(g) => g.to_vec(),
                None => vec![0.0; p.numel()],
            };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (((w, g), m), v) in p.data_mut().iter_mut().zip(&grad).zip(m).zip(v) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
