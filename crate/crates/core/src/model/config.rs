use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::preprocess::{MPR_LENGTH, MPR_SIZE};

/// Weights of the three regression targets in the training loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub cadrads: f64,
    pub stenosis: f64,
    pub calc: f64,
}

impl LossWeights {
    pub const FULL: LossWeights = LossWeights {
        cadrads: 1.0,
        stenosis: 1.0,
        calc: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        let all = [self.cadrads, self.stenosis, self.calc];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::config(format!(
                "loss weights {all:?} must be finite and non-negative"
            )));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(Error::config("at least one loss weight must be positive"));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::FULL
    }
}

/// Network shape. Every conv block halves both view extents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_planes: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub conv_channels: Vec<usize>,
    pub feature_dim: usize,
    pub head_hidden: usize,
    pub loss_weights: LossWeights,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_planes: 2,
            input_height: MPR_LENGTH,
            input_width: MPR_SIZE,
            conv_channels: vec![16, 32, 64, 128],
            feature_dim: 64,
            head_hidden: 32,
            loss_weights: LossWeights::FULL,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_planes == 0 {
            return Err(Error::config("input_planes must be at least 1"));
        }
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(Error::config(format!(
                "conv_channels {:?} must be non-empty and positive",
                self.conv_channels
            )));
        }
        if self.feature_dim == 0 || self.head_hidden == 0 {
            return Err(Error::config("feature_dim and head_hidden must be at least 1"));
        }
        let (mut h, mut w) = (self.input_height, self.input_width);
        for stage in 0..self.conv_channels.len() {
            if h == 0 || w == 0 || h % 2 != 0 || w % 2 != 0 {
                return Err(Error::config(format!(
                    "view {}×{} cannot be pooled at stage {stage} (extent {h}×{w})",
                    self.input_height, self.input_width
                )));
            }
            h /= 2;
            w /= 2;
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || !(self.bn_eps > 0.0) {
            return Err(Error::config("bn_momentum must be in [0, 1) and bn_eps positive"));
        }
        self.loss_weights.validate()
    }

    /// Shape of one segment input.
    pub fn view_shape(&self) -> [usize; 3] {
        [self.input_planes, self.input_height, self.input_width]
    }
}
