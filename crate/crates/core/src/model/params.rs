use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::autodiff::{RunningStats, Tensor};
use crate::error::Result;

/// Conv 3×3 → BN → ReLU → MaxPool 2×2.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub stats: RunningStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// FC → ReLU → FC to a single score.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub hidden: Dense,
    pub out: Dense,
}

/// The one feature extractor every segment goes through.
#[derive(Clone, Debug, PartialEq)]
pub struct Extractor {
    pub blocks: Vec<ConvBlock>,
    pub fc: Dense,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Extractor,
    StenosisHead,
    CadradsHead,
    CalcHead,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Extractor,
        ParamGroup::StenosisHead,
        ParamGroup::CadradsHead,
        ParamGroup::CalcHead,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::Extractor => "extractor",
            ParamGroup::StenosisHead => "stenosis_head",
            ParamGroup::CadradsHead => "cadrads_head",
            ParamGroup::CalcHead => "calc_head",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub extractor: Extractor,
    pub stenosis_head: Head,
    pub cadrads_head: Head,
    pub calc_head: Head,
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| dist.sample(rng)).with_grad()
}

fn dense(rng: &mut ChaCha8Rng, n_in: usize, n_out: usize, gain: f64) -> Dense {
    Dense {
        weight: normal(rng, &[n_out, n_in], (gain / n_in as f64).sqrt()),
        bias: Tensor::zeros(&[n_out]).with_grad(),
    }
}

fn head(rng: &mut ChaCha8Rng, f: usize, hidden: usize) -> Head {
    Head {
        hidden: dense(rng, f, hidden, 2.0),
        out: Dense {
            weight: Tensor::zeros(&[1, hidden]).with_grad(),
            bias: Tensor::zeros(&[1]).with_grad(),
        },
    }
}

impl ModelParams {
    /// He-normal weights, zero biases, unit BN scale. Head output layers
    /// start at zero, so an untrained head returns its bias.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c_in = config.input_planes;
        let mut blocks = Vec::with_capacity(config.conv_channels.len());
        for &c_out in &config.conv_channels {
            blocks.push(ConvBlock {
                kernel: normal(&mut rng, &[c_out, c_in, 3, 3], (2.0 / (9 * c_in) as f64).sqrt()),
                bias: Tensor::zeros(&[c_out]).with_grad(),
                gamma: Tensor::full(&[c_out], 1.0).with_grad(),
                beta: Tensor::zeros(&[c_out]).with_grad(),
                stats: RunningStats::new(c_out, config.bn_momentum, config.bn_eps),
            });
            c_in = c_out;
        }
        let f = config.feature_dim;
        let extractor = Extractor {
            blocks,
            fc: dense(&mut rng, c_in, f, 1.0),
        };
        Ok(ModelParams {
            config: config.clone(),
            extractor,
            stenosis_head: head(&mut rng, f, config.head_hidden),
            cadrads_head: head(&mut rng, f, config.head_hidden),
            calc_head: head(&mut rng, f, config.head_hidden),
        })
    }

    fn head(&self, g: ParamGroup) -> Option<&Head> {
        match g {
            ParamGroup::Extractor => None,
            ParamGroup::StenosisHead => Some(&self.stenosis_head),
            ParamGroup::CadradsHead => Some(&self.cadrads_head),
            ParamGroup::CalcHead => Some(&self.calc_head),
        }
    }

    /// Every trainable tensor with its dotted name, in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for g in ParamGroup::ALL {
            out.extend(self.group_named(g));
        }
        out
    }

    pub fn group_named(&self, g: ParamGroup) -> Vec<(String, &Tensor)> {
        let p = g.prefix();
        match self.head(g) {
            Some(h) => vec![
                (format!("{p}.hidden.weight"), &h.hidden.weight),
                (format!("{p}.hidden.bias"), &h.hidden.bias),
                (format!("{p}.out.weight"), &h.out.weight),
                (format!("{p}.out.bias"), &h.out.bias),
            ],
            None => {
                let mut v = Vec::new();
                for (i, b) in self.extractor.blocks.iter().enumerate() {
                    v.push((format!("{p}.block{i}.kernel"), &b.kernel));
                    v.push((format!("{p}.block{i}.bias"), &b.bias));
                    v.push((format!("{p}.block{i}.gamma"), &b.gamma));
                    v.push((format!("{p}.block{i}.beta"), &b.beta));
                }
                v.push((format!("{p}.fc.weight"), &self.extractor.fc.weight));
                v.push((format!("{p}.fc.bias"), &self.extractor.fc.bias));
                v
            }
        }
    }

    /// Mutable tensors of `g`, in the order of [`ModelParams::group_named`].
    pub fn group_mut(&mut self, g: ParamGroup) -> Vec<&mut Tensor> {
        self.tensors_mut(&[g])
    }

    pub fn tensors_mut(&mut self, groups: &[ParamGroup]) -> Vec<&mut Tensor> {
        let ModelParams {
            extractor,
            stenosis_head,
            cadrads_head,
            calc_head,
            ..
        } = self;
        let mut out = Vec::new();
        if groups.contains(&ParamGroup::Extractor) {
            for b in extractor.blocks.iter_mut() {
                out.push(&mut b.kernel);
                out.push(&mut b.bias);
                out.push(&mut b.gamma);
                out.push(&mut b.beta);
            }
            out.push(&mut extractor.fc.weight);
            out.push(&mut extractor.fc.bias);
        }
        if groups.contains(&ParamGroup::StenosisHead) {
            push_head(&mut out, stenosis_head);
        }
        if groups.contains(&ParamGroup::CadradsHead) {
            push_head(&mut out, cadrads_head);
        }
        if groups.contains(&ParamGroup::CalcHead) {
            push_head(&mut out, calc_head);
        }
        out
    }

    pub fn tensors(&self, groups: &[ParamGroup]) -> Vec<&Tensor> {
        ParamGroup::ALL
            .into_iter()
            .filter(|g| groups.contains(g))
            .flat_map(|g| self.group_named(g).into_iter().map(|(_, t)| t))
            .collect()
    }

    /// Trainable scalar count.
    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in self.tensors_mut(&ParamGroup::ALL) {
            t.zero_grad();
        }
    }

    /// Marks every tensor in `g` trainable or frozen.
    pub fn set_trainable(&mut self, g: ParamGroup, on: bool) {
        for t in self.group_mut(g) {
            t.set_requires_grad(on);
        }
    }

    /// Copies the extractor and stenosis head from `other`.
    pub fn adopt_extractor(&mut self, other: &ModelParams) {
        self.extractor = other.extractor.clone();
        self.stenosis_head = other.stenosis_head.clone();
    }
}

fn push_head<'a>(out: &mut Vec<&'a mut Tensor>, h: &'a mut Head) {
    out.push(&mut h.hidden.weight);
    out.push(&mut h.hidden.bias);
    out.push(&mut h.out.weight);
    out.push(&mut h.out.bias);
}
