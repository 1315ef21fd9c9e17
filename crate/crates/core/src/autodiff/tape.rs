//! Wengert-list tape for reverse-mode differentiation.
//!
//! Every primitive appends one node holding its output value and whatever it
//! needs to push adjoints back to its inputs. `backward` walks the list once
//! in reverse and adds the resulting adjoints into the gradient slots of the
//! trainable leaves. Leaf gradients accumulate across calls; intermediate
//! adjoints are rebuilt on every call.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu {
        input: Var,
    },
    /// Routes each output element's adjoint to one flat input index.
    Gather {
        input: Var,
        argmax: Vec<usize>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Mse {
        pred: Var,
        target: Var,
    },
    Sum {
        input: Var,
    },
    Add {
        lhs: Var,
        rhs: Var,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    Reshape {
        input: Var,
    },
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

/// Per-node adjoint buffers for one backward sweep.
pub(crate) struct Adjoints<'a> {
    slots: Vec<Option<Vec<f64>>>,
    nodes: &'a [Node],
}

impl<'a> Adjoints<'a> {
    /// Mutable adjoint of `v`, or `None` when `v` does not need a gradient.
    pub(crate) fn slot(&mut self, v: Var) -> Option<&mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.numel();
        Some(self.slots[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    pub(crate) fn add(&mut self, v: Var, delta: &[f64]) {
        if let Some(s) = self.slot(v) {
            for (a, b) in s.iter_mut().zip(delta) {
                *a += *b;
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it receives gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, populated by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let mut value = value;
        value.set_requires_grad(false);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every trainable leaf ends up with a gradient slot, zero-filled when
    /// the leaf is not on a path to `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.backward_visit(loss, |_| {})
    }

    /// Same as [`Tape::backward`], reporting each visited node index.
    pub fn backward_visit(&mut self, loss: Var, mut visit: impl FnMut(usize)) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut leaf_grads: Vec<(usize, Vec<f64>)> = Vec::new();
        {
            let nodes = &self.nodes[..=loss.0];
            let mut adj = Adjoints {
                slots: (0..nodes.len()).map(|_| None).collect(),
                nodes,
            };
            if nodes[loss.0].requires_grad {
                adj.slots[loss.0] = Some(vec![1.0]);
            }
            for idx in (0..nodes.len()).rev() {
                visit(idx);
                let Some(g) = adj.slots[idx].take() else {
                    continue;
                };
                match &nodes[idx].op {
                    Op::Leaf => leaf_grads.push((idx, g)),
                    op => backward_op(nodes, idx, op, &g, &mut adj),
                }
            }
        }
        for (idx, g) in leaf_grads {
            self.nodes[idx].value.accumulate_grad(&g)?;
        }
        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf) && node.requires_grad && node.value.grad().is_none() {
                let zeros = vec![0.0; node.value.numel()];
                node.value.accumulate_grad(&zeros)?;
            }
        }
        Ok(())
    }

    /// Fingerprint of every discrete branch taken by the recorded forward
    /// pass: relu sign patterns and pooling argmax choices.
    ///
    /// Two evaluations with equal signatures lie on the same smooth piece of
    /// the network function, which is what finite-difference checks need.
    pub fn branch_signature(&self) -> u64 {
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |x: u64| {
            h ^= x;
            h = h.wrapping_mul(PRIME);
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu { input } => {
                    for &x in self.nodes[input.0].value.data() {
                        mix(u64::from(x > 0.0));
                    }
                }
                Op::Gather { argmax, .. } => {
                    for &i in argmax {
                        mix(i as u64);
                    }
                }
                _ => {}
            }
        }
        h
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Relu { input }, &[input])
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { input }, &[input])
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.shape() != b.shape() {
            return Err(Error::dim(format!("add of {:?} and {:?}", a.shape(), b.shape())));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add { lhs, rhs }, &[lhs, rhs]))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|v| v * factor).collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Scale { input, factor }, &[input])
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).reshaped(shape)?;
        Ok(self.push(out, Op::Reshape { input }, &[input]))
    }
}

fn backward_op(nodes: &[Node], idx: usize, op: &Op, g: &[f64], adj: &mut Adjoints<'_>) {
    match op {
        Op::Leaf => unreachable!("leaves are handled by the sweep"),
        Op::Conv2d { input, kernel, bias } => super::conv::conv2d_backward(nodes, *input, *kernel, *bias, g, adj),
        Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        } => super::norm::batch_norm_backward(nodes, *input, *gamma, *beta, xhat, inv_std, *batch_stats, g, adj),
        Op::Relu { input } => {
            let x = nodes[input.0].value.data();
            if let Some(s) = adj.slot(*input) {
                for ((a, &xi), &gi) in s.iter_mut().zip(x).zip(g) {
                    if xi > 0.0 {
                        *a += gi;
                    }
                }
            }
        }
        Op::Gather { input, argmax } => {
            if let Some(s) = adj.slot(*input) {
                for (&src, &gi) in argmax.iter().zip(g) {
                    s[src] += gi;
                }
            }
        }
        Op::Linear { input, weight, bias } => super::linear::linear_backward(nodes, *input, *weight, *bias, g, adj),
        Op::Mse { pred, target } => {
            let p = nodes[pred.0].value.data();
            let t = nodes[target.0].value.data();
            let n = p.len() as f64;
            let d: Vec<f64> = p.iter().zip(t).map(|(pi, ti)| 2.0 * (pi - ti) / n * g[0]).collect();
            adj.add(*pred, &d);
            if let Some(s) = adj.slot(*target) {
                for (a, di) in s.iter_mut().zip(&d) {
                    *a -= di;
                }
            }
        }
        Op::Sum { input } => {
            if let Some(s) = adj.slot(*input) {
                s.iter_mut().for_each(|a| *a += g[0]);
            }
        }
        Op::Add { lhs, rhs } => {
            adj.add(*lhs, g);
            adj.add(*rhs, g);
        }
        Op::Scale { input, factor } => {
            if let Some(s) = adj.slot(*input) {
                for (a, gi) in s.iter_mut().zip(g) {
                    *a += factor * gi;
                }
            }
        }
        Op::Reshape { input } => adj.add(*input, g),
    }
    let _ = idx;
}
