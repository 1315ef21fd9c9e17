use super::conv::gemm;
use super::tape::{Adjoints, Node, Op, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn rows_cols(shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [n] => Ok((1, n)),
        [b, n] => Ok((b, n)),
        _ => Err(Error::dim(format!(
            "fully connected input must be N or B×N, got {shape:?}"
        ))),
    }
}

impl Tape {
    /// Affine map `W·x + b` applied to a vector or to each row of a matrix.
    pub fn fully_connected(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let in_shape = self.shape(input).to_vec();
        let (rows, n_in) = rows_cols(&in_shape)?;
        let [n_out, w_in] = *self.shape(weight) else {
            return Err(Error::dim(format!("weight must be M×N, got {:?}", self.shape(weight))));
        };
        if w_in != n_in {
            return Err(Error::dim(format!("weight expects {w_in} inputs, got {n_in}")));
        }
        if self.shape(bias) != [n_out] {
            return Err(Error::dim(format!(
                "bias must have shape [{n_out}], got {:?}",
                self.shape(bias)
            )));
        }
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let b = self.value(bias).data();
        let mut out: Vec<f64> = (0..rows).flat_map(|_| b.iter().copied()).collect();
        // out = X · Wᵀ + b
        gemm(rows, n_in, n_out, x, n_in, 1, w, 1, n_in, 1.0, &mut out);
        let shape = if in_shape.len() == 1 {
            vec![n_out]
        } else {
            vec![rows, n_out]
        };
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::Linear { input, weight, bias }, &[input, weight, bias]))
    }
}

pub(crate) fn linear_backward(nodes: &[Node], input: Var, weight: Var, bias: Var, g: &[f64], adj: &mut Adjoints<'_>) {
    let (rows, n_in) = rows_cols(nodes[input.0].value.shape()).expect("validated in forward");
    let n_out = nodes[weight.0].value.shape()[0];
    let x = nodes[input.0].value.data();
    let w = nodes[weight.0].value.data();
    if let Some(db) = adj.slot(bias) {
        for r in g.chunks_exact(n_out) {
            for (a, gi) in db.iter_mut().zip(r) {
                *a += gi;
            }
        }
    }
    if let Some(dw) = adj.slot(weight) {
        // dW += dOutᵀ · X
        gemm(n_out, rows, n_in, g, 1, n_out, x, n_in, 1, 1.0, dw);
    }
    if let Some(dx) = adj.slot(input) {
        // dX += dOut · W
        gemm(rows, n_out, n_in, g, n_out, 1, w, n_in, 1, 1.0, dx);
    }
}
