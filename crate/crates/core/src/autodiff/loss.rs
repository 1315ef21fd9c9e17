use super::tape::{Op, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

impl Tape {
    /// Mean over all elements of the squared difference.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(Error::dim(format!("mse of {:?} against {:?}", p.shape(), t.shape())));
        }
        let n = p.numel() as f64;
        let loss = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred, target }, &[pred, target]))
    }
}
