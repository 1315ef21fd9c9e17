//! Max-type reductions. All of them record the winning input index per output
//! element; ties go to the first index in row-major scan order, so the
//! backward pass is deterministic.

use super::conv::nchw;
use super::tape::{Op, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

impl Tape {
    /// 2×2 window, stride 2.
    pub fn max_pool2d(&mut self, input: Var) -> Result<Var> {
        let in_shape = self.shape(input).to_vec();
        let (n, c, h, w) = nchw(&in_shape)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim(format!(
                "2×2 max pooling needs even spatial extents, got {h}×{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let shape = if in_shape.len() == 3 {
            vec![c, oh, ow]
        } else {
            vec![n, c, oh, ow]
        };
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::Gather { input, argmax }, &[input]))
    }

    /// Per-channel maximum over all spatial positions: `C×H×W → C`,
    /// `N×C×H×W → N×C`.
    pub fn global_max_pool_spatial(&mut self, input: Var) -> Result<Var> {
        let in_shape = self.shape(input).to_vec();
        let (n, c, h, w) = nchw(&in_shape)?;
        let hw = h * w;
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c);
        let mut argmax = Vec::with_capacity(n * c);
        for plane in 0..n * c {
            let base = plane * hw;
            let mut best = base;
            for i in base + 1..base + hw {
                if x[i] > x[best] {
                    best = i;
                }
            }
            out.push(x[best]);
            argmax.push(best);
        }
        let shape = if in_shape.len() == 3 { vec![c] } else { vec![n, c] };
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::Gather { input, argmax }, &[input]))
    }

    /// Maximum over the middle axis of a `B×S×F` tensor.
    ///
    /// Returns the pooled `B×F` value and, per output element, the winning
    /// index along the middle axis (lowest index on ties).
    pub fn max_over_middle_axis(&mut self, input: Var) -> Result<(Var, Vec<usize>)> {
        let [b, s, f] = *self.shape(input) else {
            return Err(Error::dim(format!("expected B×S×F, got {:?}", self.shape(input))));
        };
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(b * f);
        let mut argmax = Vec::with_capacity(b * f);
        let mut winners = Vec::with_capacity(b * f);
        for bi in 0..b {
            for fi in 0..f {
                let mut best_s = 0;
                let mut best = bi * s * f + fi;
                for si in 1..s {
                    let i = (bi * s + si) * f + fi;
                    if x[i] > x[best] {
                        best = i;
                        best_s = si;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
                winners.push(best_s);
            }
        }
        let out = Tensor::new(vec![b, f], out)?;
        let v = self.push(out, Op::Gather { input, argmax }, &[input]);
        Ok((v, winners))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_pool_two_by_two() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0])
                .unwrap()
                .with_grad(),
        );
        let y = tape.max_pool2d(x).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[4.0]);
    }

    #[test]
    fn max_pool_constant_routes_to_first_element() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 4, 4], 3.0).with_grad());
        let y = tape.max_pool2d(x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 3.0));
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        let g = tape.grad(x).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let expected = if r % 2 == 0 && c % 2 == 0 { 1.0 } else { 0.0 };
                assert_eq!(g[r * 4 + c], expected);
            }
        }
    }

    #[test]
    fn max_pool_rejects_odd_extent() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 4]));
        assert!(matches!(tape.max_pool2d(x), Err(Error::Dimension(_))));
    }

    #[test]
    fn global_max_single_peak_and_translation() {
        for pos in [0usize, 5, 11] {
            let mut tape = Tape::new();
            let mut d = vec![0.0; 12];
            d[pos] = 5.0;
            let x = tape.leaf(Tensor::new(vec![1, 3, 4], d).unwrap().with_grad());
            let y = tape.global_max_pool_spatial(x).unwrap();
            assert_eq!(tape.value(y).data(), &[5.0]);
            let s = tape.sum(y);
            tape.backward(s).unwrap();
            let g = tape.grad(x).unwrap();
            assert_eq!(g[pos], 1.0);
            assert_eq!(g.iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn middle_axis_max_tie_goes_to_lowest_index() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 11, 3], 1.5));
        let (y, winners) = tape.max_over_middle_axis(x).unwrap();
        assert_eq!(tape.shape(y), &[2, 3]);
        assert!(winners.iter().all(|&w| w == 0));
    }
}
