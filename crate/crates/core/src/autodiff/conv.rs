//! 3×3 same-padded, stride-1 cross-correlation lowered onto GEMM via im2col.

use super::tape::{Adjoints, Node, Op, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub(crate) const K: usize = 3;
const TAPS: usize = K * K;

/// `(n, c, h, w)` view of a `C×H×W` or `N×C×H×W` shape.
pub(crate) fn nchw(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::dim(format!("expected C×H×W or N×C×H×W, got {shape:?}"))),
    }
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, cols: &mut [f64]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..K {
            for kx in 0..K {
                let row = &mut cols[(ci * TAPS + ky * K + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = 0.0;
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], c: usize, h: usize, w: usize, dx: &mut [f64]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..K {
            for kx in 0..K {
                let row = &cols[(ci * TAPS + ky * K + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            for (d, s) in dst[..w - 1].iter_mut().zip(&src[1..]) {
                                *d += *s;
                            }
                        }
                        1 => {
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += *s;
                            }
                        }
                        _ => {
                            for (d, s) in dst[1..].iter_mut().zip(&src[..w - 1]) {
                                *d += *s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c[m×n] = alpha·a·b + beta·c` with explicit strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: every index addressed through the strides lies inside the
    // slices; callers pass extents derived from the same shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    /// Same-size 2-D convolution with a `C_out×C_in×3×3` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (n, c_in, h, w) = nchw(self.shape(input))?;
        let ks = self.shape(kernel).to_vec();
        if ks.len() != 4 || ks[2] != K || ks[3] != K {
            return Err(Error::dim(format!("kernel must be C_out×C_in×3×3, got {ks:?}")));
        }
        let c_out = ks[0];
        if ks[1] != c_in {
            return Err(Error::dim(format!(
                "kernel expects {} input channels, input has {c_in}",
                ks[1]
            )));
        }
        if self.shape(bias) != [c_out] {
            return Err(Error::dim(format!(
                "bias must have shape [{c_out}], got {:?}",
                self.shape(bias)
            )));
        }
        let hw = h * w;
        let x = self.value(input).data();
        let kd = self.value(kernel).data();
        let bd = self.value(bias).data();
        let mut out = vec![0.0; n * c_out * hw];
        let mut cols = vec![0.0; c_in * TAPS * hw];
        for s in 0..n {
            im2col(&x[s * c_in * hw..(s + 1) * c_in * hw], c_in, h, w, &mut cols);
            let o = &mut out[s * c_out * hw..(s + 1) * c_out * hw];
            for (co, row) in o.chunks_exact_mut(hw).enumerate() {
                row.fill(bd[co]);
            }
            gemm(c_out, c_in * TAPS, hw, kd, c_in * TAPS, 1, &cols, hw, 1, 1.0, o);
        }
        let shape = if self.shape(input).len() == 3 {
            vec![c_out, h, w]
        } else {
            vec![n, c_out, h, w]
        };
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::Conv2d { input, kernel, bias }, &[input, kernel, bias]))
    }
}

pub(crate) fn conv2d_backward(nodes: &[Node], input: Var, kernel: Var, bias: Var, g: &[f64], adj: &mut Adjoints<'_>) {
    let xv = &nodes[input.0].value;
    let (n, c_in, h, w) = nchw(xv.shape()).expect("validated in forward");
    let kv = &nodes[kernel.0].value;
    let c_out = kv.shape()[0];
    let hw = h * w;
    let rows = c_in * TAPS;
    let x = xv.data();
    let kd = kv.data();

    if let Some(db) = adj.slot(bias) {
        for s in 0..n {
            for (co, gr) in g[s * c_out * hw..(s + 1) * c_out * hw].chunks_exact(hw).enumerate() {
                db[co] += gr.iter().sum::<f64>();
            }
        }
    }

    let want_k = nodes[kernel.0].requires_grad;
    let want_x = nodes[input.0].requires_grad;
    let mut cols = vec![0.0; rows * hw];
    let mut dk = vec![0.0; c_out * rows];
    for s in 0..n {
        let gs = &g[s * c_out * hw..(s + 1) * c_out * hw];
        if want_k {
            im2col(&x[s * c_in * hw..(s + 1) * c_in * hw], c_in, h, w, &mut cols);
            // dK += dOut · colsᵀ
            gemm(c_out, hw, rows, gs, hw, 1, &cols, 1, hw, 1.0, &mut dk);
        }
        if want_x {
            // dcols = Kᵀ · dOut
            gemm(rows, c_out, hw, kd, 1, rows, gs, hw, 1, 0.0, &mut cols);
            if let Some(dx) = adj.slot(input) {
                col2im_add(&cols, c_in, h, w, &mut dx[s * c_in * hw..(s + 1) * c_in * hw]);
            }
        }
    }
    if want_k {
        adj.add(kernel, &dk);
    }
}
