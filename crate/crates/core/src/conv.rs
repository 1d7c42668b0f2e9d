//! 2-D convolution as three mutually adjoint ops (forward, input-gradient,
//! weight-gradient), each lowered to a single batched GEMM over im2col
//! columns. Closing the family under differentiation gives the critics
//! second-order gradients for the gradient penalty.

use std::rc::Rc;

use crate::autograd::{grad_enabled, Backward, Var};
use crate::ops::gemm;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn l(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Output positions `o` in `lo..hi` whose tap `o * stride + k - pad` falls
/// inside `0..len`.
fn valid_range(k: usize, pad: usize, stride: usize, len: usize, out: usize) -> (usize, usize) {
    let lo = if pad > k {
        (pad - k).div_ceil(stride)
    } else {
        0
    };
    let last = len as isize - 1 + pad as isize - k as isize;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last as usize / stride + 1).min(out);
    (lo.min(hi), hi)
}

/// `[k, n*l]` column matrix.
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let l = ho * wo;
    let nl = g.n * l;
    let mut cols = vec![0.0; g.k() * nl];
    let s = g.stride;
    for c in 0..g.cin {
        for ki in 0..g.kh {
            let (ilo, ihi) = valid_range(ki, g.pad, s, g.h, ho);
            for kj in 0..g.kw {
                let (jlo, jhi) = valid_range(kj, g.pad, s, g.w, wo);
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst_row = &mut cols[row * nl..(row + 1) * nl];
                for n in 0..g.n {
                    let plane = &x[(n * g.cin + c) * g.h * g.w..(n * g.cin + c + 1) * g.h * g.w];
                    for oi in ilo..ihi {
                        let ii = oi * s + ki - g.pad;
                        let src_row = &plane[ii * g.w..(ii + 1) * g.w];
                        let dst = &mut dst_row[n * l + oi * wo..n * l + (oi + 1) * wo];
                        if jlo == jhi {
                            continue;
                        }
                        let j0 = jlo * s + kj - g.pad;
                        if s == 1 {
                            dst[jlo..jhi].copy_from_slice(&src_row[j0..j0 + (jhi - jlo)]);
                        } else {
                            for (d, v) in dst[jlo..jhi]
                                .iter_mut()
                                .zip(src_row[j0..].iter().step_by(s))
                            {
                                *d = *v;
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let l = ho * wo;
    let nl = g.n * l;
    let mut x = vec![0.0; g.n * g.cin * g.h * g.w];
    let s = g.stride;
    for c in 0..g.cin {
        for ki in 0..g.kh {
            let (ilo, ihi) = valid_range(ki, g.pad, s, g.h, ho);
            for kj in 0..g.kw {
                let (jlo, jhi) = valid_range(kj, g.pad, s, g.w, wo);
                if jlo == jhi {
                    continue;
                }
                let row = (c * g.kh + ki) * g.kw + kj;
                let src_row = &cols[row * nl..(row + 1) * nl];
                for n in 0..g.n {
                    let base = (n * g.cin + c) * g.h * g.w;
                    for oi in ilo..ihi {
                        let ii = oi * s + ki - g.pad;
                        let xrow = &mut x[base + ii * g.w..base + (ii + 1) * g.w];
                        let src = &src_row[n * l + oi * wo + jlo..n * l + oi * wo + jhi];
                        let j0 = jlo * s + kj - g.pad;
                        if s == 1 {
                            for (d, v) in xrow[j0..j0 + src.len()].iter_mut().zip(src) {
                                *d += v;
                            }
                        } else {
                            for (d, v) in xrow[j0..].iter_mut().step_by(s).zip(src) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[n, c, l]` <-> `[c, n*l]` relayout.
fn nc_to_cn(src: &[f64], n: usize, c: usize, l: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * c * l];
    for i in 0..n {
        for j in 0..c {
            out[j * n * l + i * l..j * n * l + (i + 1) * l]
                .copy_from_slice(&src[(i * c + j) * l..(i * c + j + 1) * l]);
        }
    }
    out
}

fn cn_to_nc(src: &[f64], n: usize, c: usize, l: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * c * l];
    for i in 0..n {
        for j in 0..c {
            out[(i * c + j) * l..(i * c + j + 1) * l]
                .copy_from_slice(&src[j * n * l + i * l..j * n * l + (i + 1) * l]);
        }
    }
    out
}

fn conv_forward_raw(x: &[f64], w: &[f64], g: &ConvGeom) -> (Vec<f64>, Vec<f64>) {
    let cols = im2col(x, g);
    let (k, nl) = (g.k(), g.n * g.l());
    let mut out = vec![0.0; g.cout * nl];
    gemm(
        g.cout,
        k,
        nl,
        w,
        (k as isize, 1),
        &cols,
        (nl as isize, 1),
        0.0,
        &mut out,
    );
    (cn_to_nc(&out, g.n, g.cout, g.l()), cols)
}

fn conv_input_grad_raw(gy: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (k, nl) = (g.k(), g.n * g.l());
    let g2 = nc_to_cn(gy, g.n, g.cout, g.l());
    let mut dcols = vec![0.0; k * nl];
    // w^T: [k, cout]
    gemm(
        k,
        g.cout,
        nl,
        w,
        (1, k as isize),
        &g2,
        (nl as isize, 1),
        0.0,
        &mut dcols,
    );
    col2im(&dcols, g)
}

fn conv_weight_grad_raw(x: &[f64], gy: &[f64], g: &ConvGeom, cols: Option<&[f64]>) -> Vec<f64> {
    let owned;
    let cols = match cols {
        Some(c) => c,
        None => {
            owned = im2col(x, g);
            &owned
        }
    };
    let (k, nl) = (g.k(), g.n * g.l());
    let g2 = nc_to_cn(gy, g.n, g.cout, g.l());
    let mut dw = vec![0.0; g.cout * k];
    // g2 [cout, nl] x cols^T [nl, k]
    gemm(
        g.cout,
        nl,
        k,
        &g2,
        (nl as isize, 1),
        cols,
        (1, nl as isize),
        0.0,
        &mut dw,
    );
    dw
}

fn geom_for(x_shape: &[usize], w_shape: &[usize], stride: usize, pad: usize) -> ConvGeom {
    assert_eq!(
        x_shape.len(),
        4,
        "conv input must be NCHW, got {:?}",
        x_shape
    );
    assert_eq!(w_shape.len(), 4, "conv weight must be [co, ci, kh, kw]");
    assert_eq!(
        x_shape[1], w_shape[1],
        "conv channel mismatch: input {:?}, weight {:?}",
        x_shape, w_shape
    );
    ConvGeom {
        n: x_shape[0],
        cin: x_shape[1],
        cout: w_shape[0],
        h: x_shape[2],
        w: x_shape[3],
        kh: w_shape[2],
        kw: w_shape[3],
        stride,
        pad,
    }
}

/// Keeps the forward im2col columns for the weight gradient.
struct Conv2dOp(ConvGeom, Option<Rc<Vec<f64>>>);
impl Backward for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }
    fn backward(&self, inputs: &[Var], _: &Var, g: &Var) -> Vec<Option<Var>> {
        let geom = self.0;
        let gx = inputs[0]
            .requires_grad()
            .then(|| conv_input_grad(g, &inputs[1], geom));
        let gw = inputs[1]
            .requires_grad()
            .then(|| conv_weight_grad_cached(&inputs[0], g, geom, self.1.clone()));
        vec![gx, gw]
    }
}

/// NCHW convolution (cross-correlation) without bias.
pub fn conv2d(x: &Var, w: &Var, stride: usize, pad: usize) -> Var {
    let geom = geom_for(x.shape(), w.shape(), stride, pad);
    conv2d_geom(x, w, geom)
}

fn conv2d_geom(x: &Var, w: &Var, geom: ConvGeom) -> Var {
    let (out, cols) = conv_forward_raw(x.value().data(), w.value().data(), &geom);
    let keep = (w.requires_grad() && grad_enabled()).then(|| Rc::new(cols));
    Var::from_op(
        Tensor::new(&[geom.n, geom.cout, geom.out_h(), geom.out_w()], out),
        vec![x.clone(), w.clone()],
        Conv2dOp(geom, keep),
    )
}

struct ConvInputGradOp(ConvGeom);
impl Backward for ConvInputGradOp {
    fn name(&self) -> &'static str {
        "conv2d_input_grad"
    }
    fn backward(&self, inputs: &[Var], _: &Var, dz: &Var) -> Vec<Option<Var>> {
        let geom = self.0;
        let dg = inputs[0]
            .requires_grad()
            .then(|| conv2d_geom(dz, &inputs[1], geom));
        let dw = inputs[1]
            .requires_grad()
            .then(|| conv_weight_grad(dz, &inputs[0], geom));
        vec![dg, dw]
    }
}

/// Adjoint of [`conv2d`] in its input (transposed convolution).
pub(crate) fn conv_input_grad(gy: &Var, w: &Var, geom: ConvGeom) -> Var {
    let out = conv_input_grad_raw(gy.value().data(), w.value().data(), &geom);
    Var::from_op(
        Tensor::new(&[geom.n, geom.cin, geom.h, geom.w], out),
        vec![gy.clone(), w.clone()],
        ConvInputGradOp(geom),
    )
}

struct ConvWeightGradOp(ConvGeom);
impl Backward for ConvWeightGradOp {
    fn name(&self) -> &'static str {
        "conv2d_weight_grad"
    }
    fn backward(&self, inputs: &[Var], _: &Var, du: &Var) -> Vec<Option<Var>> {
        let geom = self.0;
        let dx = inputs[0]
            .requires_grad()
            .then(|| conv_input_grad(&inputs[1], du, geom));
        let dg = inputs[1]
            .requires_grad()
            .then(|| conv2d_geom(&inputs[0], du, geom));
        vec![dx, dg]
    }
}

/// Adjoint of [`conv2d`] in its weight.
pub(crate) fn conv_weight_grad(x: &Var, gy: &Var, geom: ConvGeom) -> Var {
    conv_weight_grad_cached(x, gy, geom, None)
}

fn conv_weight_grad_cached(x: &Var, gy: &Var, geom: ConvGeom, cols: Option<Rc<Vec<f64>>>) -> Var {
    let out = conv_weight_grad_raw(
        x.value().data(),
        gy.value().data(),
        &geom,
        cols.as_deref().map(|c| c.as_slice()),
    );
    Var::from_op(
        Tensor::new(&[geom.cout, geom.cin, geom.kh, geom.kw], out),
        vec![x.clone(), gy.clone()],
        ConvWeightGradOp(geom),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_tensors;
    use crate::ops;

    /// Direct nested-loop convolution.
    fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let g = geom_for(x.shape(), w.shape(), stride, pad);
        let (ho, wo) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.n * g.cout * ho * wo];
        for n in 0..g.n {
            for co in 0..g.cout {
                for oi in 0..ho {
                    for oj in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..g.cin {
                            for ki in 0..g.kh {
                                for kj in 0..g.kw {
                                    let ii = (oi * stride + ki) as isize - pad as isize;
                                    let jj = (oj * stride + kj) as isize - pad as isize;
                                    if ii < 0 || jj < 0 || ii >= g.h as isize || jj >= g.w as isize
                                    {
                                        continue;
                                    }
                                    acc += x.data()[((n * g.cin + ci) * g.h + ii as usize) * g.w
                                        + jj as usize]
                                        * w.data()[((co * g.cin + ci) * g.kh + ki) * g.kw + kj];
                                }
                            }
                        }
                        out[((n * g.cout + co) * ho + oi) * wo + oj] = acc;
                    }
                }
            }
        }
        Tensor::new(&[g.n, g.cout, ho, wo], out)
    }

    fn pseudo(shape: &[usize], seed: u64) -> Tensor {
        let n: usize = shape.iter().product();
        let mut s = seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        let data = (0..n)
            .map(|_| {
                s = s
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::new(shape, data)
    }

    #[test]
    fn matches_naive_convolution() {
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (2, 1, 4), (1, 0, 1)] {
            let x = pseudo(&[2, 3, 7, 6], 1);
            let w = pseudo(&[4, 3, k, k], 2);
            let fast = conv2d(
                &Var::constant(x.clone()),
                &Var::constant(w.clone()),
                stride,
                pad,
            );
            let slow = naive_conv(&x, &w, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.value().data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x0 = pseudo(&[2, 2, 5, 5], 3);
        let w0 = pseudo(&[3, 2, 3, 3], 4);
        let r = pseudo(&[2, 3, 3, 3], 5);
        let f = |x: &Tensor, w: &Tensor| -> f64 {
            naive_conv(x, w, 2, 1)
                .data()
                .iter()
                .zip(r.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let x = Var::leaf(x0.clone());
        let w = Var::leaf(w0.clone());
        let y = conv2d(&x, &w, 2, 1);
        let loss = ops::sum(&ops::mul_const(&y, &r));
        let g = grad_tensors(&loss, &[x, w]);
        let eps = 1e-6;
        for i in 0..x0.len() {
            let mut p = x0.clone();
            p.data_mut()[i] += eps;
            let mut m = x0.clone();
            m.data_mut()[i] -= eps;
            let fd = (f(&p, &w0) - f(&m, &w0)) / (2.0 * eps);
            assert!((fd - g[0].data()[i]).abs() < 1e-8);
        }
        for i in 0..w0.len() {
            let mut p = w0.clone();
            p.data_mut()[i] += eps;
            let mut m = w0.clone();
            m.data_mut()[i] -= eps;
            let fd = (f(&x0, &p) - f(&x0, &m)) / (2.0 * eps);
            assert!((fd - g[1].data()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn second_order_through_conv() {
        // h(x) = || d/dx sum(r * conv(x, w)) ||^2 depends on w quadratically;
        // its gradient in w must match finite differences.
        let x0 = pseudo(&[1, 2, 4, 4], 6);
        let w0 = pseudo(&[2, 2, 3, 3], 7);
        let r = pseudo(&[1, 2, 4, 4], 8);
        let h = |w: &Var| -> (Var, Var) {
            let x = Var::leaf(x0.clone());
            let y = ops::leaky_relu(&conv2d(&x, w, 1, 1), 0.2);
            let s = ops::sum(&ops::mul_const(&y, &r));
            let gx = crate::autograd::grad(&s, std::slice::from_ref(&x), true).remove(0);
            (ops::sum(&ops::square(&gx)), x)
        };
        let w = Var::leaf(w0.clone());
        let (val, _) = h(&w);
        let gw = grad_tensors(&val, &[w]);
        let eps = 1e-6;
        for i in 0..w0.len() {
            let mut p = w0.clone();
            p.data_mut()[i] += eps;
            let mut m = w0.clone();
            m.data_mut()[i] -= eps;
            let fp = h(&Var::constant(p)).0.item();
            let fm = h(&Var::constant(m)).0.item();
            let fd = (fp - fm) / (2.0 * eps);
            assert!(
                (fd - gw[0].data()[i]).abs() < 1e-6,
                "{} vs {}",
                fd,
                gw[0].data()[i]
            );
        }
    }
}
