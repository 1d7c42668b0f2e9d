//! Differentiable tensor operations on [`Var`].
//!
//! Binary elementwise ops require identical shapes; use [`broadcast_to`]
//! explicitly. All backward rules here are built from recorded ops and
//! support higher-order differentiation.

use crate::autograd::{Backward, Var};
use crate::tensor::{numel, Tensor};

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each element of `out_shape` (row-major), the flat index into a tensor
/// of `in_shape` that broadcasts to it.
fn broadcast_index_map(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    assert_eq!(
        in_shape.len(),
        out_shape.len(),
        "broadcast rank mismatch {:?} -> {:?}",
        in_shape,
        out_shape
    );
    for (&i, &o) in in_shape.iter().zip(out_shape) {
        assert!(
            i == o || i == 1,
            "cannot broadcast {:?} to {:?}",
            in_shape,
            out_shape
        );
    }
    let in_str = strides(in_shape);
    let eff: Vec<usize> = in_shape
        .iter()
        .zip(&in_str)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    let total = numel(out_shape);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    for _ in 0..total {
        map.push(off);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

pub(crate) fn broadcast_tensor(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape() == shape {
        return t.clone();
    }
    let map = broadcast_index_map(t.shape(), shape);
    let src = t.data();
    Tensor::new(shape, map.iter().map(|&i| src[i]).collect())
}

pub(crate) fn sum_to_tensor(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape() == shape {
        return t.clone();
    }
    let map = broadcast_index_map(shape, t.shape());
    let mut out = vec![0.0; numel(shape)];
    for (&dst, &v) in map.iter().zip(t.data()) {
        out[dst] += v;
    }
    Tensor::new(shape, out)
}

macro_rules! simple_op {
    ($name:ident) => {
        struct $name;
    };
}

// ---- elementwise binary -------------------------------------------------

simple_op!(AddOp);
impl Backward for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, _: &[Var], _: &Var, g: &Var) -> Vec<Option<Var>> {
        vec![Some(g.clone()), Some(g.clone())]
    }
}

pub fn add(a: &Var, b: &Var) -> Var {
    let v = a.value().zip_map(b.value(), |x, y| x + y);
    Var::from_op(v, vec![a.clone(), b.clone()], AddOp)
}

simple_op!(SubOp);
impl Backward for SubOp {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, _: &[Var], _: &Var, g: &Var) -> Vec<Option<Var>> {
        vec![Some(g.clone()), Some(neg(g))]
    }
}

pub fn sub(a: &Var, b: &Var) -> Var {
    let v = a.value().zip_map(b.value(), |x, y| x - y);
    Var::from_op(v, vec![a.clone(), b.clone()], SubOp)
}

simple_op!(MulOp);
impl Backward for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, inputs: &[Var], _: &Var, g: &Var) -> Vec<Option<Var>> {
        let ga = inputs[0].requires_grad().then(|| mul(g, &inputs[1]));
        let gb = inputs[1].requires_grad().then(|| mul(g, &inputs[0]));
        vec![ga, gb]
    }
}

pub fn mul(a: &Var, b: &Var) -> Var {
    let v = a.value().zip_map(b.value(), |x, y| x * y);
    Var::from_op(v, vec![a.clone(), b.clone()], MulOp)
}

/// Elementwise product with a constant tensor.
pub fn mul_const(a: &Var, c: &Tensor) -> Var {
    mul(a, &Var::constant(c.clone()))
}

// ---- elementwise unary --------------------------------------------------

struct ScaleOp(f64);
impl Backward for ScaleOp {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, _: &[Var], _: &Var, g: &Var) -> Vec<Option<Var>> {
        vec![Some(scale(g, self.0))]
    }
}

pub fn scale(a: &Var, s: f64) -> Var {
    Var::from_op(a.value().map(|x| x * s), vec![a.clone()], ScaleOp(s))
}

pub fn neg(a: &Var) -> Var {
    scale(a, -1.0)
}

simple_op!(AddScalarOp);
impl Backward for AddScalarOp {
    fn name(&self) -> &'static str {
        "add_scalar"
    }
    fn backward(&self, _: &[Var], _: &Var, g: &Var) -> Vec<Option<Var>> {
        vec![Some(g.clone())]
    }
}

pub fn add_scalar(a: &Var, s: f64) -> Var {
    Var::from_op(a.value().map(|x| x + s), vec![a.clone()], AddScalarOp)
}

/// Multiplies the gradient by a fixed mask; shared by piecewise-linear ops.
struct MaskOp {
    name: &'static str,
    mask: Tensor,
}
impl Backward for MaskOp {
    fn name(&self) -> &'static str {
        self.name
    }
    fn backward(&self, _: &[Var], _: &Var, g: &Var) -> Vec<Option<Var>> {
        vec![Some(mul_const(g, &self.mask))]
    }
}

pub fn leaky_relu(a: &Var, slope: f64) -> Var {
    let mask = a.value().map(|x| if x > 0.0 { 1.0 } else { slope });
    let v = a.value().zip_map(&mask, |x, m| x * m);
    Var::from_op(
        v,
        vec![a.clone()],
        MaskOp {
            name: "leaky_relu",
            mask,
        },
    )
}

pub fn relu(a: &Var) -> Var {
    leaky_relu(a, 0.0)
}

pub fn abs(a: &Var) -> Var {
    let mask = a.value().map(|x| {
        if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        }
    });
    Var::from_op(
        a.value().map(f64::abs),
        vec![a.clone()],
        MaskOp { name: "abs", mask },
    )
}

pub fn clamp(a: &Var, lo: f64, hi: f64) -> Var {
    let mask = a
        .value()
        .map(|x| if x >= lo && x <= hi { 1.0 } else { 0.0 });
    Var::from_op(
        a.value().map(|x| x.clamp(lo, hi)),
        vec![a.clone()],
        MaskOp {
            name: "clamp",
            mask,
        },
    )
}

simple_op!(TanhOp);
impl Backward for TanhOp {
    fn name(&self) -> &'static str {
        "tanh"
    }
    fn backward(&self, _: &[Var], out: &Var, g: &Var) -> Vec<Option<Var>> {
        let d = add_scalar(&neg(&mul(out, out)), 1.0);
        vec![Some(mul(g, &d))]
    }
}

pub fn tanh(a: &Var) -> Var {
    Var::from_op(a.value().map(f64::tanh), vec![a.clone()], TanhOp)
}

simple_op!(ExpOp);
impl Backward for ExpOp {
    fn name(&self) -> &'static str {
        "exp"
    }
    fn backward(&self, _: &[Var], out: &Var, g: &Var) -> Vec<Option<Var>> {
        vec![Some(mul(g, out))]
    }
}

pub fn exp(a: &Var) -> Var {
    Var::from_op(a.value().map(f64::exp), vec![a.clone()], ExpOp)
}

simple_op!(RecipOp);
impl Backward for RecipOp {
    fn name(&self) -> &'static str {
        "recip"
    }
    fn backward(&self, _: &[Var], out: &Var, g: &Var) -> Vec<Option<Var>> {
        vec![Some(neg(&mul(g, &mul(out, out))))]
    }
}

pub fn recip(a: &Var) -> Var {
    Var::from_op(a.value().map(|x| 1.0 / x), vec![a.clone()], RecipOp)
}

simple_op!(SqrtOp);
impl Backward for SqrtOp {
    fn name(&self) -> &'static str {
        "sqrt"
    }
    fn backward(&self, _: &[Var], out: &Var, g: &Var) -> Vec<Option<Var>> {
        vec![Some(scale(&mul(g, &recip(out)), 0.5))]
    }
}

pub fn sqrt(a: &Var) -> Var {
    Var::from_op(a.value().map(f64::sqrt), vec![a.clone()], SqrtOp)
}

pub fn square(a: &Var) -> Var {
    mul(a, a)
}

// ---- shape ----------------------------------------------------------------

struct ReshapeOp(Vec<usize>);
impl Backward for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, _: &[Var], _: &Var, g: &Var) -> Vec<Option<Var>> {
        vec![Some(reshape(g, &self.0))]
    }
}

pub fn reshape(a: &Var, shape: &[usize]) -> Var {
    let v = a
        .value()
        .clone()
        .reshape(shape)
        .unwrap_or_else(|e| panic!("{e}"));
    Var::from_op(v, vec![a.clone()], ReshapeOp(a.shape().to_vec()))
}

/// Collapses all but the leading axis.
pub fn flatten(a: &Var) -> Var {
    let n = a.shape()[0];
    let rest = a.value().len() / n.max(1);
    reshape(a, &[n, rest])
}

struct BroadcastOp(Vec<usize>);
impl Backward for BroadcastOp {
    fn name(&self) -> &'static str {
        "broadcast_to"
    }
    fn backward(&self, _: &[Var], _: &Var, g: &Var) -> Vec<Option<Var>> {
        vec![Some(sum_to(g, &self.0))]
    }
}

pub fn broadcast_to(a: &Var, shape: &[usize]) -> Var {
    if a.shape() == shape {
        return a.clone();
    }
    let v = broadcast_tensor(a.value(), shape);
    Var::from_op(v, vec![a.clone()], BroadcastOp(a.shape().to_vec()))
}

struct SumToOp(Vec<usize>);
impl Backward for SumToOp {
    fn name(&self) -> &'static str {
        "sum_to"
    }
    fn backward(&self, _: &[Var], _: &Var, g: &Var) -> Vec<Option<Var>> {
        vec![Some(broadcast_to(g, &self.0))]
    }
}

/// Sums over axes so that the result has `shape` (same rank, reduced axes
/// of extent 1).
pub fn sum_to(a: &Var, shape: &[usize]) -> Var {
    if a.shape() == shape {
        return a.clone();
    }
    let v = sum_to_tensor(a.value(), shape);
    Var::from_op(v, vec![a.clone()], SumToOp(a.shape().to_vec()))
}

/// Sum of all elements, as a scalar.
pub fn sum(a: &Var) -> Var {
    let ones = vec![1; a.shape().len()];
    let s = sum_to(a, &ones);
    reshape(&s, &[])
}

pub fn mean(a: &Var) -> Var {
    let n = a.value().len() as f64;
    scale(&sum(a), 1.0 / n)
}

/// Row sums of a 2-D tensor, keeping the reduced axis: `[n, k] -> [n, 1]`.
pub fn sum_rows(a: &Var) -> Var {
    sum_to(a, &[a.shape()[0], 1])
}

/// Adds a per-channel bias `[c]` to an `[n, c, ...]` tensor.
pub fn add_channel_bias(x: &Var, bias: &Var) -> Var {
    let mut bshape = vec![1; x.shape().len()];
    bshape[1] = bias.shape()[0];
    let b = broadcast_to(&reshape(bias, &bshape), x.shape());
    add(x, &b)
}

struct TransposeOp;
impl Backward for TransposeOp {
    fn name(&self) -> &'static str {
        "transpose"
    }
    fn backward(&self, _: &[Var], _: &Var, g: &Var) -> Vec<Option<Var>> {
        vec![Some(transpose(g))]
    }
}

pub fn transpose(a: &Var) -> Var {
    let (r, c) = (a.shape()[0], a.shape()[1]);
    let src = a.value().data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    Var::from_op(Tensor::new(&[c, r], out), vec![a.clone()], TransposeOp)
}

pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the strides describe in-bounds views of `a` (m x k), `b`
    // (k x n) and `c` (m x n, row-major), checked by the callers' shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct MatmulOp;
impl Backward for MatmulOp {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, inputs: &[Var], _: &Var, g: &Var) -> Vec<Option<Var>> {
        let ga = inputs[0]
            .requires_grad()
            .then(|| matmul(g, &transpose(&inputs[1])));
        let gb = inputs[1]
            .requires_grad()
            .then(|| matmul(&transpose(&inputs[0]), g));
        vec![ga, gb]
    }
}

/// `[m, k] x [k, n] -> [m, n]`.
pub fn matmul(a: &Var, b: &Var) -> Var {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", a.shape(), b.shape());
    let mut out = vec![0.0; m * n];
    gemm(
        m,
        k,
        n,
        a.value().data(),
        (k as isize, 1),
        b.value().data(),
        (n as isize, 1),
        0.0,
        &mut out,
    );
    Var::from_op(
        Tensor::new(&[m, n], out),
        vec![a.clone(), b.clone()],
        MatmulOp,
    )
}

// ---- slicing / concatenation ---------------------------------------------

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, inner)
}

struct NarrowOp {
    axis: usize,
    start: usize,
    full: usize,
}
impl Backward for NarrowOp {
    fn name(&self) -> &'static str {
        "narrow"
    }
    fn backward(&self, _: &[Var], _: &Var, g: &Var) -> Vec<Option<Var>> {
        vec![Some(embed(g, self.axis, self.start, self.full))]
    }
}

/// Elements `[start, start + len)` along `axis`.
pub fn narrow(a: &Var, axis: usize, start: usize, len: usize) -> Var {
    let shape = a.shape();
    let full = shape[axis];
    assert!(start + len <= full, "narrow out of range");
    let (outer, inner) = outer_inner(shape, axis);
    let src = a.value().data();
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * full * inner + start * inner;
        out.extend_from_slice(&src[base..base + len * inner]);
    }
    let mut oshape = shape.to_vec();
    oshape[axis] = len;
    Var::from_op(
        Tensor::new(&oshape, out),
        vec![a.clone()],
        NarrowOp { axis, start, full },
    )
}

struct EmbedOp {
    axis: usize,
    start: usize,
    len: usize,
}
impl Backward for EmbedOp {
    fn name(&self) -> &'static str {
        "embed"
    }
    fn backward(&self, _: &[Var], _: &Var, g: &Var) -> Vec<Option<Var>> {
        vec![Some(narrow(g, self.axis, self.start, self.len))]
    }
}

/// Places `a` at offset `start` along `axis` inside zeros of extent `full`.
fn embed(a: &Var, axis: usize, start: usize, full: usize) -> Var {
    let shape = a.shape();
    let len = shape[axis];
    let (outer, inner) = outer_inner(shape, axis);
    let mut oshape = shape.to_vec();
    oshape[axis] = full;
    let mut out = vec![0.0; numel(&oshape)];
    let src = a.value().data();
    for o in 0..outer {
        let dst = o * full * inner + start * inner;
        out[dst..dst + len * inner].copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
    }
    Var::from_op(
        Tensor::new(&oshape, out),
        vec![a.clone()],
        EmbedOp { axis, start, len },
    )
}

struct ConcatOp {
    axis: usize,
    sizes: Vec<usize>,
}
impl Backward for ConcatOp {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn backward(&self, inputs: &[Var], _: &Var, g: &Var) -> Vec<Option<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(self.sizes.len());
        for (inp, &len) in inputs.iter().zip(&self.sizes) {
            out.push(
                inp.requires_grad()
                    .then(|| narrow(g, self.axis, start, len)),
            );
            start += len;
        }
        out
    }
}

pub fn concat(parts: &[Var], axis: usize) -> Var {
    assert!(!parts.is_empty(), "concat of nothing");
    let first = parts[0].shape().to_vec();
    for p in parts {
        let s = p.shape();
        assert_eq!(s.len(), first.len(), "concat rank mismatch");
        for (d, (&a, &b)) in s.iter().zip(&first).enumerate() {
            assert!(
                d == axis || a == b,
                "concat shape mismatch {:?} vs {:?}",
                s,
                first
            );
        }
    }
    let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    let total: usize = sizes.iter().sum();
    let (outer, inner) = outer_inner(&first, axis);
    let mut oshape = first.clone();
    oshape[axis] = total;
    let mut out = Vec::with_capacity(numel(&oshape));
    for o in 0..outer {
        for (p, &len) in parts.iter().zip(&sizes) {
            let src = p.value().data();
            out.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
        }
    }
    Var::from_op(
        Tensor::new(&oshape, out),
        parts.to_vec(),
        ConcatOp { axis, sizes },
    )
}

// ---- spatial resampling ----------------------------------------------------

simple_op!(Upsample2Op);
impl Backward for Upsample2Op {
    fn name(&self) -> &'static str {
        "upsample_nearest2"
    }
    fn backward(&self, _: &[Var], _: &Var, g: &Var) -> Vec<Option<Var>> {
        vec![Some(sum_pool2(g))]
    }
}

/// Nearest-neighbour 2x upsampling of an NCHW tensor.
pub fn upsample_nearest2(a: &Var) -> Var {
    let s = a.shape();
    let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
    let src = a.value().data();
    let mut out = vec![0.0; nc * 4 * h * w];
    for p in 0..nc {
        for i in 0..2 * h {
            for j in 0..2 * w {
                out[p * 4 * h * w + i * 2 * w + j] = src[p * h * w + (i / 2) * w + j / 2];
            }
        }
    }
    Var::from_op(
        Tensor::new(&[s[0], s[1], 2 * h, 2 * w], out),
        vec![a.clone()],
        Upsample2Op,
    )
}

simple_op!(SumPool2Op);
impl Backward for SumPool2Op {
    fn name(&self) -> &'static str {
        "sum_pool2"
    }
    fn backward(&self, _: &[Var], _: &Var, g: &Var) -> Vec<Option<Var>> {
        vec![Some(upsample_nearest2(g))]
    }
}

/// 2x2 sum pooling (adjoint of [`upsample_nearest2`]).
pub fn sum_pool2(a: &Var) -> Var {
    let s = a.shape();
    let (nc, h, w) = (s[0] * s[1], s[2] / 2, s[3] / 2);
    let (hh, ww) = (s[2], s[3]);
    let src = a.value().data();
    let mut out = vec![0.0; nc * h * w];
    for p in 0..nc {
        for i in 0..hh {
            for j in 0..ww {
                out[p * h * w + (i / 2) * w + j / 2] += src[p * hh * ww + i * ww + j];
            }
        }
    }
    Var::from_op(
        Tensor::new(&[s[0], s[1], h, w], out),
        vec![a.clone()],
        SumPool2Op,
    )
}

/// 2x2 average pooling.
pub fn avg_pool2(a: &Var) -> Var {
    scale(&sum_pool2(a), 0.25)
}

// ---- row-wise ---------------------------------------------------------------

simple_op!(LogSoftmaxOp);
impl Backward for LogSoftmaxOp {
    fn name(&self) -> &'static str {
        "log_softmax"
    }
    fn backward(&self, _: &[Var], out: &Var, g: &Var) -> Vec<Option<Var>> {
        let p = exp(out);
        let gs = broadcast_to(&sum_rows(g), g.shape());
        vec![Some(sub(g, &mul(&p, &gs)))]
    }
}

/// Row-wise log-softmax of a `[n, k]` tensor.
pub fn log_softmax(a: &Var) -> Var {
    let (n, k) = (a.shape()[0], a.shape()[1]);
    let src = a.value().data();
    let mut out = vec![0.0; n * k];
    for r in 0..n {
        let row = &src[r * k..(r + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for c in 0..k {
            out[r * k + c] = row[c] - lse;
        }
    }
    Var::from_op(Tensor::new(&[n, k], out), vec![a.clone()], LogSoftmaxOp)
}

/// Per-row Euclidean norm `[n, k] -> [n]`, with `eps` added under the root.
pub fn row_norm(a: &Var, eps: f64) -> Var {
    let n = a.shape()[0];
    let s = sum_rows(&square(a));
    reshape(&sqrt(&add_scalar(&s, eps)), &[n])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{grad, grad_tensors};

    fn leaf(shape: &[usize], data: Vec<f64>) -> Var {
        Var::leaf(Tensor::new(shape, data))
    }

    #[test]
    fn broadcast_and_sum_to_are_adjoint() {
        let a = leaf(&[1, 3], vec![1.0, 2.0, 3.0]);
        let b = broadcast_to(&a, &[2, 3]);
        assert_eq!(b.value().data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let s = sum(&b);
        let g = grad_tensors(&s, &[a]);
        assert_eq!(g[0].data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn matmul_gradient_shapes() {
        let a = leaf(&[2, 3], (0..6).map(f64::from).collect());
        let b = leaf(&[3, 4], (0..12).map(f64::from).collect());
        let c = matmul(&a, &b);
        assert_eq!(c.shape(), &[2, 4]);
        let g = grad_tensors(&sum(&c), &[a.clone(), b.clone()]);
        // d/da sum(ab) = rowsum(b) broadcast
        assert_eq!(g[0].data(), &[6.0, 22.0, 38.0, 6.0, 22.0, 38.0]);
        assert_eq!(
            g[1].data(),
            &[3.0, 3.0, 3.0, 3.0, 5.0, 5.0, 5.0, 5.0, 7.0, 7.0, 7.0, 7.0]
        );
    }

    #[test]
    fn concat_narrow_round_trip() {
        let a = leaf(&[2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&[2, 2, 2], vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = concat(&[a.clone(), b.clone()], 1);
        assert_eq!(
            c.value().data(),
            &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]
        );
        let back = narrow(&c, 1, 1, 2);
        assert_eq!(back.value(), b.value());
        let w = Var::constant(Tensor::new(&[2, 3, 2], (0..12).map(f64::from).collect()));
        let g = grad_tensors(&sum(&mul(&c, &w)), &[a, b]);
        assert_eq!(g[0].data(), &[0.0, 1.0, 6.0, 7.0]);
    }

    #[test]
    fn second_order_of_cubic() {
        // f(x) = x^3 ; f'' = 6x
        let x = leaf(&[1], vec![2.0]);
        let y = sum(&mul(&mul(&x, &x), &x));
        let g = grad(&y, std::slice::from_ref(&x), true);
        assert_eq!(g[0].value().data(), &[12.0]);
        let gg = grad_tensors(&sum(&g[0]), &[x]);
        assert_eq!(gg[0].data(), &[12.0]);
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let a = leaf(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 5.0]);
        let l = log_softmax(&a);
        for r in 0..2 {
            let s: f64 = l.value().data()[r * 3..r * 3 + 3]
                .iter()
                .map(|v| v.exp())
                .sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pooling_is_adjoint_of_upsampling() {
        let a = leaf(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let u = upsample_nearest2(&a);
        assert_eq!(u.shape(), &[1, 1, 4, 4]);
        let p = sum_pool2(&u);
        assert_eq!(p.value().data(), &[4.0, 8.0, 12.0, 16.0]);
    }
}
