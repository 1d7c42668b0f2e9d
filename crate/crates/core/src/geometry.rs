//! Parametric 2-D transforms, sampling grids and bilinear warping.
//!
//! All coordinates live in the normalized frame `[-1, 1]^2` with
//! `(-1, -1)` at the centre of the top-left pixel and `(1, 1)` at the centre
//! of the bottom-right pixel. Grids use backward warping: the grid entry for
//! an output pixel is the source location it samples from.

use std::fmt;

use crate::autograd::{Backward, Var};
use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Minimum |determinant| for a transform to count as invertible.
pub const SINGULAR_TOL: f64 = 1e-8;

/// Side length of the fixed thin-plate-spline control grid.
pub const TPS_GRID: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TransformKind {
    Affine,
    Homography,
    Tps,
}

impl TransformKind {
    pub fn param_len(self) -> usize {
        match self {
            TransformKind::Affine => 6,
            TransformKind::Homography => 8,
            TransformKind::Tps => 2 * TPS_GRID * TPS_GRID,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TransformKind::Affine => "affine",
            TransformKind::Homography => "homography",
            TransformKind::Tps => "tps",
        }
    }

    pub fn identity_params(self) -> Vec<f64> {
        match self {
            TransformKind::Affine => vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            TransformKind::Homography => vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
            TransformKind::Tps => vec![0.0; self.param_len()],
        }
    }

    /// Affine and homography transforms have closed-form inverses.
    pub fn is_projective(self) -> bool {
        !matches!(self, TransformKind::Tps)
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "affine" => Ok(TransformKind::Affine),
            "homography" => Ok(TransformKind::Homography),
            "tps" => Ok(TransformKind::Tps),
            other => Err(Error::Config(format!("unknown transform kind `{other}`"))),
        }
    }
}

pub type Mat3 = [[f64; 3]; 3];

pub fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

pub fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Inverse by adjugate; `None` if |det| < [`SINGULAR_TOL`].
pub fn mat3_inv(m: &Mat3) -> Option<Mat3> {
    let d = det3(m);
    if !d.is_finite() || d.abs() < SINGULAR_TOL {
        return None;
    }
    let c =
        |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let adj = [
        [c(1, 2, 1, 2), -c(0, 2, 1, 2), c(0, 1, 1, 2)],
        [-c(1, 2, 0, 2), c(0, 2, 0, 2), -c(0, 1, 0, 2)],
        [c(1, 2, 0, 1), -c(0, 2, 0, 1), c(0, 1, 0, 1)],
    ];
    let mut inv = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            inv[i][j] = adj[i][j] / d;
        }
    }
    Some(inv)
}

fn params_to_mat(kind: TransformKind, p: &[f64]) -> Mat3 {
    match kind {
        TransformKind::Affine => [[p[0], p[1], p[2]], [p[3], p[4], p[5]], [0.0, 0.0, 1.0]],
        TransformKind::Homography => [[p[0], p[1], p[2]], [p[3], p[4], p[5]], [p[6], p[7], 1.0]],
        TransformKind::Tps => unreachable!("tps has no matrix form"),
    }
}

/// A parametric mapping of normalized coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Transform {
    kind: TransformKind,
    params: Vec<f64>,
    /// Pixel size of the image the transform was estimated on, if known.
    pub source_size: Option<(usize, usize)>,
}

/// Validates `params` for `kind` and builds a transform.
pub fn make_transform(kind: TransformKind, params: &[f64]) -> Result<Transform> {
    Transform::new(kind, params)
}

impl Transform {
    pub fn new(kind: TransformKind, params: &[f64]) -> Result<Self> {
        if params.len() != kind.param_len() {
            return Err(Error::ParamLength {
                kind: kind.name(),
                expected: kind.param_len(),
                got: params.len(),
            });
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "non-finite transform parameter".into(),
            ));
        }
        match kind {
            TransformKind::Affine => {
                let det = params[0] * params[4] - params[1] * params[3];
                if det.abs() < SINGULAR_TOL {
                    return Err(Error::Singular { det });
                }
            }
            TransformKind::Homography => {
                let det = det3(&params_to_mat(kind, params));
                if det.abs() < SINGULAR_TOL {
                    return Err(Error::Singular { det });
                }
            }
            TransformKind::Tps => {}
        }
        Ok(Self {
            kind,
            params: params.to_vec(),
            source_size: None,
        })
    }

    pub fn identity(kind: TransformKind) -> Self {
        Self {
            kind,
            params: kind.identity_params(),
            source_size: None,
        }
    }

    /// Pure translation by `(du, dv)` normalized units.
    pub fn translation(kind: TransformKind, du: f64, dv: f64) -> Result<Self> {
        let mut p = kind.identity_params();
        match kind {
            TransformKind::Tps => {
                for k in 0..TPS_GRID * TPS_GRID {
                    p[2 * k] = du;
                    p[2 * k + 1] = dv;
                }
            }
            _ => {
                p[2] = du;
                p[5] = dv;
            }
        }
        Self::new(kind, &p)
    }

    /// Translation by a whole number of pixels on an `(h, w)` image.
    pub fn translation_px(
        kind: TransformKind,
        dx: f64,
        dy: f64,
        (h, w): (usize, usize),
    ) -> Result<Self> {
        Self::translation(
            kind,
            dx * 2.0 / (w as f64 - 1.0),
            dy * 2.0 / (h as f64 - 1.0),
        )
    }

    /// Rotation about the frame centre by `angle` radians.
    pub fn rotation(kind: TransformKind, angle: f64) -> Result<Self> {
        if !kind.is_projective() {
            return Err(Error::UnsupportedKind {
                op: "rotation",
                kind: kind.name(),
            });
        }
        let (s, c) = angle.sin_cos();
        let m = [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]];
        Self::from_matrix(kind, &m)
    }

    /// Builds an affine or homography transform from a 3x3 matrix,
    /// normalizing the homography gauge so that `m[2][2] == 1`.
    pub fn from_matrix(kind: TransformKind, m: &Mat3) -> Result<Self> {
        match kind {
            TransformKind::Affine => {
                if m[2][0].abs() > 1e-12 || m[2][1].abs() > 1e-12 || (m[2][2] - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidArgument(
                        "affine matrix must have last row [0, 0, 1]".into(),
                    ));
                }
                Self::new(
                    kind,
                    &[m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2]],
                )
            }
            TransformKind::Homography => {
                let s = m[2][2];
                if !s.is_finite() || s.abs() < 1e-12 {
                    return Err(Error::InvalidArgument(
                        "homography (3,3) entry vanishes; cannot normalize gauge".into(),
                    ));
                }
                let p: Vec<f64> = (0..8).map(|i| m[i / 3][i % 3] / s).collect();
                Self::new(kind, &p)
            }
            TransformKind::Tps => Err(Error::UnsupportedKind {
                op: "from_matrix",
                kind: "tps",
            }),
        }
    }

    pub fn kind(&self) -> TransformKind {
        self.kind
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn matrix(&self) -> Result<Mat3> {
        if !self.kind.is_projective() {
            return Err(Error::UnsupportedKind {
                op: "matrix",
                kind: self.kind.name(),
            });
        }
        Ok(params_to_mat(self.kind, &self.params))
    }

    /// Maps one normalized point.
    pub fn apply(&self, (x, y): (f64, f64)) -> (f64, f64) {
        match self.kind {
            TransformKind::Affine => {
                let p = &self.params;
                (p[0] * x + p[1] * y + p[2], p[3] * x + p[4] * y + p[5])
            }
            TransformKind::Homography => {
                let p = &self.params;
                let d = p[6] * x + p[7] * y + 1.0;
                (
                    (p[0] * x + p[1] * y + p[2]) / d,
                    (p[3] * x + p[4] * y + p[5]) / d,
                )
            }
            TransformKind::Tps => {
                let b = tps_weights_at(x, y);
                let (mut u, mut v) = (x, y);
                for (k, bk) in b.iter().enumerate() {
                    u += bk * self.params[2 * k];
                    v += bk * self.params[2 * k + 1];
                }
                (u, v)
            }
        }
    }

    /// Largest absolute parameter difference from the identity of the same kind.
    pub fn distance_from_identity(&self) -> f64 {
        self.params
            .iter()
            .zip(self.kind.identity_params())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Inverse of an affine or homography transform, gauge-normalized.
pub fn invert(t: &Transform) -> Result<Transform> {
    if !t.kind.is_projective() {
        return Err(Error::UnsupportedKind {
            op: "invert",
            kind: t.kind.name(),
        });
    }
    let m = t.matrix()?;
    let inv = mat3_inv(&m).ok_or(Error::Singular { det: det3(&m) })?;
    let mut out = Transform::from_matrix(t.kind, &inv)?;
    out.source_size = t.source_size;
    Ok(out)
}

/// The transform that applies `b` first and then `a`.
pub fn compose(a: &Transform, b: &Transform) -> Result<Transform> {
    if a.kind != b.kind {
        return Err(Error::KindMismatch(a.kind.name(), b.kind.name()));
    }
    if !a.kind.is_projective() {
        return Err(Error::UnsupportedKind {
            op: "compose",
            kind: a.kind.name(),
        });
    }
    let m = mat3_mul(&a.matrix()?, &b.matrix()?);
    Transform::from_matrix(a.kind, &m)
}

/// Normalized coordinate of pixel index `i` along an axis of `n` pixels.
pub fn pixel_to_norm(i: usize, n: usize) -> f64 {
    -1.0 + 2.0 * i as f64 / (n as f64 - 1.0)
}

/// Per-output-pixel source coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingGrid {
    pub height: usize,
    pub width: usize,
    /// Row-major `(u, v)` pairs.
    pub coords: Vec<(f64, f64)>,
    pub valid_mask: Vec<bool>,
}

impl SamplingGrid {
    pub fn at(&self, i: usize, j: usize) -> (f64, f64) {
        self.coords[i * self.width + j]
    }

    /// Interleaved `[h, w, 2]` tensor for one item.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.coords.iter().flat_map(|&(u, v)| [u, v]).collect();
        Tensor::new(&[self.height, self.width, 2], data)
    }
}

fn in_frame(u: f64, v: f64) -> bool {
    u.abs() <= 1.0 + 1e-12 && v.abs() <= 1.0 + 1e-12
}

pub fn generate_grid(t: &Transform, (h, w): (usize, usize)) -> Result<SamplingGrid> {
    if h < 2 || w < 2 {
        return Err(Error::InvalidArgument(format!(
            "grid size must be at least 2x2, got {h}x{w}"
        )));
    }
    let mut coords = Vec::with_capacity(h * w);
    for i in 0..h {
        let y = pixel_to_norm(i, h);
        for j in 0..w {
            coords.push(t.apply((pixel_to_norm(j, w), y)));
        }
    }
    let valid_mask = coords.iter().map(|&(u, v)| in_frame(u, v)).collect();
    Ok(SamplingGrid {
        height: h,
        width: w,
        coords,
        valid_mask,
    })
}

/// Warps every item of `img` (values and mask) through the same grid.
pub fn warp(img: &ImageBatch, grid: &SamplingGrid, fill: f64) -> Result<ImageBatch> {
    let n = img.len();
    let gt = grid.to_tensor();
    let grids = Tensor::cat_outer(&vec![gt.reshape(&[1, grid.height, grid.width, 2])?; n])?;
    warp_each(img, &grids, fill)
}

/// Warps item `i` of `img` through `grids[i]` (`[n, h, w, 2]`).
pub fn warp_each(img: &ImageBatch, grids: &Tensor, fill: f64) -> Result<ImageBatch> {
    if grids.ndim() != 4 || grids.shape()[0] != img.len() || grids.shape()[3] != 2 {
        return Err(Error::Shape(format!(
            "grid {:?} does not match batch of {}",
            grids.shape(),
            img.len()
        )));
    }
    let values = sample_bilinear(&img.values, grids, fill);
    let mask = sample_bilinear(&img.mask, grids, 0.0).map(|m| if m >= 0.5 { 1.0 } else { 0.0 });
    Ok(ImageBatch {
        values,
        mask,
        identity: img.identity.clone(),
        camera: img.camera.clone(),
    })
}

// ---- bilinear sampling kernels ---------------------------------------------

struct Tap {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    wx: f64,
    wy: f64,
    sx: f64,
    sy: f64,
}

fn snap(p: f64) -> f64 {
    let r = p.round();
    if (p - r).abs() < 1e-9 {
        r
    } else {
        p
    }
}

/// Bilinear tap for normalized `(u, v)` on an `h x w` image, or `None` when
/// out of frame.
fn tap(u: f64, v: f64, h: usize, w: usize) -> Option<Tap> {
    if !in_frame(u, v) || !u.is_finite() || !v.is_finite() {
        return None;
    }
    let sx = 0.5 * (w as f64 - 1.0);
    let sy = 0.5 * (h as f64 - 1.0);
    let px = snap(((u + 1.0) * sx).clamp(0.0, w as f64 - 1.0));
    let py = snap(((v + 1.0) * sy).clamp(0.0, h as f64 - 1.0));
    let x0 = (px.floor() as usize).min(w.saturating_sub(2));
    let y0 = (py.floor() as usize).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    Some(Tap {
        x0,
        y0,
        x1,
        y1,
        wx: px - x0 as f64,
        wy: py - y0 as f64,
        sx,
        sy,
    })
}

/// `img [n, c, h, w]`, `grid [n, ho, wo, 2]` -> `[n, c, ho, wo]`.
pub fn sample_bilinear(img: &Tensor, grid: &Tensor, fill: f64) -> Tensor {
    let s = img.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (ho, wo) = (grid.shape()[1], grid.shape()[2]);
    let src = img.data();
    let g = grid.data();
    let mut out = vec![fill; n * c * ho * wo];
    for b in 0..n {
        for p in 0..ho * wo {
            let gi = (b * ho * wo + p) * 2;
            let Some(t) = tap(g[gi], g[gi + 1], h, w) else {
                continue;
            };
            let w00 = (1.0 - t.wx) * (1.0 - t.wy);
            let w01 = t.wx * (1.0 - t.wy);
            let w10 = (1.0 - t.wx) * t.wy;
            let w11 = t.wx * t.wy;
            for ch in 0..c {
                let plane = &src[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                out[(b * c + ch) * ho * wo + p] = w00 * plane[t.y0 * w + t.x0]
                    + w01 * plane[t.y0 * w + t.x1]
                    + w10 * plane[t.y1 * w + t.x0]
                    + w11 * plane[t.y1 * w + t.x1];
            }
        }
    }
    Tensor::new(&[n, c, ho, wo], out)
}

/// Gradients of `sample_bilinear` with respect to the image and the grid.
fn sample_bilinear_backward(
    img: &Tensor,
    grid: &Tensor,
    gout: &Tensor,
    need_img: bool,
    need_grid: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let s = img.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (ho, wo) = (grid.shape()[1], grid.shape()[2]);
    let src = img.data();
    let g = grid.data();
    let go = gout.data();
    let mut gimg = need_img.then(|| vec![0.0; src.len()]);
    let mut ggrid = need_grid.then(|| vec![0.0; g.len()]);
    for b in 0..n {
        for p in 0..ho * wo {
            let gi = (b * ho * wo + p) * 2;
            let Some(t) = tap(g[gi], g[gi + 1], h, w) else {
                continue;
            };
            let w00 = (1.0 - t.wx) * (1.0 - t.wy);
            let w01 = t.wx * (1.0 - t.wy);
            let w10 = (1.0 - t.wx) * t.wy;
            let w11 = t.wx * t.wy;
            let (mut du, mut dv) = (0.0, 0.0);
            for ch in 0..c {
                let base = (b * c + ch) * h * w;
                let gv = go[(b * c + ch) * ho * wo + p];
                if let Some(gi_img) = gimg.as_mut() {
                    gi_img[base + t.y0 * w + t.x0] += w00 * gv;
                    gi_img[base + t.y0 * w + t.x1] += w01 * gv;
                    gi_img[base + t.y1 * w + t.x0] += w10 * gv;
                    gi_img[base + t.y1 * w + t.x1] += w11 * gv;
                }
                if ggrid.is_some() {
                    let v00 = src[base + t.y0 * w + t.x0];
                    let v01 = src[base + t.y0 * w + t.x1];
                    let v10 = src[base + t.y1 * w + t.x0];
                    let v11 = src[base + t.y1 * w + t.x1];
                    let dpx = (1.0 - t.wy) * (v01 - v00) + t.wy * (v11 - v10);
                    let dpy = (1.0 - t.wx) * (v10 - v00) + t.wx * (v11 - v01);
                    du += gv * dpx * t.sx;
                    dv += gv * dpy * t.sy;
                }
            }
            if let Some(gg) = ggrid.as_mut() {
                gg[gi] += du;
                gg[gi + 1] += dv;
            }
        }
    }
    (
        gimg.map(|d| Tensor::new(img.shape(), d)),
        ggrid.map(|d| Tensor::new(grid.shape(), d)),
    )
}

struct GridSampleOp {
    fill: f64,
}
impl Backward for GridSampleOp {
    fn name(&self) -> &'static str {
        "grid_sample"
    }
    fn higher_order(&self) -> bool {
        false
    }
    fn backward(&self, inputs: &[Var], _: &Var, g: &Var) -> Vec<Option<Var>> {
        let _ = self.fill;
        let (gi, gg) = sample_bilinear_backward(
            inputs[0].value(),
            inputs[1].value(),
            g.value(),
            inputs[0].requires_grad(),
            inputs[1].requires_grad(),
        );
        vec![gi.map(Var::constant), gg.map(Var::constant)]
    }
}

/// Differentiable bilinear sampling; out-of-frame samples take `fill`.
/// First-order only.
pub fn grid_sample(img: &Var, grid: &Var, fill: f64) -> Var {
    assert_eq!(
        img.shape()[0],
        grid.shape()[0],
        "grid_sample batch mismatch"
    );
    let out = sample_bilinear(img.value(), grid.value(), fill);
    Var::from_op(out, vec![img.clone(), grid.clone()], GridSampleOp { fill })
}

// ---- batched differentiable grid generation and inversion -----------------

struct TransformGridOp {
    kind: TransformKind,
    h: usize,
    w: usize,
}

impl Backward for TransformGridOp {
    fn name(&self) -> &'static str {
        "transform_grid"
    }
    fn higher_order(&self) -> bool {
        false
    }
    fn backward(&self, inputs: &[Var], out: &Var, g: &Var) -> Vec<Option<Var>> {
        let params = inputs[0].value();
        let n = params.shape()[0];
        let pl = self.kind.param_len();
        let (h, w) = (self.h, self.w);
        let gd = g.value().data();
        let od = out.value().data();
        let mut gp = vec![0.0; n * pl];
        let tps = matches!(self.kind, TransformKind::Tps).then(|| TpsBasis::new(h, w));
        for b in 0..n {
            let p = &params.data()[b * pl..(b + 1) * pl];
            let gpb = &mut gp[b * pl..(b + 1) * pl];
            for i in 0..h {
                let y = pixel_to_norm(i, h);
                for j in 0..w {
                    let x = pixel_to_norm(j, w);
                    let idx = ((b * h + i) * w + j) * 2;
                    let (gu, gv) = (gd[idx], gd[idx + 1]);
                    match self.kind {
                        TransformKind::Affine => {
                            gpb[0] += gu * x;
                            gpb[1] += gu * y;
                            gpb[2] += gu;
                            gpb[3] += gv * x;
                            gpb[4] += gv * y;
                            gpb[5] += gv;
                        }
                        TransformKind::Homography => {
                            let den = p[6] * x + p[7] * y + 1.0;
                            let (u, v) = (od[idx], od[idx + 1]);
                            let a = gu / den;
                            let c = gv / den;
                            gpb[0] += a * x;
                            gpb[1] += a * y;
                            gpb[2] += a;
                            gpb[3] += c * x;
                            gpb[4] += c * y;
                            gpb[5] += c;
                            let s = -(a * u + c * v);
                            gpb[6] += s * x;
                            gpb[7] += s * y;
                        }
                        TransformKind::Tps => {
                            let basis = tps.as_ref().unwrap();
                            let bw = basis.weights_at(i * w + j);
                            for (k, bk) in bw.iter().enumerate() {
                                gpb[2 * k] += bk * gu;
                                gpb[2 * k + 1] += bk * gv;
                            }
                        }
                    }
                }
            }
        }
        vec![Some(Var::constant(Tensor::new(&[n, pl], gp)))]
    }
}

/// Sampling grids `[n, h, w, 2]` for a batch of parameter vectors `[n, p]`.
/// First-order only.
pub fn transform_grid(params: &Var, kind: TransformKind, (h, w): (usize, usize)) -> Var {
    let s = params.shape();
    assert_eq!(s.len(), 2, "params must be [n, p]");
    assert_eq!(s[1], kind.param_len(), "params length for {}", kind);
    let n = s[0];
    let pl = kind.param_len();
    let mut out = vec![0.0; n * h * w * 2];
    let tps = matches!(kind, TransformKind::Tps).then(|| TpsBasis::new(h, w));
    for b in 0..n {
        let p = &params.value().data()[b * pl..(b + 1) * pl];
        for i in 0..h {
            let y = pixel_to_norm(i, h);
            for j in 0..w {
                let x = pixel_to_norm(j, w);
                let (u, v) = match kind {
                    TransformKind::Affine => {
                        (p[0] * x + p[1] * y + p[2], p[3] * x + p[4] * y + p[5])
                    }
                    TransformKind::Homography => {
                        let d = p[6] * x + p[7] * y + 1.0;
                        (
                            (p[0] * x + p[1] * y + p[2]) / d,
                            (p[3] * x + p[4] * y + p[5]) / d,
                        )
                    }
                    TransformKind::Tps => {
                        let bw = tps.as_ref().unwrap().weights_at(i * w + j);
                        let (mut u, mut v) = (x, y);
                        for (k, bk) in bw.iter().enumerate() {
                            u += bk * p[2 * k];
                            v += bk * p[2 * k + 1];
                        }
                        (u, v)
                    }
                };
                let idx = ((b * h + i) * w + j) * 2;
                out[idx] = u;
                out[idx + 1] = v;
            }
        }
    }
    Var::from_op(
        Tensor::new(&[n, h, w, 2], out),
        vec![params.clone()],
        TransformGridOp { kind, h, w },
    )
}

struct InvertParamsOp {
    kind: TransformKind,
}

impl Backward for InvertParamsOp {
    fn name(&self) -> &'static str {
        "invert_params"
    }
    fn higher_order(&self) -> bool {
        false
    }
    fn backward(&self, inputs: &[Var], _: &Var, g: &Var) -> Vec<Option<Var>> {
        let params = inputs[0].value();
        let n = params.shape()[0];
        let pl = self.kind.param_len();
        let mut gp = vec![0.0; n * pl];
        for b in 0..n {
            let hm = params_to_mat(self.kind, &params.data()[b * pl..(b + 1) * pl]);
            let m = mat3_inv(&hm).unwrap_or([[f64::NAN; 3]; 3]);
            let gb = &g.value().data()[b * pl..(b + 1) * pl];
            // gradient w.r.t. the raw inverse M (before gauge normalization)
            let mut gm = [[0.0; 3]; 3];
            match self.kind {
                TransformKind::Affine => {
                    for k in 0..6 {
                        gm[k / 3][k % 3] = gb[k];
                    }
                }
                _ => {
                    let s = m[2][2];
                    let mut acc = 0.0;
                    for k in 0..8 {
                        gm[k / 3][k % 3] = gb[k] / s;
                        acc += gb[k] * m[k / 3][k % 3];
                    }
                    gm[2][2] = -acc / (s * s);
                }
            }
            // dM = -M dH M  =>  G_H = -M^T G_M M^T
            let mt = transpose3(&m);
            let gh = mat3_mul(&mat3_mul(&mt, &gm), &mt);
            for k in 0..pl {
                gp[b * pl + k] = -gh[k / 3][k % 3];
            }
        }
        vec![Some(Var::constant(Tensor::new(&[n, pl], gp)))]
    }
}

fn transpose3(m: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = m[j][i];
        }
    }
    t
}

/// Row-wise gauge-normalized inverse of `[n, p]` affine or homography
/// parameters. Singular rows produce NaN. First-order only.
pub fn invert_params(params: &Var, kind: TransformKind) -> Result<Var> {
    if !kind.is_projective() {
        return Err(Error::UnsupportedKind {
            op: "invert",
            kind: kind.name(),
        });
    }
    let n = params.shape()[0];
    let pl = kind.param_len();
    let mut out = vec![0.0; n * pl];
    for b in 0..n {
        let m = params_to_mat(kind, &params.value().data()[b * pl..(b + 1) * pl]);
        let inv = mat3_inv(&m).unwrap_or([[f64::NAN; 3]; 3]);
        let s = if kind == TransformKind::Homography {
            inv[2][2]
        } else {
            1.0
        };
        for k in 0..pl {
            out[b * pl + k] = inv[k / 3][k % 3] / s;
        }
    }
    Ok(Var::from_op(
        Tensor::new(&[n, pl], out),
        vec![params.clone()],
        InvertParamsOp { kind },
    ))
}

// ---- thin plate spline -------------------------------------------------------

fn tps_control_points() -> Vec<(f64, f64)> {
    let mut pts = Vec::with_capacity(TPS_GRID * TPS_GRID);
    for i in 0..TPS_GRID {
        for j in 0..TPS_GRID {
            pts.push((pixel_to_norm(j, TPS_GRID), pixel_to_norm(i, TPS_GRID)));
        }
    }
    pts
}

fn tps_kernel(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        r2 * r2.ln()
    }
}

/// Solves `a x = b` for a small dense system by Gaussian elimination with
/// partial pivoting. `b` holds `m` right-hand sides column-wise.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let n = a.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            for c in 0..b[r].len() {
                b[r][c] -= f * b[col][c];
            }
        }
    }
    for col in (0..n).rev() {
        for c in 0..b[col].len() {
            let mut acc = b[col][c];
            for k in col + 1..n {
                acc -= a[col][k] * b[k][c];
            }
            b[col][c] = acc / a[col][col];
        }
    }
    b
}

/// Linear map from control-point offsets to displacement at any point.
struct TpsSolution {
    ctrl: Vec<(f64, f64)>,
    /// `(k + 3) x k`: columns give spline coefficients for a unit offset at
    /// control point `k`.
    coef: Vec<Vec<f64>>,
}

fn tps_solution() -> TpsSolution {
    let ctrl = tps_control_points();
    let k = ctrl.len();
    let n = k + 3;
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..k {
        for j in 0..k {
            let (dx, dy) = (ctrl[i].0 - ctrl[j].0, ctrl[i].1 - ctrl[j].1);
            l[i][j] = tps_kernel(dx * dx + dy * dy);
        }
        let p = [1.0, ctrl[i].0, ctrl[i].1];
        for (c, &pv) in p.iter().enumerate() {
            l[i][k + c] = pv;
            l[k + c][i] = pv;
        }
    }
    let mut rhs = vec![vec![0.0; k]; n];
    for (i, row) in rhs.iter_mut().enumerate().take(k) {
        row[i] = 1.0;
    }
    TpsSolution {
        ctrl,
        coef: solve_dense(l, rhs),
    }
}

impl TpsSolution {
    fn weights_at(&self, x: f64, y: f64) -> Vec<f64> {
        let k = self.ctrl.len();
        let mut r = Vec::with_capacity(k + 3);
        for &(cx, cy) in &self.ctrl {
            let (dx, dy) = (x - cx, y - cy);
            r.push(tps_kernel(dx * dx + dy * dy));
        }
        r.extend_from_slice(&[1.0, x, y]);
        (0..k)
            .map(|col| {
                r.iter()
                    .zip(&self.coef)
                    .map(|(rv, row)| rv * row[col])
                    .sum()
            })
            .collect()
    }
}

fn tps_weights_at(x: f64, y: f64) -> Vec<f64> {
    tps_solution().weights_at(x, y)
}

/// Precomputed TPS weights for every pixel of an `h x w` grid.
struct TpsBasis {
    k: usize,
    weights: Vec<f64>,
}

impl TpsBasis {
    fn new(h: usize, w: usize) -> Self {
        let sol = tps_solution();
        let k = sol.ctrl.len();
        let mut weights = Vec::with_capacity(h * w * k);
        for i in 0..h {
            for j in 0..w {
                weights.extend(sol.weights_at(pixel_to_norm(j, w), pixel_to_norm(i, h)));
            }
        }
        Self { k, weights }
    }

    fn weights_at(&self, pixel: usize) -> &[f64] {
        &self.weights[pixel * self.k..(pixel + 1) * self.k]
    }
}

/// Mean pixel displacement between the images of the four frame corners
/// under `t_est` and `t_gt`.
pub fn corner_error(t_est: &Transform, t_gt: &Transform, (h, w): (usize, usize)) -> Result<f64> {
    for t in [t_est, t_gt] {
        if !t.kind.is_projective() {
            return Err(Error::UnsupportedKind {
                op: "corner_error",
                kind: t.kind.name(),
            });
        }
    }
    let sx = 0.5 * (w as f64 - 1.0);
    let sy = 0.5 * (h as f64 - 1.0);
    let corners = [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)];
    let total: f64 = corners
        .iter()
        .map(|&c| {
            let (a, b) = (t_est.apply(c), t_gt.apply(c));
            ((a.0 - b.0) * sx).hypot((a.1 - b.1) * sy)
        })
        .sum();
    Ok(total / 4.0)
}
