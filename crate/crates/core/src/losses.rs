//! Training objectives. Each loss is a pure function of graph variables.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{grad, grad_enabled, set_grad_enabled, Var};
use crate::error::{Error, Result};
use crate::geometry::{invert_params, TransformKind};
use crate::ops;
use crate::tensor::Tensor;

/// Loss weights and margins.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_pcl: f64,
    pub lambda_cyc: f64,
    pub lambda_idt: f64,
    pub lambda_siam: f64,
    pub siamese_margin: f64,
    pub gp_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_pcl: 10.0,
            lambda_cyc: 1.0,
            lambda_idt: 5.0,
            lambda_siam: 1.0,
            siamese_margin: 2.0,
            gp_weight: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_pcl,
            self.lambda_cyc,
            self.lambda_idt,
            self.lambda_siam,
            self.siamese_margin,
            self.gp_weight,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        if self.siamese_margin <= 0.0 {
            return Err(Error::Config("siamese margin must be positive".into()));
        }
        Ok(())
    }
}

/// Scalar values of every loss term for one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub d_adv: f64,
    pub g_adv: f64,
    pub scl: f64,
    pub pcl: f64,
    pub cyc: f64,
    pub idt: f64,
    pub siam: f64,
    pub gp: f64,
    pub total_g: f64,
    pub total_d: f64,
}

impl LossReport {
    pub const FIELDS: [&'static str; 10] = [
        "d_adv", "g_adv", "scl", "pcl", "cyc", "idt", "siam", "gp", "total_g", "total_d",
    ];

    pub fn values(&self) -> [f64; 10] {
        [
            self.d_adv,
            self.g_adv,
            self.scl,
            self.pcl,
            self.cyc,
            self.idt,
            self.siam,
            self.gp,
            self.total_g,
            self.total_d,
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }

    /// Name of the first non-finite field.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        Self::FIELDS
            .iter()
            .zip(self.values())
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| *n)
    }
}

fn nonempty(v: &Var, what: &'static str) -> Result<()> {
    if v.value().is_empty() {
        Err(Error::EmptyBatch(what))
    } else {
        Ok(())
    }
}

fn same_shape(a: &Var, b: &Var) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Critic loss: `mean(fake) - mean(real)`, plus the same for the transform
/// critic when given as `(forward, inverse)` scores.
pub fn critic_adv_loss(d_fake: &Var, d_real: &Var, dt: Option<(&Var, &Var)>) -> Result<Var> {
    nonempty(d_fake, "critic fake scores")?;
    nonempty(d_real, "critic real scores")?;
    let mut l = ops::sub(&ops::mean(d_fake), &ops::mean(d_real));
    if let Some((fwd, inv)) = dt {
        nonempty(fwd, "transform critic forward scores")?;
        nonempty(inv, "transform critic inverse scores")?;
        l = ops::add(&l, &ops::sub(&ops::mean(fwd), &ops::mean(inv)));
    }
    Ok(l)
}

/// Adversarial loss of the generator side: `-mean(fake) - mean(dt_fwd)`.
pub fn gen_adv_loss(d_fake: &Var, dt_fwd: Option<&Var>) -> Result<Var> {
    nonempty(d_fake, "critic fake scores")?;
    let mut l = ops::neg(&ops::mean(d_fake));
    if let Some(fwd) = dt_fwd {
        nonempty(fwd, "transform critic forward scores")?;
        l = ops::sub(&l, &ops::mean(fwd));
    }
    Ok(l)
}

/// Mean of `(|grad critic(z)| - 1)^2` over per-item random interpolates
/// `z = e * real + (1 - e) * fake`. The result is differentiable in the
/// critic parameters.
pub fn gradient_penalty(
    critic: &dyn Fn(&Var) -> Result<Var>,
    real: &Tensor,
    fake: &Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    if real.shape() != fake.shape() {
        return Err(Error::Shape(format!(
            "gradient penalty batches differ: {:?} vs {:?}",
            real.shape(),
            fake.shape()
        )));
    }
    let n = real.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::EmptyBatch("gradient penalty"));
    }
    let per = real.len() / n;
    let eps: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let mut z = fake.clone();
    for (i, e) in eps.iter().enumerate() {
        let zi = &mut z.data_mut()[i * per..(i + 1) * per];
        for (k, v) in zi.iter_mut().enumerate() {
            *v = e * real.data()[i * per + k] + (1.0 - e) * *v;
        }
    }
    interpolate_penalty(critic, z)
}

/// Gradient penalty at fixed points `z`.
pub fn interpolate_penalty(critic: &dyn Fn(&Var) -> Result<Var>, z: Tensor) -> Result<Var> {
    let n = z.shape()[0];
    let per = z.len() / n;
    // The input gradient is needed even when recording is off; only its
    // dependence on the critic parameters is skipped then.
    let outer = grad_enabled();
    let zv = Var::leaf(z);
    let total = {
        let _on = set_grad_enabled(true);
        ops::sum(&critic(&zv)?)
    };
    let g = grad(&total, &[zv], outer).remove(0);
    let norm = ops::row_norm(&ops::reshape(&g, &[n, per]), 1e-12);
    Ok(ops::mean(&ops::square(&ops::add_scalar(&norm, -1.0))))
}

/// Pixel-level cycle loss: mean absolute difference.
pub fn pcl(recovered: &Var, original: &Var) -> Result<Var> {
    same_shape(recovered, original)?;
    nonempty(original, "pixel cycle loss")?;
    Ok(ops::mean(&ops::abs(&ops::sub(recovered, original))))
}

/// Spatial-level cycle loss: mean absolute difference between the inverse of
/// the forward transform and the backward transform, both `[n, p]`.
pub fn scl(t_xy: &Var, t_yx: &Var, kind: TransformKind) -> Result<Var> {
    if !kind.is_projective() {
        return Err(Error::UnsupportedKind {
            op: "scl",
            kind: kind.name(),
        });
    }
    same_shape(t_xy, t_yx)?;
    if t_xy.shape().len() != 2 || t_xy.shape()[1] != kind.param_len() {
        return Err(Error::ParamLength {
            kind: kind.name(),
            expected: kind.param_len(),
            got: t_xy.shape().get(1).copied().unwrap_or(0),
        });
    }
    nonempty(t_xy, "spatial cycle loss")?;
    let inv = invert_params(t_xy, kind)?;
    Ok(ops::mean(&ops::abs(&ops::sub(&inv, t_yx))))
}

/// `scl + lambda_pcl * pcl`.
pub fn cycle_loss(scl_val: &Var, pcl_val: &Var, w: &LossWeights) -> Var {
    ops::add(scl_val, &ops::scale(pcl_val, w.lambda_pcl))
}

/// Mean absolute difference restricted to the mask (`[n, 1, h, w]`,
/// broadcast over channels); the mean runs over all elements.
pub fn mask_identity_loss(adapted: &Var, warped: &Var, mask: &Var) -> Result<Var> {
    same_shape(adapted, warped)?;
    let s = adapted.shape();
    if s.len() != 4 || mask.shape() != [s[0], 1, s[2], s[3]] {
        return Err(Error::Shape(format!(
            "mask {:?} for images {:?}",
            mask.shape(),
            s
        )));
    }
    if mask.value().data().iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::InvalidArgument(
            "identity-loss mask must be binary".into(),
        ));
    }
    let m = ops::broadcast_to(mask, s);
    Ok(ops::mean(&ops::abs(&ops::mul(
        &ops::sub(adapted, warped),
        &m,
    ))))
}

/// Contrastive loss averaged over pairs: `d^2` for positives (label 1),
/// `max(0, margin - d)^2` for negatives (label 0), with `d` the Euclidean
/// distance between rows of `e1` and `e2`.
pub fn siamese_loss(labels: &[u8], e1: &Var, e2: &Var, margin: f64) -> Result<Var> {
    same_shape(e1, e2)?;
    if e1.shape().len() != 2 || e1.shape()[0] != labels.len() {
        return Err(Error::Shape(format!(
            "{} labels for embeddings {:?}",
            labels.len(),
            e1.shape()
        )));
    }
    if labels.is_empty() {
        return Err(Error::EmptyBatch("siamese pairs"));
    }
    if margin <= 0.0 {
        return Err(Error::InvalidArgument(
            "siamese margin must be positive".into(),
        ));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::InvalidArgument(
            "siamese labels must be 0 or 1".into(),
        ));
    }
    let n = labels.len();
    let diff = ops::sub(e1, e2);
    let d2 = ops::reshape(&ops::sum_rows(&ops::square(&diff)), &[n]);
    let d = ops::row_norm(&diff, 1e-24);
    let hinge = ops::square(&ops::relu(&ops::add_scalar(&ops::neg(&d), margin)));
    let pos = Tensor::new(&[n], labels.iter().map(|&l| l as f64).collect());
    let neg = pos.map(|p| 1.0 - p);
    let per = ops::add(&ops::mul_const(&d2, &pos), &ops::mul_const(&hinge, &neg));
    Ok(ops::mean(&per))
}

/// Weighted generator objective `adv + l_cyc cyc + l_idt idt + l_siam siam`.
pub fn total_gen_loss(adv: &Var, cyc: &Var, idt: &Var, siam: &Var, w: &LossWeights) -> Var {
    let a = ops::add(adv, &ops::scale(cyc, w.lambda_cyc));
    let b = ops::add(
        &ops::scale(idt, w.lambda_idt),
        &ops::scale(siam, w.lambda_siam),
    );
    ops::add(&a, &b)
}
