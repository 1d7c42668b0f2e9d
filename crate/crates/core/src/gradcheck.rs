//! Central finite-difference checks of every differentiable building block,
//! run in double precision on tiny shapes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{grad_tensors, no_grad, Backward, Var};
use crate::data::ImageBatch;
use crate::error::Result;
use crate::geometry::{grid_sample, invert_params, TransformKind};
use crate::losses::{self, LossWeights};
use crate::networks::{apply_transform, BoundModels, Models, NetConfig, SpatialCode};
use crate::nn::Bound;
use crate::ops;
use crate::tensor::Tensor;
use crate::training::forward_cycle_x;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub tolerance: f64,
    /// Central difference step.
    pub step: f64,
    /// Denominator floor of the relative error, so that near-zero gradients
    /// are compared absolutely.
    pub floor: f64,
    /// Coordinates probed per input tensor; larger tensors are subsampled.
    pub max_coords: usize,
    /// Mutation canary: negates the backward pass of the spatial cycle loss.
    pub flip_scl_gradient: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            tolerance: 1e-3,
            step: 1e-4,
            floor: 1e-4,
            max_coords: 24,
            flip_scl_gradient: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub coords: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub results: Vec<CheckResult>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    /// One line per check.
    pub fn lines(&self) -> Vec<String> {
        self.results
            .iter()
            .map(|r| {
                format!(
                    "{:<6} {:<28} max_rel_err={:.3e} coords={}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.max_rel_error,
                    r.coords
                )
            })
            .collect()
    }
}

type ScalarFn<'a> = dyn Fn(&[Var]) -> Result<Var> + 'a;

/// Compares autograd gradients of the scalar `f` at `inputs` with central
/// differences on a random subset of coordinates.
pub fn check(
    name: &str,
    f: &ScalarFn,
    inputs: &[Tensor],
    opts: &GradcheckOptions,
    rng: &mut ChaCha8Rng,
) -> Result<CheckResult> {
    let vars: Vec<Var> = inputs.iter().cloned().map(Var::leaf).collect();
    let out = f(&vars)?;
    let analytic = grad_tensors(&out, &vars);
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let _g = no_grad();
        let vs: Vec<Var> = xs.iter().cloned().map(Var::constant).collect();
        Ok(f(&vs)?.item())
    };
    let mut worst = 0.0f64;
    let mut coords = 0;
    for (i, t) in inputs.iter().enumerate() {
        let picks: Vec<usize> = if t.len() <= opts.max_coords {
            (0..t.len()).collect()
        } else {
            rand::seq::index::sample(rng, t.len(), opts.max_coords).into_vec()
        };
        for k in picks {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[k] = t.data()[k] + opts.step;
            let up = eval(&xs)?;
            xs[i].data_mut()[k] = t.data()[k] - opts.step;
            let down = eval(&xs)?;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic[i].data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            worst = worst.max(if rel.is_nan() { f64::INFINITY } else { rel });
            coords += 1;
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_error: worst,
        coords,
        passed: worst < opts.tolerance,
    })
}

/// Identity forward pass whose backward pass negates the gradient.
struct FlipGrad;

impl Backward for FlipGrad {
    fn name(&self) -> &'static str {
        "flip_grad"
    }

    fn backward(&self, _inputs: &[Var], _output: &Var, grad: &Var) -> Vec<Option<Var>> {
        vec![Some(ops::neg(grad))]
    }
}

fn flip_grad(v: &Var) -> Var {
    Var::from_op(v.value().clone(), vec![v.clone()], FlipGrad)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Random weights projecting a tensor to a scalar.
fn readout(v: &Var, r: &Tensor) -> Var {
    ops::sum(&ops::mul_const(v, r))
}

/// Parameters near identity, away from the bilinear kinks at integer sample
/// positions.
fn near_identity(rng: &mut ChaCha8Rng, n: usize, kind: TransformKind, spread: f64) -> Tensor {
    let id = kind.identity_params();
    let data = (0..n)
        .flat_map(|_| {
            id.iter()
                .enumerate()
                .map(|(j, &v)| {
                    let s = if kind == TransformKind::Homography && j >= 6 {
                        spread * 0.2
                    } else {
                        spread
                    };
                    v + rng.random_range(-s..s)
                })
                .collect::<Vec<_>>()
        })
        .collect();
    Tensor::new(&[n, kind.param_len()], data)
}

const N: usize = 2;
const SIZE: (usize, usize) = (8, 8);

/// Tiny models with every parameter perturbed so no path is dead at the
/// zero-initialized heads.
fn tiny_models(seed: u64, kind: TransformKind, rng: &mut ChaCha8Rng) -> Result<Models> {
    let cfg = NetConfig {
        size: SIZE,
        kind,
        code_dim: 2,
        loc_width: 2,
        loc_hidden: 4,
        gen_width: 2,
        gen_res_blocks: 1,
        critic_width: 2,
        dt_hidden: 4,
        siam_width: 2,
        embed_dim: 3,
        ..NetConfig::default()
    };
    let mut m = Models::new(&cfg, seed)?;
    for ps in m.param_sets_mut() {
        for v in ps.values_mut() {
            for x in v.data_mut() {
                *x += rng.random_range(-0.05..0.05);
            }
        }
    }
    Ok(m)
}

fn split(vars: &[Var], lens: &[usize]) -> Vec<Bound> {
    let mut at = 0;
    lens.iter()
        .map(|&l| {
            let b = Bound::from_vars(vars[at..at + l].to_vec());
            at += l;
            b
        })
        .collect()
}

/// Runs the whole suite.
pub fn run_suite(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = crate::seeded_rng(opts.seed, 0x6a);
    let mut results = Vec::new();
    let (h, w) = SIZE;
    let c = 3;
    let img = uniform(&mut rng, &[N, c, h, w], 0.05, 0.95);
    let full_mask = Tensor::ones(&[N, 1, h, w]);

    for kind in [
        TransformKind::Affine,
        TransformKind::Homography,
        TransformKind::Tps,
    ] {
        let params = if kind == TransformKind::Tps {
            uniform(&mut rng, &[N, kind.param_len()], -0.08, 0.08)
        } else {
            near_identity(&mut rng, N, kind, 0.08)
        };
        let r = uniform(&mut rng, &[N, c, h, w], -1.0, 1.0);
        let mask = Var::constant(full_mask.clone());
        let f = |v: &[Var]| {
            Ok(readout(
                &apply_transform(&v[0], &mask, &v[1], kind).warped,
                &r,
            ))
        };
        results.push(check(
            &format!("warp/{}", kind.name()),
            &f,
            &[img.clone(), params],
            opts,
            &mut rng,
        )?);
    }

    let grid = uniform(&mut rng, &[N, h, w, 2], -1.2, 1.2);
    let r = uniform(&mut rng, &[N, c, h, w], -1.0, 1.0);
    let f = |v: &[Var]| Ok(readout(&grid_sample(&v[0], &v[1], 0.0), &r));
    results.push(check(
        "grid_sample",
        &f,
        &[img.clone(), grid],
        opts,
        &mut rng,
    )?);

    for kind in [TransformKind::Affine, TransformKind::Homography] {
        let p = near_identity(&mut rng, N, kind, 0.3);
        let r = uniform(&mut rng, &[N, kind.param_len()], -1.0, 1.0);
        let f = |v: &[Var]| Ok(readout(&invert_params(&v[0], kind)?, &r));
        results.push(check(
            &format!("invert_params/{}", kind.name()),
            &f,
            &[p],
            opts,
            &mut rng,
        )?);
    }

    let kind = TransformKind::Homography;
    let t_xy = near_identity(&mut rng, N, kind, 0.3);
    let t_yx = near_identity(&mut rng, N, kind, 0.3);
    let flip = opts.flip_scl_gradient;
    let f = |v: &[Var]| {
        let l = losses::scl(&v[0], &v[1], kind)?;
        Ok(if flip { flip_grad(&l) } else { l })
    };
    results.push(check("loss/scl", &f, &[t_xy, t_yx], opts, &mut rng)?);

    let a = uniform(&mut rng, &[N, c, h, w], 0.0, 1.0);
    let b = uniform(&mut rng, &[N, c, h, w], 0.0, 1.0);
    let f = |v: &[Var]| losses::pcl(&v[0], &v[1]);
    results.push(check(
        "loss/pcl",
        &f,
        &[a.clone(), b.clone()],
        opts,
        &mut rng,
    )?);

    let weights = LossWeights::default();
    let f = |v: &[Var]| Ok(losses::cycle_loss(&v[0], &v[1], &weights));
    let pair = [Tensor::scalar(0.3), Tensor::scalar(0.7)];
    results.push(check("loss/cycle", &f, &pair, opts, &mut rng)?);

    let mask =
        Var::constant(uniform(&mut rng, &[N, 1, h, w], 0.0, 1.0).map(|m| (m > 0.4) as u8 as f64));
    let f = |v: &[Var]| losses::mask_identity_loss(&v[0], &v[1], &mask);
    results.push(check("loss/identity", &f, &[a, b], opts, &mut rng)?);

    let d_fake = uniform(&mut rng, &[4], -2.0, 2.0);
    let d_real = uniform(&mut rng, &[4], -2.0, 2.0);
    let t_fwd = uniform(&mut rng, &[N], -2.0, 2.0);
    let t_inv = uniform(&mut rng, &[N], -2.0, 2.0);
    let f = |v: &[Var]| losses::critic_adv_loss(&v[0], &v[1], Some((&v[2], &v[3])));
    let scores = [d_fake.clone(), d_real, t_fwd.clone(), t_inv];
    results.push(check("loss/critic_adv", &f, &scores, opts, &mut rng)?);
    let f = |v: &[Var]| losses::gen_adv_loss(&v[0], Some(&v[1]));
    results.push(check("loss/gen_adv", &f, &[d_fake, t_fwd], opts, &mut rng)?);

    // Positive pairs, a negative inside the margin and one beyond it.
    let labels = [1u8, 1, 0, 0];
    let e1 = uniform(&mut rng, &[4, 3], -0.5, 0.5);
    let mut e2 = uniform(&mut rng, &[4, 3], -0.5, 0.5);
    for j in 0..3 {
        e2.data_mut()[3 * 3 + j] = e1.data()[3 * 3 + j] + 2.0;
    }
    let f = |v: &[Var]| losses::siamese_loss(&labels, &v[0], &v[1], 2.0);
    results.push(check("loss/siamese", &f, &[e1, e2], opts, &mut rng)?);

    let f = |v: &[Var]| Ok(losses::total_gen_loss(&v[0], &v[1], &v[2], &v[3], &weights));
    let parts: Vec<Tensor> = (0..4).map(|i| Tensor::scalar(0.1 + i as f64)).collect();
    results.push(check("loss/total_gen", &f, &parts, opts, &mut rng)?);

    let models = tiny_models(opts.seed, kind, &mut rng)?;
    let frozen = models.bind_frozen();
    let real = uniform(&mut rng, &[N, c, h, w], 0.0, 1.0);
    let fake = uniform(&mut rng, &[N, c, h, w], 0.0, 1.0);
    let gp_seed = rng.random::<u64>();
    let critic_params = models.d1.params.values().to_vec();
    let f = |v: &[Var]| {
        let p = Bound::from_vars(v.to_vec());
        let critic = |z: &Var| models.d1.score(&p, z);
        let mut gp_rng = crate::seeded_rng(gp_seed, 0);
        losses::gradient_penalty(&critic, &real, &fake, &mut gp_rng)
    };
    results.push(check(
        "loss/gradient_penalty",
        &f,
        &critic_params,
        opts,
        &mut rng,
    )?);

    let x = ImageBatch::from_values(uniform(&mut rng, &[N, c, h, w], 0.05, 0.95))?;
    let code = SpatialCode::sample(N, models.cfg.code_dim, opts.seed);
    let sets = [
        &models.s1.params,
        &models.g1.params,
        &models.s2.params,
        &models.g2.params,
    ];
    let lens: Vec<usize> = sets.iter().map(|p| p.len()).collect();
    let flat: Vec<Tensor> = sets
        .iter()
        .flat_map(|p| p.values().iter().cloned())
        .collect();
    let r_adp = uniform(&mut rng, &[N, c, h, w], -1.0, 1.0);
    let r_prime = uniform(&mut rng, &[N, c, h, w], -1.0, 1.0);
    let r_t = uniform(&mut rng, &[N, kind.param_len()], -1.0, 1.0);
    let f = |v: &[Var]| {
        let mut bs = split(v, &lens).into_iter();
        let b = BoundModels {
            s1: bs.next().expect("s1"),
            g1: bs.next().expect("g1"),
            s2: bs.next().expect("s2"),
            g2: bs.next().expect("g2"),
            ..frozen.clone()
        };
        let cyc = forward_cycle_x(&models, &b, &x, &code)?;
        let parts = [
            readout(&cyc.x_adp, &r_adp),
            readout(&cyc.x_prime, &r_prime),
            readout(&cyc.t_xy, &r_t),
            readout(&cyc.t_yx, &r_t),
        ];
        Ok(parts
            .iter()
            .skip(1)
            .fold(parts[0].clone(), |acc, p| ops::add(&acc, p)))
    };
    results.push(check("forward_cycle_x", &f, &flat, opts, &mut rng)?);

    Ok(GradcheckReport {
        results,
        tolerance: opts.tolerance,
    })
}
