//! The cyclic adaptation model: forward cycles in both directions, the
//! critic/generator schedule, multi-code adaptation and the training loop.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::autograd::{grad_tensors, no_grad, Var};
use crate::checkpoint::Checkpoint;
use crate::data::{epoch_batch_indices, save_png, Dataset, ImageBatch};
use crate::error::{Error, Result};
use crate::evaluation::mean_corner_error;
use crate::geometry::{invert_params, Transform};
use crate::losses::{self, LossReport, LossWeights};
use crate::networks::{apply_transform, stm_forward, BoundModels, Models, NetConfig, SpatialCode};
use crate::nn::Adam;
use crate::ops;
use crate::seeded_rng;
use crate::tensor::Tensor;

/// Lipschitz constraint on the critics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Lipschitz {
    GradientPenalty,
    /// Clip critic weights to `[-c, c]` after every update.
    Clip(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub critic_steps_per_gen: usize,
    pub lr_critic: f64,
    pub lr_gen: f64,
    pub lr_stm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weights: LossWeights,
    pub net: NetConfig,
    /// Number of spatial codes used when producing adapted outputs.
    pub adapt_m: usize,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub eval_every: u64,
    pub lipschitz: Lipschitz,
    pub transform_critic: bool,
    /// Split the cycle into spatial and pixel paths; otherwise use the naive
    /// pixel cycle through both modules and generators.
    pub disentangled: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 16,
            critic_steps_per_gen: 5,
            lr_critic: 1e-4,
            lr_gen: 2e-4,
            lr_stm: 2e-4,
            beta1: 0.5,
            beta2: 0.9,
            weights: LossWeights::default(),
            net: NetConfig::default(),
            adapt_m: 10,
            seed: 0,
            checkpoint_every: 500,
            eval_every: 100,
            lipschitz: Lipschitz::GradientPenalty,
            transform_critic: true,
            disentangled: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.weights.validate()?;
        if self.steps == 0
            || self.batch_size == 0
            || self.critic_steps_per_gen == 0
            || self.adapt_m == 0
        {
            return Err(Error::Config(
                "steps, batch_size, critic_steps and adapt_m must be positive".into(),
            ));
        }
        if self.checkpoint_every == 0 || self.eval_every == 0 {
            return Err(Error::Config(
                "checkpoint and eval cadence must be positive".into(),
            ));
        }
        for (name, v) in [
            ("lr_critic", self.lr_critic),
            ("lr_gen", self.lr_gen),
            ("lr_stm", self.lr_stm),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if let Lipschitz::Clip(c) = self.lipschitz {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config("clip value must be positive".into()));
            }
        }
        if !self.net.kind.is_projective() {
            return Err(Error::UnsupportedKind {
                op: "training",
                kind: self.net.kind.name(),
            });
        }
        Ok(())
    }
}

/// Intermediate results of one forward cycle.
#[derive(Clone, Debug)]
pub struct CycleArtifacts {
    pub x_s: Var,
    pub mask_s: Var,
    pub t_xy: Var,
    pub x_adp: Var,
    /// Reverse transform predicted on the adapted image with the same code.
    pub t_yx: Var,
    /// Reconstruction through the inverse of `t_xy` and the reverse
    /// generator.
    pub x_prime: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    XToY,
    YToX,
}

/// Runs one direction of the cycle.
pub fn forward_cycle(
    models: &Models,
    b: &BoundModels,
    dir: Direction,
    img: &Var,
    mask: &Var,
    code: &SpatialCode,
) -> Result<CycleArtifacts> {
    let (sa, pa, ga, pga, sb, psb, gb, pgb) = match dir {
        Direction::XToY => (
            &models.s1, &b.s1, &models.g1, &b.g1, &models.s2, &b.s2, &models.g2, &b.g2,
        ),
        Direction::YToX => (
            &models.s2, &b.s2, &models.g2, &b.g2, &models.s1, &b.s1, &models.g1, &b.g1,
        ),
    };
    let kind = models.cfg.kind;
    let fwd = stm_forward(sa, pa, img, mask, code)?;
    let x_adp = ga.forward(pga, &fwd.warped)?;
    let t_yx = sb.localize(psb, &x_adp, &fwd.mask, code)?;
    let inv = invert_params(&fwd.params, kind)?;
    let back = apply_transform(&x_adp, &fwd.mask, &inv, kind);
    let x_prime = gb.forward(pgb, &back.warped)?;
    Ok(CycleArtifacts {
        x_s: fwd.warped,
        mask_s: fwd.mask,
        t_xy: fwd.params,
        x_adp,
        t_yx,
        x_prime,
    })
}

pub fn forward_cycle_x(
    models: &Models,
    b: &BoundModels,
    x: &ImageBatch,
    code: &SpatialCode,
) -> Result<CycleArtifacts> {
    forward_cycle(
        models,
        b,
        Direction::XToY,
        &Var::constant(x.values.clone()),
        &Var::constant(x.mask.clone()),
        code,
    )
}

/// Generator objective of both directions.
#[derive(Clone, Debug)]
pub struct GenObjective {
    pub total: Var,
    pub report: LossReport,
    pub x_cycle: CycleArtifacts,
    pub y_cycle: CycleArtifacts,
}

struct DirTerms {
    adv: Var,
    scl: Var,
    pcl: Var,
    cyc: Var,
    idt: Var,
    siam: Var,
}

#[allow(clippy::too_many_arguments)]
fn direction_terms(
    models: &Models,
    b: &BoundModels,
    cfg: &TrainConfig,
    dir: Direction,
    src: &Var,
    own: &CycleArtifacts,
    other_src: &Var,
    other: &CycleArtifacts,
) -> Result<DirTerms> {
    let w = &cfg.weights;
    let kind = models.cfg.kind;
    let (critic, pc, gb, pgb) = match dir {
        Direction::XToY => (&models.d1, &b.d1, &models.g2, &b.g2),
        Direction::YToX => (&models.d2, &b.d2, &models.g1, &b.g1),
    };
    let d_fake = critic.score(pc, &own.x_adp)?;
    let dt_fwd = if cfg.transform_critic && dir == Direction::XToY {
        Some(models.dt.score(&b.dt, &own.t_xy)?)
    } else {
        None
    };
    let adv = losses::gen_adv_loss(&d_fake, dt_fwd.as_ref())?;
    let (scl, pcl) = if cfg.disentangled {
        (
            losses::scl(&own.t_xy, &own.t_yx, kind)?,
            losses::pcl(&own.x_prime, src)?,
        )
    } else {
        let back = apply_transform(&own.x_adp, &own.mask_s, &own.t_yx, kind);
        let naive = gb.forward(pgb, &back.warped)?;
        (Var::scalar(0.0), losses::pcl(&naive, src)?)
    };
    let cyc = losses::cycle_loss(&scl, &pcl, w);
    let idt = losses::mask_identity_loss(&own.x_adp, &own.x_s, &own.mask_s)?;
    let siam = if w.lambda_siam > 0.0 {
        let n = src.shape()[0];
        let e = |v: &Var| models.siam.embed(&b.siam, v);
        let anchor = e(src)?;
        let e1 = ops::concat(&[anchor.clone(), anchor.clone(), anchor.clone(), anchor], 0);
        let e2 = ops::concat(
            &[e(&own.x_s)?, e(&own.x_adp)?, e(&other.x_s)?, e(other_src)?],
            0,
        );
        let labels: Vec<u8> = [1u8, 1, 0, 0]
            .iter()
            .flat_map(|&l| std::iter::repeat_n(l, n))
            .collect();
        losses::siamese_loss(&labels, &e1, &e2, w.siamese_margin)?
    } else {
        Var::scalar(0.0)
    };
    Ok(DirTerms {
        adv,
        scl,
        pcl,
        cyc,
        idt,
        siam,
    })
}

/// Full generator loss (both directions) for one pair of batches.
pub fn generator_objective(
    models: &Models,
    b: &BoundModels,
    x: &ImageBatch,
    y: &ImageBatch,
    code_x: &SpatialCode,
    code_y: &SpatialCode,
    cfg: &TrainConfig,
) -> Result<GenObjective> {
    let xv = Var::constant(x.values.clone());
    let yv = Var::constant(y.values.clone());
    let xc = forward_cycle(
        models,
        b,
        Direction::XToY,
        &xv,
        &Var::constant(x.mask.clone()),
        code_x,
    )?;
    let yc = forward_cycle(
        models,
        b,
        Direction::YToX,
        &yv,
        &Var::constant(y.mask.clone()),
        code_y,
    )?;
    let tx = direction_terms(models, b, cfg, Direction::XToY, &xv, &xc, &yv, &yc)?;
    let ty = direction_terms(models, b, cfg, Direction::YToX, &yv, &yc, &xv, &xc)?;
    let sum = |a: &Var, b: &Var| ops::add(a, b);
    let adv = sum(&tx.adv, &ty.adv);
    let cyc = sum(&tx.cyc, &ty.cyc);
    let idt = sum(&tx.idt, &ty.idt);
    let siam = sum(&tx.siam, &ty.siam);
    let total = losses::total_gen_loss(&adv, &cyc, &idt, &siam, &cfg.weights);
    let report = LossReport {
        g_adv: adv.item(),
        scl: tx.scl.item() + ty.scl.item(),
        pcl: tx.pcl.item() + ty.pcl.item(),
        cyc: cyc.item(),
        idt: idt.item(),
        siam: siam.item(),
        total_g: total.item(),
        ..Default::default()
    };
    Ok(GenObjective {
        total,
        report,
        x_cycle: xc,
        y_cycle: yc,
    })
}

/// Critic objective: adversarial terms plus weighted gradient penalties.
pub struct CriticObjective {
    pub total: Var,
    pub adv: f64,
    pub gp: f64,
}

pub fn critic_objective(
    models: &Models,
    b: &BoundModels,
    x: &ImageBatch,
    y: &ImageBatch,
    code_x: &SpatialCode,
    code_y: &SpatialCode,
    cfg: &TrainConfig,
    gp_seed: (u64, u64),
) -> Result<CriticObjective> {
    let kind = models.cfg.kind;
    let xv = Var::constant(x.values.clone());
    let yv = Var::constant(y.values.clone());
    let (x_adp, t_xy, y_adp, t_inv) = {
        let _g = no_grad();
        let sx = stm_forward(
            &models.s1,
            &b.s1,
            &xv,
            &Var::constant(x.mask.clone()),
            code_x,
        )?;
        let x_adp = models.g1.forward(&b.g1, &sx.warped)?;
        let sy = stm_forward(
            &models.s2,
            &b.s2,
            &yv,
            &Var::constant(y.mask.clone()),
            code_y,
        )?;
        let y_adp = models.g2.forward(&b.g2, &sy.warped)?;
        let t_inv = invert_params(&sy.params, kind)?;
        (
            x_adp.detach(),
            sx.params.detach(),
            y_adp.detach(),
            t_inv.detach(),
        )
    };
    let d1f = models.d1.score(&b.d1, &x_adp)?;
    let d1r = models.d1.score(&b.d1, &yv)?;
    let d2f = models.d2.score(&b.d2, &y_adp)?;
    let d2r = models.d2.score(&b.d2, &xv)?;
    let dt = if cfg.transform_critic {
        Some((
            models.dt.score(&b.dt, &t_xy)?,
            models.dt.score(&b.dt, &t_inv)?,
        ))
    } else {
        None
    };
    let l1 = losses::critic_adv_loss(&d1f, &d1r, dt.as_ref().map(|(f, i)| (f, i)))?;
    let l2 = losses::critic_adv_loss(&d2f, &d2r, None)?;
    let adv = ops::add(&l1, &l2);
    if cfg.lipschitz != Lipschitz::GradientPenalty || cfg.weights.gp_weight == 0.0 {
        let a = adv.item();
        return Ok(CriticObjective {
            total: adv,
            adv: a,
            gp: 0.0,
        });
    }
    let mut rng = seeded_rng(gp_seed.0, gp_seed.1);
    let c1 = |z: &Var| models.d1.score(&b.d1, z);
    let c2 = |z: &Var| models.d2.score(&b.d2, z);
    let mut gp = ops::add(
        &losses::gradient_penalty(&c1, &y.values, x_adp.value(), &mut rng)?,
        &losses::gradient_penalty(&c2, &x.values, y_adp.value(), &mut rng)?,
    );
    if cfg.transform_critic {
        let ct = |z: &Var| models.dt.score(&b.dt, z);
        gp = ops::add(
            &gp,
            &losses::gradient_penalty(&ct, t_inv.value(), t_xy.value(), &mut rng)?,
        );
    }
    let total = ops::add(&adv, &ops::scale(&gp, cfg.weights.gp_weight));
    Ok(CriticObjective {
        adv: adv.item(),
        gp: gp.item(),
        total,
    })
}

/// Network indices (see [`crate::networks::NETWORK_NAMES`]).
const CRITICS: [bool; 8] = [false, false, false, false, true, true, true, false];
const GENERATORS: [bool; 8] = [true, true, true, true, false, false, false, true];

/// Models plus optimizer state and update counters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub models: Models,
    pub opts: Vec<Adam>,
    pub step: u64,
    pub critic_updates: u64,
    pub gen_updates: u64,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let models = Models::new(&cfg.net, cfg.seed)?;
        let lrs = [
            cfg.lr_stm,
            cfg.lr_stm,
            cfg.lr_gen,
            cfg.lr_gen,
            cfg.lr_critic,
            cfg.lr_critic,
            cfg.lr_critic,
            cfg.lr_gen,
        ];
        let opts = models
            .param_sets()
            .iter()
            .zip(lrs)
            .map(|(p, lr)| Adam::new(p, lr, cfg.beta1, cfg.beta2))
            .collect();
        Ok(Self {
            models,
            opts,
            step: 0,
            critic_updates: 0,
            gen_updates: 0,
        })
    }

    fn apply(&mut self, b: &BoundModels, loss: &Var, which: [bool; 8]) {
        let bounds = b.as_array();
        let idx: Vec<usize> = (0..8).filter(|&i| which[i]).collect();
        let vars: Vec<Var> = idx
            .iter()
            .flat_map(|&i| bounds[i].vars().iter().cloned())
            .collect();
        let mut grads = grad_tensors(loss, &vars).into_iter();
        let sets = self.models.param_sets_mut();
        let mut sets: Vec<_> = sets
            .into_iter()
            .enumerate()
            .filter(|(i, _)| which[*i])
            .collect();
        for (i, ps) in sets.iter_mut() {
            let g: Vec<Tensor> = grads.by_ref().take(ps.len()).collect();
            self.opts[*i].step(ps, &g);
        }
    }
}

/// Random stream tags within one step.
const TAG_CODE_X: u64 = 0;
const TAG_CODE_Y: u64 = 1;
const TAG_CRITIC: u64 = 2;

fn stream(step: u64, tag: u64) -> u64 {
    (step << 8) | tag
}

/// Codes for batch `n` at `(step, tag)`.
pub fn step_code(cfg: &TrainConfig, n: usize, step: u64, tag: u64) -> SpatialCode {
    SpatialCode::sample_stream(n, cfg.net.code_dim, cfg.seed, stream(step, tag))
}

/// `critic_steps_per_gen` critic updates followed by one generator update.
pub fn train_step(
    state: &mut TrainState,
    x: &ImageBatch,
    y: &ImageBatch,
    cfg: &TrainConfig,
) -> Result<LossReport> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptyBatch("training batch"));
    }
    let step = state.step;
    let (nx, ny) = (x.len(), y.len());
    let mut crit = None;
    for k in 0..cfg.critic_steps_per_gen as u64 {
        let cx = step_code(cfg, nx, step, TAG_CRITIC + 3 * k);
        let cy = step_code(cfg, ny, step, TAG_CRITIC + 3 * k + 1);
        let b = state.models.bind(CRITICS);
        let obj = critic_objective(
            &state.models,
            &b,
            x,
            y,
            &cx,
            &cy,
            cfg,
            (cfg.seed, stream(step, TAG_CRITIC + 3 * k + 2)),
        )?;
        if !obj.total.value().all_finite() {
            return Err(Error::NonFinite {
                what: "critic loss".into(),
                step,
            });
        }
        state.apply(&b, &obj.total, CRITICS);
        if let Lipschitz::Clip(c) = cfg.lipschitz {
            let sets = state.models.param_sets_mut();
            for (i, ps) in sets.into_iter().enumerate() {
                if CRITICS[i] {
                    for t in ps.values_mut() {
                        t.data_mut().iter_mut().for_each(|v| *v = v.clamp(-c, c));
                    }
                }
            }
        }
        state.critic_updates += 1;
        crit = Some((obj.adv, obj.gp));
    }
    let b = state.models.bind(GENERATORS);
    let cx = step_code(cfg, nx, step, TAG_CODE_X);
    let cy = step_code(cfg, ny, step, TAG_CODE_Y);
    let obj = generator_objective(&state.models, &b, x, y, &cx, &cy, cfg)?;
    let mut report = obj.report;
    let (adv, gp) = crit.expect("at least one critic step");
    report.d_adv = adv;
    report.gp = gp;
    report.total_d = adv + cfg.weights.gp_weight * gp;
    if let Some(field) = report.first_non_finite() {
        return Err(Error::NonFinite {
            what: field.into(),
            step,
        });
    }
    state.apply(&b, &obj.total, GENERATORS);
    state.gen_updates += 1;
    if !state.models.all_finite() {
        return Err(Error::NonFinite {
            what: "parameters".into(),
            step,
        });
    }
    state.step += 1;
    Ok(report)
}

/// Adapted images and transforms of `x` under `m` codes drawn from `seed`.
pub fn adapt_with_params(
    models: &Models,
    x: &ImageBatch,
    m: usize,
    seed: u64,
) -> Result<Vec<(ImageBatch, Tensor)>> {
    let _g = no_grad();
    let b = models.bind_frozen();
    let xv = Var::constant(x.values.clone());
    let mv = Var::constant(x.mask.clone());
    (0..m as u64)
        .map(|k| {
            let code = adapt_code(models, x.len(), seed, k);
            let s = stm_forward(&models.s1, &b.s1, &xv, &mv, &code)?;
            let out = models.g1.forward(&b.g1, &s.warped)?;
            let batch = ImageBatch {
                values: out.value().clone(),
                mask: s.mask.value().clone(),
                identity: x.identity.clone(),
                camera: x.camera.clone(),
            };
            Ok((batch, s.params.value().clone()))
        })
        .collect()
}

/// The `k`-th adaptation code for a batch of `n`: one code shared by all
/// items.
pub fn adapt_code(models: &Models, n: usize, seed: u64, k: u64) -> SpatialCode {
    let row = SpatialCode::sample_stream(1, models.cfg.code_dim, seed, k);
    SpatialCode::repeated(row.values.data(), n, seed)
}

/// `m` adapted versions of `x`.
pub fn adapt(models: &Models, x: &ImageBatch, m: usize, seed: u64) -> Result<Vec<ImageBatch>> {
    Ok(adapt_with_params(models, x, m, seed)?
        .into_iter()
        .map(|(b, _)| b)
        .collect())
}

/// Training inputs. `gt` holds ground-truth transforms of `x` items (used
/// only for evaluation).
pub struct TrainData<'a> {
    pub x: &'a Dataset,
    pub y: &'a Dataset,
    pub gt: Option<&'a [Transform]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub report: LossReport,
    pub corner_error: Option<f64>,
}

impl LogRow {
    pub fn header() -> String {
        let mut cols = vec!["step"];
        cols.extend(LossReport::FIELDS);
        cols.push("corner_error");
        cols.join(",")
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.step.to_string();
        for v in self.report.values() {
            s.push(',');
            s.push_str(&format!("{v:e}"));
        }
        s.push(',');
        if let Some(c) = self.corner_error {
            s.push_str(&format!("{c:e}"));
        }
        s
    }
}

/// Where and how a training run writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    pub dir: Option<PathBuf>,
    /// Canonical config text stored in checkpoints.
    pub config_text: String,
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<LogRow>,
}

/// Batch indices of step `step` for each domain.
pub fn step_batches(cfg: &TrainConfig, data: &TrainData, step: u64) -> (ImageBatch, ImageBatch) {
    let ix = epoch_batch_indices(data.x.len(), cfg.batch_size, cfg.seed.wrapping_add(1), step);
    let iy = epoch_batch_indices(data.y.len(), cfg.batch_size, cfg.seed.wrapping_add(2), step);
    (data.x.items.select(&ix), data.y.items.select(&iy))
}

/// Trains until `cfg.steps`, optionally resuming from `resume`.
pub fn train(
    cfg: &TrainConfig,
    data: &TrainData,
    out: &RunOutput,
    resume: Option<TrainState>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.x.len() < cfg.batch_size || data.y.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "batch_size {} exceeds dataset size ({} / {})",
            cfg.batch_size,
            data.x.len(),
            data.y.len()
        )));
    }
    if data.x.items.channels() != cfg.net.channels || data.x.items.size() != cfg.net.size {
        return Err(Error::Config(
            "dataset image shape does not match the network config".into(),
        ));
    }
    let mut state = match resume {
        Some(s) => s,
        None => TrainState::new(cfg)?,
    };
    let mut log_file = match &out.dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("log.csv");
            let exists = path.exists() && state.step > 0;
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(exists)
                .write(true)
                .truncate(!exists)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            if !exists {
                writeln!(f, "{}", LogRow::header()).map_err(|e| Error::io(&path, e))?;
            }
            Some((f, path))
        }
        None => None,
    };
    let mut log = Vec::new();
    let eval_n = data.x.len().min(64);
    let eval_idx: Vec<usize> = (0..eval_n).collect();
    while state.step < cfg.steps {
        let step = state.step;
        let (bx, by) = step_batches(cfg, data, step);
        let report = match train_step(&mut state, &bx, &by, cfg) {
            Ok(r) => r,
            Err(e) => {
                if let Some(dir) = &out.dir {
                    let snap = dir.join("abort_snapshot.ckpt");
                    let _ = Checkpoint::from_state(&state, &out.config_text).save(&snap);
                }
                return Err(e);
            }
        };
        let done = state.step;
        let corner_error = match data.gt {
            Some(gt) if done % cfg.eval_every == 0 || done == cfg.steps => {
                let sub = data.x.items.select(&eval_idx);
                let gts: Vec<Transform> = eval_idx.iter().map(|&i| gt[i].clone()).collect();
                Some(mean_corner_error(&state.models, &sub, &gts, cfg.seed)?.mean)
            }
            _ => None,
        };
        let row = LogRow {
            step: done,
            report,
            corner_error,
        };
        if let Some((f, path)) = log_file.as_mut() {
            writeln!(f, "{}", row.to_csv()).map_err(|e| Error::io(path.clone(), e))?;
        }
        log.push(row);
        if let Some(dir) = &out.dir {
            if done % cfg.checkpoint_every == 0 || done == cfg.steps {
                Checkpoint::from_state(&state, &out.config_text).save(&dir.join("last.ckpt"))?;
            }
            if done % cfg.eval_every == 0 || done == cfg.steps {
                let sub = data.x.items.select(&eval_idx[..eval_n.min(4)]);
                let tgt = data
                    .y
                    .items
                    .select(&(0..eval_n.min(4).min(data.y.len())).collect::<Vec<_>>());
                write_grid(
                    &state.models,
                    &sub,
                    &tgt,
                    cfg,
                    &dir.join(format!("step_{done}_grid.png")),
                )?;
            }
        }
    }
    Ok(TrainOutcome { state, log })
}

/// Image grid with one row per item: source, warped, `adapt_m` adapted
/// versions, target sample.
pub fn write_grid(
    models: &Models,
    x: &ImageBatch,
    y: &ImageBatch,
    cfg: &TrainConfig,
    path: &Path,
) -> Result<()> {
    let _g = no_grad();
    let b = models.bind_frozen();
    let code = adapt_code(models, x.len(), cfg.seed, 0);
    let s = stm_forward(
        &models.s1,
        &b.s1,
        &Var::constant(x.values.clone()),
        &Var::constant(x.mask.clone()),
        &code,
    )?;
    let mut cols = vec![x.values.clone(), s.warped.value().clone()];
    for a in adapt(models, x, cfg.adapt_m, cfg.seed)? {
        cols.push(a.values);
    }
    cols.push(y.values.clone());
    let rows = x.len();
    let (h, w) = x.size();
    let gap = 1u32;
    let (gw, gh) = (
        cols.len() as u32 * (w as u32 + gap),
        rows as u32 * (h as u32 + gap),
    );
    let mut img = image::RgbImage::from_pixel(gw, gh, image::Rgb([255, 255, 255]));
    for (ci, col) in cols.iter().enumerate() {
        for r in 0..rows.min(col.shape()[0]) {
            let tile = crate::data::to_rgb8(col, r);
            image::imageops::replace(
                &mut img,
                &tile,
                (ci as u32 * (w as u32 + gap)) as i64,
                (r as u32 * (h as u32 + gap)) as i64,
            );
        }
    }
    save_png(&img, path)
}
