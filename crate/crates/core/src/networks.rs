//! Learnable components: localization networks inside the two spatial
//! transformer modules, the generators, the image and transform critics and
//! the Siamese embedding network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{no_grad, Var};
use crate::error::{Error, Result};
use crate::geometry::{grid_sample, transform_grid, TransformKind};
use crate::nn::{Bound, Conv, Linear, ParamSet};
use crate::ops;
use crate::tensor::Tensor;

const SLOPE: f64 = 0.2;

fn act(x: &Var) -> Var {
    ops::leaky_relu(x, SLOPE)
}

/// Architecture hyper-parameters shared by all networks.
#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub channels: usize,
    pub size: (usize, usize),
    pub kind: TransformKind,
    pub code_dim: usize,
    /// Broadcast the spatial code as extra input planes (otherwise it is
    /// appended to the flattened localization features).
    pub code_at_input: bool,
    pub loc_width: usize,
    pub loc_hidden: usize,
    pub gen_width: usize,
    pub gen_res_blocks: usize,
    /// Generator predicts a residual added to its input.
    pub generator_skip: bool,
    pub critic_width: usize,
    pub dt_hidden: usize,
    pub siam_width: usize,
    pub embed_dim: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            size: (32, 32),
            kind: TransformKind::Homography,
            code_dim: 8,
            code_at_input: true,
            loc_width: 8,
            loc_hidden: 32,
            gen_width: 8,
            gen_res_blocks: 2,
            generator_skip: true,
            critic_width: 8,
            dt_hidden: 32,
            siam_width: 8,
            embed_dim: 16,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.size;
        if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "image size {h}x{w} must be a positive multiple of 8"
            )));
        }
        let widths = [
            self.channels,
            self.loc_width,
            self.loc_hidden,
            self.gen_width,
            self.critic_width,
            self.dt_hidden,
            self.siam_width,
            self.embed_dim,
        ];
        if widths.contains(&0) {
            return Err(Error::Config("network widths must be positive".into()));
        }
        Ok(())
    }
}

/// Standard-normal codes conditioning the localization networks, one row per
/// batch item.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialCode {
    pub values: Tensor,
    pub seed: u64,
}

impl SpatialCode {
    pub fn sample(n: usize, code_dim: usize, seed: u64) -> Self {
        Self::sample_stream(n, code_dim, seed, 0)
    }

    /// Codes from random stream `stream` of `seed`.
    pub fn sample_stream(n: usize, code_dim: usize, seed: u64, stream: u64) -> Self {
        let mut rng = crate::seeded_rng(seed, stream);
        let data = (0..n * code_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Self {
            values: Tensor::new(&[n, code_dim], data),
            seed,
        }
    }

    /// The same code for every item.
    pub fn repeated(row: &[f64], n: usize, seed: u64) -> Self {
        let data = (0..n).flat_map(|_| row.iter().copied()).collect();
        Self {
            values: Tensor::new(&[n, row.len()], data),
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Conv trunk over image + mask (+ code planes), then a zero-initialized
/// head whose bias is the identity transform.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationNet {
    pub params: ParamSet,
    convs: Vec<Conv>,
    fc: Linear,
    head: Linear,
    cfg: NetConfig,
}

impl LocalizationNet {
    pub fn new(cfg: &NetConfig, name: &str, rng: &mut ChaCha8Rng) -> Self {
        let mut ps = ParamSet::new();
        let w = cfg.loc_width;
        let cin = cfg.channels + 1 + if cfg.code_at_input { cfg.code_dim } else { 0 };
        let convs = vec![
            Conv::new(&mut ps, &format!("{name}.conv0"), rng, (cin, w), 3, 2, 1),
            Conv::new(&mut ps, &format!("{name}.conv1"), rng, (w, 2 * w), 3, 2, 1),
            Conv::new(
                &mut ps,
                &format!("{name}.conv2"),
                rng,
                (2 * w, 2 * w),
                3,
                2,
                1,
            ),
        ];
        let feat = 2 * w * (cfg.size.0 / 8) * (cfg.size.1 / 8);
        let fc_in = feat + if cfg.code_at_input { 0 } else { cfg.code_dim };
        let fc = Linear::new(&mut ps, &format!("{name}.fc"), rng, (fc_in, cfg.loc_hidden));
        let head = Linear::with_bias(
            &mut ps,
            &format!("{name}.head"),
            cfg.loc_hidden,
            Tensor::new(&[cfg.kind.param_len()], cfg.kind.identity_params()),
        );
        Self {
            params: ps,
            convs,
            fc,
            head,
            cfg: cfg.clone(),
        }
    }

    pub fn kind(&self) -> TransformKind {
        self.cfg.kind
    }

    /// Transform parameters `[n, p]` for images `[n, c, h, w]` with masks
    /// `[n, 1, h, w]`.
    pub fn localize(&self, p: &Bound, img: &Var, mask: &Var, code: &SpatialCode) -> Result<Var> {
        let s = img.shape().to_vec();
        if s.len() != 4 || s[1] != self.cfg.channels {
            return Err(Error::Shape(format!(
                "localization expects {} image channels, got {:?}",
                self.cfg.channels, s
            )));
        }
        if mask.shape() != [s[0], 1, s[2], s[3]] {
            return Err(Error::Shape(format!(
                "mask shape {:?} for images {:?}",
                mask.shape(),
                s
            )));
        }
        if code.dim() != self.cfg.code_dim || code.len() != s[0] {
            return Err(Error::Shape(format!(
                "code {:?} does not match batch {} x code_dim {}",
                code.values.shape(),
                s[0],
                self.cfg.code_dim
            )));
        }
        let (n, h, w) = (s[0], s[2], s[3]);
        let code_var = Var::constant(code.values.clone());
        let mut x = ops::concat(&[img.clone(), mask.clone()], 1);
        if self.cfg.code_at_input {
            let planes = ops::broadcast_to(
                &ops::reshape(&code_var, &[n, self.cfg.code_dim, 1, 1]),
                &[n, self.cfg.code_dim, h, w],
            );
            x = ops::concat(&[x, planes], 1);
        }
        for c in &self.convs {
            x = act(&c.forward(p, &x));
        }
        let mut f = ops::flatten(&x);
        if !self.cfg.code_at_input {
            f = ops::concat(&[f, code_var], 1);
        }
        let hdn = act(&self.fc.forward(p, &f));
        Ok(self.head.forward(p, &hdn))
    }
}

/// Output of a spatial transformer module.
#[derive(Clone, Debug)]
pub struct StmOutput {
    pub warped: Var,
    /// Warped mask, thresholded at 0.5 (not differentiated).
    pub mask: Var,
    pub params: Var,
}

/// Warps `img` and `mask` with transform parameters `[n, p]`.
pub fn apply_transform(img: &Var, mask: &Var, params: &Var, kind: TransformKind) -> StmOutput {
    let (h, w) = (img.shape()[2], img.shape()[3]);
    let grid = transform_grid(params, kind, (h, w));
    let warped = grid_sample(img, &grid, 0.0);
    let mask = {
        let _g = no_grad();
        let m = grid_sample(&mask.detach(), &grid.detach(), 0.0);
        Var::constant(m.value().map(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
    };
    StmOutput {
        warped,
        mask,
        params: params.clone(),
    }
}

/// Localizes, then warps image and mask with the predicted transform.
pub fn stm_forward(
    net: &LocalizationNet,
    p: &Bound,
    img: &Var,
    mask: &Var,
    code: &SpatialCode,
) -> Result<StmOutput> {
    let params = net.localize(p, img, mask, code)?;
    Ok(apply_transform(img, mask, &params, net.kind()))
}

/// Encoder, residual blocks at half resolution, nearest upsampling decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub params: ParamSet,
    enc0: Conv,
    enc1: Conv,
    res: Vec<(Conv, Conv)>,
    dec0: Conv,
    dec1: Conv,
    skip: bool,
    channels: usize,
}

impl Generator {
    pub fn new(cfg: &NetConfig, name: &str, rng: &mut ChaCha8Rng) -> Self {
        let mut ps = ParamSet::new();
        let (c, w) = (cfg.channels, cfg.gen_width);
        let enc0 = Conv::new(&mut ps, &format!("{name}.enc0"), rng, (c, w), 3, 1, 1);
        let enc1 = Conv::new(&mut ps, &format!("{name}.enc1"), rng, (w, 2 * w), 3, 2, 1);
        let res = (0..cfg.gen_res_blocks)
            .map(|i| {
                (
                    Conv::new(
                        &mut ps,
                        &format!("{name}.res{i}a"),
                        rng,
                        (2 * w, 2 * w),
                        3,
                        1,
                        1,
                    ),
                    Conv::new(
                        &mut ps,
                        &format!("{name}.res{i}b"),
                        rng,
                        (2 * w, 2 * w),
                        3,
                        1,
                        1,
                    ),
                )
            })
            .collect();
        let dec0 = Conv::new(&mut ps, &format!("{name}.dec0"), rng, (2 * w, w), 3, 1, 1);
        let dec1 = Conv::new(&mut ps, &format!("{name}.dec1"), rng, (w, c), 3, 1, 1);
        if cfg.generator_skip {
            // start as the identity mapping
            let last = ps.len() - 2;
            ps.values_mut()[last] = Tensor::zeros(&[c, w, 3, 3]);
        }
        Self {
            params: ps,
            enc0,
            enc1,
            res,
            dec0,
            dec1,
            skip: cfg.generator_skip,
            channels: c,
        }
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        let s = x.shape();
        if s.len() != 4
            || s[1] != self.channels
            || !s[2].is_multiple_of(2)
            || !s[3].is_multiple_of(2)
        {
            return Err(Error::Shape(format!("generator input {:?}", s)));
        }
        let mut h = act(&self.enc0.forward(p, x));
        h = act(&self.enc1.forward(p, &h));
        for (a, b) in &self.res {
            let r = b.forward(p, &act(&a.forward(p, &h)));
            h = ops::add(&h, &r);
        }
        h = act(&self.dec0.forward(p, &h));
        h = ops::upsample_nearest2(&h);
        let r = self.dec1.forward(p, &h);
        Ok(if self.skip {
            ops::clamp(&ops::add(x, &r), -1.0, 1.0)
        } else {
            ops::tanh(&r)
        })
    }
}

/// Wasserstein critic over images: strided convs, then one linear score.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageCritic {
    pub params: ParamSet,
    convs: Vec<Conv>,
    out: Linear,
    channels: usize,
}

impl ImageCritic {
    pub fn new(cfg: &NetConfig, name: &str, rng: &mut ChaCha8Rng) -> Self {
        let mut ps = ParamSet::new();
        let w = cfg.critic_width;
        let convs = vec![
            Conv::new(
                &mut ps,
                &format!("{name}.conv0"),
                rng,
                (cfg.channels, w),
                4,
                2,
                1,
            ),
            Conv::new(&mut ps, &format!("{name}.conv1"), rng, (w, 2 * w), 4, 2, 1),
            Conv::new(
                &mut ps,
                &format!("{name}.conv2"),
                rng,
                (2 * w, 4 * w),
                4,
                2,
                1,
            ),
        ];
        let feat = 4 * w * (cfg.size.0 / 8) * (cfg.size.1 / 8);
        let out = Linear::new(&mut ps, &format!("{name}.out"), rng, (feat, 1));
        Self {
            params: ps,
            convs,
            out,
            channels: cfg.channels,
        }
    }

    /// One score per item, shape `[n]`.
    pub fn score(&self, p: &Bound, x: &Var) -> Result<Var> {
        if x.shape().len() != 4 || x.shape()[1] != self.channels {
            return Err(Error::Shape(format!("critic input {:?}", x.shape())));
        }
        let mut h = x.clone();
        for c in &self.convs {
            h = act(&c.forward(p, &h));
        }
        let n = x.shape()[0];
        Ok(ops::reshape(&self.out.forward(p, &ops::flatten(&h)), &[n]))
    }
}

/// Critic over transform parameter vectors, measured relative to identity.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformCritic {
    pub params: ParamSet,
    l0: Linear,
    l1: Linear,
    out: Linear,
    kind: TransformKind,
}

impl TransformCritic {
    pub fn new(cfg: &NetConfig, name: &str, rng: &mut ChaCha8Rng) -> Self {
        let mut ps = ParamSet::new();
        let p = cfg.kind.param_len();
        let l0 = Linear::new(&mut ps, &format!("{name}.l0"), rng, (p, cfg.dt_hidden));
        let l1 = Linear::new(
            &mut ps,
            &format!("{name}.l1"),
            rng,
            (cfg.dt_hidden, cfg.dt_hidden),
        );
        let out = Linear::new(&mut ps, &format!("{name}.out"), rng, (cfg.dt_hidden, 1));
        Self {
            params: ps,
            l0,
            l1,
            out,
            kind: cfg.kind,
        }
    }

    pub fn score(&self, p: &Bound, params: &Var) -> Result<Var> {
        let s = params.shape();
        if s.len() != 2 || s[1] != self.kind.param_len() {
            return Err(Error::Shape(format!(
                "transform critic expects [n, {}], got {:?}",
                self.kind.param_len(),
                s
            )));
        }
        let n = s[0];
        let id = Tensor::new(&[1, s[1]], self.kind.identity_params());
        let id = ops::broadcast_to(&Var::constant(id), s);
        let x = ops::sub(params, &id);
        let h = act(&self.l0.forward(p, &x));
        let h = act(&self.l1.forward(p, &h));
        Ok(ops::reshape(&self.out.forward(p, &h), &[n]))
    }
}

/// Convolutional embedding network.
#[derive(Clone, Debug, PartialEq)]
pub struct SiameseNet {
    pub params: ParamSet,
    convs: Vec<Conv>,
    out: Linear,
    channels: usize,
}

impl SiameseNet {
    pub fn new(cfg: &NetConfig, name: &str, rng: &mut ChaCha8Rng) -> Self {
        let mut ps = ParamSet::new();
        let w = cfg.siam_width;
        let convs = vec![
            Conv::new(
                &mut ps,
                &format!("{name}.conv0"),
                rng,
                (cfg.channels, w),
                3,
                2,
                1,
            ),
            Conv::new(&mut ps, &format!("{name}.conv1"), rng, (w, 2 * w), 3, 2, 1),
            Conv::new(
                &mut ps,
                &format!("{name}.conv2"),
                rng,
                (2 * w, 2 * w),
                3,
                2,
                1,
            ),
        ];
        let feat = 2 * w * (cfg.size.0 / 8) * (cfg.size.1 / 8);
        let out = Linear::new(&mut ps, &format!("{name}.out"), rng, (feat, cfg.embed_dim));
        Self {
            params: ps,
            convs,
            out,
            channels: cfg.channels,
        }
    }

    /// Embeddings `[n, embed_dim]`.
    pub fn embed(&self, p: &Bound, x: &Var) -> Result<Var> {
        if x.shape().len() != 4 || x.shape()[1] != self.channels {
            return Err(Error::Shape(format!("siamese input {:?}", x.shape())));
        }
        let mut h = x.clone();
        for c in &self.convs {
            h = act(&c.forward(p, &h));
        }
        Ok(self.out.forward(p, &ops::flatten(&h)))
    }
}

/// Index of each network in [`Models::param_sets`].
pub const NETWORK_NAMES: [&str; 8] = ["s1", "s2", "g1", "g2", "d1", "d2", "dt", "siam"];

/// Every network of the adaptation model.
#[derive(Clone, Debug, PartialEq)]
pub struct Models {
    pub cfg: NetConfig,
    pub s1: LocalizationNet,
    pub s2: LocalizationNet,
    pub g1: Generator,
    pub g2: Generator,
    pub d1: ImageCritic,
    pub d2: ImageCritic,
    pub dt: TransformCritic,
    pub siam: SiameseNet,
}

/// Graph bindings of all parameters for one forward pass.
#[derive(Clone, Debug)]
pub struct BoundModels {
    pub s1: Bound,
    pub s2: Bound,
    pub g1: Bound,
    pub g2: Bound,
    pub d1: Bound,
    pub d2: Bound,
    pub dt: Bound,
    pub siam: Bound,
}

impl BoundModels {
    pub fn as_array(&self) -> [&Bound; 8] {
        [
            &self.s1, &self.s2, &self.g1, &self.g2, &self.d1, &self.d2, &self.dt, &self.siam,
        ]
    }
}

impl Models {
    pub fn new(cfg: &NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            cfg: cfg.clone(),
            s1: LocalizationNet::new(cfg, "s1", &mut rng),
            s2: LocalizationNet::new(cfg, "s2", &mut rng),
            g1: Generator::new(cfg, "g1", &mut rng),
            g2: Generator::new(cfg, "g2", &mut rng),
            d1: ImageCritic::new(cfg, "d1", &mut rng),
            d2: ImageCritic::new(cfg, "d2", &mut rng),
            dt: TransformCritic::new(cfg, "dt", &mut rng),
            siam: SiameseNet::new(cfg, "siam", &mut rng),
        })
    }

    pub fn param_sets(&self) -> [&ParamSet; 8] {
        [
            &self.s1.params,
            &self.s2.params,
            &self.g1.params,
            &self.g2.params,
            &self.d1.params,
            &self.d2.params,
            &self.dt.params,
            &self.siam.params,
        ]
    }

    pub fn param_sets_mut(&mut self) -> [&mut ParamSet; 8] {
        [
            &mut self.s1.params,
            &mut self.s2.params,
            &mut self.g1.params,
            &mut self.g2.params,
            &mut self.d1.params,
            &mut self.d2.params,
            &mut self.dt.params,
            &mut self.siam.params,
        ]
    }

    /// Binds all parameters; `trainable[i]` selects leaves for network `i`
    /// in [`NETWORK_NAMES`] order.
    pub fn bind(&self, trainable: [bool; 8]) -> BoundModels {
        let ps = self.param_sets();
        let b = |i: usize| ps[i].bind(trainable[i]);
        BoundModels {
            s1: b(0),
            s2: b(1),
            g1: b(2),
            g2: b(3),
            d1: b(4),
            d2: b(5),
            dt: b(6),
            siam: b(7),
        }
    }

    pub fn bind_frozen(&self) -> BoundModels {
        self.bind([false; 8])
    }

    pub fn all_finite(&self) -> bool {
        self.param_sets().iter().all(|p| p.all_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{generate_grid, sample_bilinear, Transform};

    fn small_cfg() -> NetConfig {
        NetConfig {
            size: (8, 8),
            ..NetConfig::default()
        }
    }

    fn random_images(n: usize, (h, w): (usize, usize), seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * 3 * h * w)
            .map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0))
            .collect();
        Tensor::new(&[n, 3, h, w], data)
    }

    #[test]
    fn localization_starts_at_identity() {
        let cfg = NetConfig::default();
        let m = Models::new(&cfg, 0).unwrap();
        let x = Var::constant(random_images(3, cfg.size, 1));
        let mask = Var::constant(Tensor::ones(&[3, 1, 32, 32]));
        let code = SpatialCode::sample(3, cfg.code_dim, 5);
        let b = m.bind_frozen();
        let out = stm_forward(&m.s1, &b.s1, &x, &mask, &code).unwrap();
        let id = cfg.kind.identity_params();
        for r in 0..3 {
            assert_eq!(
                &out.params.value().data()[r * 8..(r + 1) * 8],
                id.as_slice()
            );
        }
        assert_eq!(out.warped.value(), x.value());
        assert_eq!(out.mask.value(), mask.value());
    }

    #[test]
    fn localize_rejects_channel_mismatch() {
        let cfg = small_cfg();
        let m = Models::new(&cfg, 0).unwrap();
        let b = m.bind_frozen();
        let x = Var::constant(Tensor::zeros(&[1, 2, 8, 8]));
        let mask = Var::constant(Tensor::ones(&[1, 1, 8, 8]));
        let code = SpatialCode::sample(1, cfg.code_dim, 0);
        assert!(m.s1.localize(&b.s1, &x, &mask, &code).is_err());
    }

    #[test]
    fn code_injection_variants_start_at_identity() {
        let cfg = NetConfig {
            code_at_input: false,
            ..small_cfg()
        };
        let m = Models::new(&cfg, 2).unwrap();
        let b = m.bind_frozen();
        let x = Var::constant(random_images(2, cfg.size, 3));
        let mask = Var::constant(Tensor::ones(&[2, 1, 8, 8]));
        let p =
            m.s2.localize(&b.s2, &x, &mask, &SpatialCode::sample(2, cfg.code_dim, 9))
                .unwrap();
        assert_eq!(p.value().data()[..8], cfg.kind.identity_params()[..]);
    }

    #[test]
    fn apply_transform_matches_manual_warp() {
        let x = random_images(1, (8, 8), 4);
        let t = Transform::translation(TransformKind::Homography, 0.5, 0.0).unwrap();
        let params = Var::constant(Tensor::new(&[1, 8], t.params().to_vec()));
        let out = apply_transform(
            &Var::constant(x.clone()),
            &Var::constant(Tensor::ones(&[1, 1, 8, 8])),
            &params,
            t.kind(),
        );
        let grid = generate_grid(&t, (8, 8))
            .unwrap()
            .to_tensor()
            .reshape(&[1, 8, 8, 2])
            .unwrap();
        let manual = sample_bilinear(&x, &grid, 0.0);
        assert_eq!(out.warped.value(), &manual);
    }

    #[test]
    fn shapes_and_bounds() {
        let cfg = NetConfig::default();
        let m = Models::new(&cfg, 1).unwrap();
        let b = m.bind_frozen();
        let x = Var::constant(random_images(2, cfg.size, 2));
        let g = m.g1.forward(&b.g1, &x).unwrap();
        assert_eq!(g.shape(), x.shape());
        assert!(g.value().data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(m.d1.score(&b.d1, &x).unwrap().shape(), &[2]);
        assert_eq!(
            m.siam.embed(&b.siam, &x).unwrap().shape(),
            &[2, cfg.embed_dim]
        );
        let id = Var::constant(Tensor::new(&[1, 8], cfg.kind.identity_params()));
        assert!(m.dt.score(&b.dt, &id).unwrap().item().is_finite());
        let again = m.siam.embed(&b.siam, &x).unwrap();
        assert_eq!(again.value(), m.siam.embed(&b.siam, &x).unwrap().value());
    }

    #[test]
    fn codes_are_reproducible() {
        assert_eq!(SpatialCode::sample(4, 8, 3), SpatialCode::sample(4, 8, 3));
        assert_ne!(SpatialCode::sample(4, 8, 3), SpatialCode::sample(4, 8, 4));
    }
}
