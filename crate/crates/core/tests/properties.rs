use geoadapt_core::checkpoint::Checkpoint;
use geoadapt_core::data::{synth_pair, ImageBatch, SyntheticDomainSpec, SyntheticPair};
use geoadapt_core::evaluation::cmc_map;
use geoadapt_core::geometry::{
    compose, corner_error, generate_grid, invert, pixel_to_norm, warp, Transform, TransformKind,
};
use geoadapt_core::losses::{cycle_loss, pcl, scl, siamese_loss, LossWeights};
use geoadapt_core::networks::{apply_transform, Generator, Models, NetConfig, SpatialCode};
use geoadapt_core::nn::Bound;
use geoadapt_core::training::{
    adapt, adapt_code, forward_cycle_x, generator_objective, step_code, train, CycleArtifacts,
    RunOutput, TrainConfig, TrainData, TrainState,
};
use geoadapt_core::{no_grad, ops, Tensor, Var};
use proptest::prelude::*;

fn homography() -> impl Strategy<Value = Transform> {
    prop::collection::vec(-0.25f64..0.25, 8).prop_map(|d| {
        let mut p = TransformKind::Homography.identity_params();
        for (j, (v, e)) in p.iter_mut().zip(d).enumerate() {
            *v += if j >= 6 { 0.3 * e } else { e };
        }
        Transform::new(TransformKind::Homography, &p).expect("well conditioned")
    })
}

fn affine() -> impl Strategy<Value = Transform> {
    prop::collection::vec(-0.3f64..0.3, 6).prop_map(|d| {
        let mut p = TransformKind::Affine.identity_params();
        for (v, e) in p.iter_mut().zip(d) {
            *v += e;
        }
        Transform::new(TransformKind::Affine, &p).expect("well conditioned")
    })
}

fn params_var(ts: &[Transform]) -> Var {
    let p = ts[0].kind().param_len();
    let data = ts.iter().flat_map(|t| t.params().to_vec()).collect();
    Var::constant(Tensor::from_vec(&[ts.len(), p], data).unwrap())
}

fn image(n: usize, c: usize, h: usize, w: usize, vals: &[f64]) -> Tensor {
    let data = (0..n * c * h * w).map(|i| vals[i % vals.len()]).collect();
    Tensor::from_vec(&[n, c, h, w], data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn inverse_round_trips(t in prop_oneof![homography(), affine()]) {
        let inv = invert(&t).unwrap();
        let id = Transform::identity(t.kind());
        for c in [compose(&t, &inv).unwrap(), compose(&inv, &t).unwrap()] {
            for (a, b) in c.params().iter().zip(id.params()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn valid_mask_marks_in_frame_coordinates(t in homography()) {
        let g = generate_grid(&t, (7, 9)).unwrap();
        prop_assert_eq!(g.coords.len(), 63);
        for (&(u, v), &ok) in g.coords.iter().zip(&g.valid_mask) {
            let m = u.abs().max(v.abs());
            if (m - 1.0).abs() > 1e-9 {
                prop_assert_eq!(ok, m < 1.0);
            }
        }
    }

    #[test]
    fn grids_agree_across_resolutions(t in homography()) {
        let coarse = generate_grid(&t, (17, 17)).unwrap();
        let fine = generate_grid(&t, (33, 33)).unwrap();
        for i in 0..17 {
            for j in 0..17 {
                let (a, b) = (coarse.at(i, j), fine.at(2 * i, 2 * j));
                prop_assert!((a.0 - b.0).abs() < 1e-6 && (a.1 - b.1).abs() < 1e-6);
            }
        }
        let (a, b) = (generate_grid(&t, (16, 16)).unwrap(), generate_grid(&t, (32, 32)).unwrap());
        for (i, j) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let (p, q) = (a.at(i * 15, j * 15), b.at(i * 31, j * 31));
            prop_assert!((p.0 - q.0).abs() < 1e-6 && (p.1 - q.1).abs() < 1e-6);
        }
    }

    #[test]
    fn identity_warp_is_bit_identical(vals in prop::collection::vec(-1.0f64..1.0, 1..40)) {
        let batch = ImageBatch::from_values(image(2, 3, 6, 5, &vals)).unwrap();
        let g = generate_grid(&Transform::identity(TransformKind::Homography), (6, 5)).unwrap();
        let out = warp(&batch, &g, 0.3).unwrap();
        prop_assert_eq!(out.values.data(), batch.values.data());
    }

    #[test]
    fn integer_translation_round_trip_is_exact(
        dx in -2i32..=2,
        dy in -2i32..=2,
        vals in prop::collection::vec(-1.0f64..1.0, 1..64),
    ) {
        let (h, w) = (8usize, 8usize);
        let img = ImageBatch::from_values(image(1, 2, h, w, &vals)).unwrap();
        let t = Transform::translation_px(TransformKind::Homography, dx as f64, dy as f64, (h, w)).unwrap();
        let there = warp(&img, &generate_grid(&t, (h, w)).unwrap(), 0.0).unwrap();
        let back = warp(&there, &generate_grid(&invert(&t).unwrap(), (h, w)).unwrap(), 0.0).unwrap();
        let (mx, my) = (dx.unsigned_abs() as usize, dy.unsigned_abs() as usize);
        for c in 0..2 {
            for i in my..h - my {
                for j in mx..w - mx {
                    let k = (c * h + i) * w + j;
                    prop_assert_eq!(back.values.data()[k], img.values.data()[k]);
                }
            }
        }
    }

    #[test]
    fn pcl_is_symmetric_and_nonnegative(
        a in prop::collection::vec(-1.0f64..1.0, 12),
        b in prop::collection::vec(-1.0f64..1.0, 12),
    ) {
        let va = Var::constant(Tensor::from_vec(&[1, 3, 2, 2], a).unwrap());
        let vb = Var::constant(Tensor::from_vec(&[1, 3, 2, 2], b).unwrap());
        let (ab, ba) = (pcl(&va, &vb).unwrap().item(), pcl(&vb, &va).unwrap().item());
        prop_assert_eq!(ab, ba);
        prop_assert!(ab >= 0.0);
    }

    #[test]
    fn scl_matches_closed_form_inverse(t1 in homography(), t2 in homography()) {
        let got = scl(&params_var(std::slice::from_ref(&t1)), &params_var(std::slice::from_ref(&t2)), TransformKind::Homography)
            .unwrap()
            .item();
        let inv = invert(&t1).unwrap();
        let want = inv.params().iter().zip(t2.params()).map(|(a, b)| (a - b).abs()).sum::<f64>() / 8.0;
        prop_assert!((got - want).abs() < 1e-9);
        prop_assert!(got >= 0.0);
    }

    #[test]
    fn siamese_branches(d in 0.0f64..4.0, extra in 0.0f64..2.0, m1 in 0.1f64..3.0, m2 in 0.1f64..3.0) {
        let e = |x: f64| Var::constant(Tensor::from_vec(&[1, 2], vec![x, 0.0]).unwrap());
        let loss = |label: u8, dist: f64, m: f64| siamese_loss(&[label], &e(0.0), &e(dist), m).unwrap().item();
        prop_assert_eq!(loss(1, d, m1), loss(1, d, m2));
        prop_assert!(loss(0, d + extra, m1) <= loss(0, d, m1));
        prop_assert!(loss(0, d, m1) >= 0.0 && loss(1, d, m1) >= 0.0);
    }

    #[test]
    fn cycle_loss_is_linear(s in 0.0f64..2.0, p in 0.0f64..2.0, s2 in 0.0f64..2.0, p2 in 0.0f64..2.0, k in 0.0f64..3.0) {
        let w = LossWeights::default();
        let c = |s: f64, p: f64| cycle_loss(&Var::scalar(s), &Var::scalar(p), &w).item();
        prop_assert!((c(s + s2, p + p2) - (c(s, p) + c(s2, p2))).abs() < 1e-12);
        prop_assert!((c(k * s, k * p) - k * c(s, p)).abs() < 1e-12);
    }

    #[test]
    fn corner_error_vanishes_iff_corners_coincide(t in homography(), u in homography(), pick in 0..3usize) {
        let other = match pick {
            0 => t.clone(),
            1 => u,
            _ => Transform::from_matrix(TransformKind::Homography, &t.matrix().unwrap()).unwrap(),
        };
        let ce = corner_error(&t, &other, (32, 32)).unwrap();
        let corners = [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)];
        let same = corners.iter().all(|&c| t.apply(c) == other.apply(c));
        prop_assert_eq!(ce == 0.0, same);
        prop_assert!(ce >= 0.0);
    }

    #[test]
    fn cmc_is_monotone_and_shift_invariant(
        q in prop::collection::vec(-8i32..8, 3 * 4),
        g in prop::collection::vec(-8i32..8, 3 * 10),
        qid in prop::collection::vec(0i64..3, 4),
        gid in prop::collection::vec(0i64..3, 10),
        gcam in prop::collection::vec(1i64..3, 10),
        shift in prop::collection::vec(-12i32..12, 3),
    ) {
        prop_assume!(qid.iter().any(|i| gid.contains(i)));
        let t = |v: &[i32], n: usize, s: &[f64]| {
            Tensor::from_vec(&[n, 3], v.iter().enumerate().map(|(k, &x)| x as f64 / 8.0 + s[k % 3]).collect()).unwrap()
        };
        let zero = [0.0; 3];
        let s: Vec<f64> = shift.iter().map(|&x| x as f64 / 4.0).collect();
        let qcam = vec![0i64; 4];
        let a = cmc_map(&t(&q, 4, &zero), &t(&g, 10, &zero), &qid, &gid, &qcam, &gcam).unwrap();
        let b = cmc_map(&t(&q, 4, &s), &t(&g, 10, &s), &qid, &gid, &qcam, &gcam).unwrap();
        prop_assert!(a.r1 <= a.r5 && a.r5 <= a.r10);
        for v in [a.r1, a.r5, a.r10, a.map] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn synthetic_data_contract(seed in 0u64..1000) {
        let pair = synth_pair(&SyntheticDomainSpec {
            size: (12, 12),
            n_identities: 3,
            n_views: 2,
            seed,
            ..SyntheticDomainSpec::default()
        })
        .unwrap();
        for b in [&pair.x.items, &pair.y.items] {
            prop_assert!(b.values.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            prop_assert!(b.mask.data().iter().all(|&m| m == 0.0 || m == 1.0));
        }
        for t in &pair.gt {
            prop_assert!(invert(t).is_ok());
        }
        prop_assert!(pair.gains.iter().all(|&g| g > 0.0));
    }
}

fn tiny_net() -> NetConfig {
    NetConfig {
        size: (8, 8),
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
    }
}

fn tiny_cfg(steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 2,
        critic_steps_per_gen: 2,
        eval_every: 2,
        net: tiny_net(),
        ..TrainConfig::default()
    }
}

fn tiny_pair() -> SyntheticPair {
    synth_pair(&SyntheticDomainSpec {
        size: (8, 8),
        n_identities: 3,
        n_views: 2,
        seed: 5,
        ..SyntheticDomainSpec::default()
    })
    .unwrap()
}

fn trained(steps: u64) -> (TrainConfig, SyntheticPair, TrainState) {
    let cfg = tiny_cfg(steps);
    let pair = tiny_pair();
    let data = TrainData {
        x: &pair.x,
        y: &pair.y,
        gt: Some(&pair.gt),
    };
    let out = train(&cfg, &data, &RunOutput::default(), None).unwrap();
    (cfg, pair, out.state)
}

#[test]
fn untrained_cycle_is_the_identity_warp() {
    let pair = tiny_pair();
    let models = Models::new(&tiny_net(), 3).unwrap();
    let _g = no_grad();
    let b = models.bind_frozen();
    let code = SpatialCode::sample(pair.x.len(), 2, 11);
    let c = forward_cycle_x(&models, &b, &pair.x.items, &code).unwrap();
    assert_eq!(c.x_s.value().data(), pair.x.items.values.data());
    let s = scl(&c.t_xy, &c.t_yx, TransformKind::Homography)
        .unwrap()
        .item();
    assert_eq!(s, 0.0);
}

#[test]
fn training_alternates_critic_and_generator_updates() {
    let (cfg, _, state) = trained(3);
    assert_eq!(state.gen_updates, 3);
    assert_eq!(state.critic_updates, 3 * cfg.critic_steps_per_gen as u64);
}

#[test]
fn log_has_one_finite_row_per_step() {
    let cfg = tiny_cfg(4);
    let pair = tiny_pair();
    let data = TrainData {
        x: &pair.x,
        y: &pair.y,
        gt: Some(&pair.gt),
    };
    let out = train(&cfg, &data, &RunOutput::default(), None).unwrap();
    assert_eq!(out.log.len(), 4);
    let w = &cfg.weights;
    for row in &out.log {
        assert!(row.report.all_finite());
        assert!((row.report.cyc - (row.report.scl + w.lambda_pcl * row.report.pcl)).abs() < 1e-6);
    }
    assert_eq!(
        out.log.iter().filter(|r| r.corner_error.is_some()).count(),
        2
    );
}

#[test]
fn single_code_adaptation_matches_the_forward_cycle() {
    let (cfg, pair, state) = trained(2);
    let m = &state.models;
    let x = &pair.x.items;
    let one = adapt(m, x, 1, 9).unwrap().remove(0);
    let _g = no_grad();
    let code = adapt_code(m, x.len(), 9, 0);
    let c = forward_cycle_x(m, &m.bind_frozen(), x, &code).unwrap();
    assert_eq!(one.values.data(), c.x_adp.value().data());
    let a = adapt(m, x, 3, cfg.seed).unwrap();
    let b = adapt(m, x, 3, cfg.seed).unwrap();
    assert_eq!(a, b);
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let (cfg, pair, full) = trained(6);
    let data = TrainData {
        x: &pair.x,
        y: &pair.y,
        gt: Some(&pair.gt),
    };
    let part = train(&tiny_cfg(3), &data, &RunOutput::default(), None).unwrap();
    let bytes = Checkpoint::from_state(&part.state, "").to_bytes();
    let restored = Checkpoint::from_bytes(&bytes)
        .unwrap()
        .to_state(&cfg)
        .unwrap();
    let resumed = train(&cfg, &data, &RunOutput::default(), Some(restored)).unwrap();
    assert_eq!(resumed.state, full);
}

/// Swapping the domains together with the two halves of the model mirrors
/// every generator term.
#[test]
fn mirrored_directions_compute_the_same_losses() {
    let (mut cfg, pair, state) = trained(2);
    cfg.transform_critic = false;
    let m = &state.models;
    let mut swapped = m.clone();
    std::mem::swap(&mut swapped.s1, &mut swapped.s2);
    std::mem::swap(&mut swapped.g1, &mut swapped.g2);
    std::mem::swap(&mut swapped.d1, &mut swapped.d2);
    let (x, y) = (&pair.x.items.select(&[0, 1]), &pair.y.items.select(&[2, 3]));
    let cx = step_code(&cfg, 2, 0, 0);
    let cy = step_code(&cfg, 2, 0, 1);
    let _g = no_grad();
    let a = generator_objective(m, &m.bind_frozen(), x, y, &cx, &cy, &cfg)
        .unwrap()
        .report;
    let b = generator_objective(&swapped, &swapped.bind_frozen(), y, x, &cy, &cx, &cfg)
        .unwrap()
        .report;
    assert_eq!(a, b);
}

#[test]
fn naive_cycle_reconstructs_through_both_generators() {
    let (mut cfg, pair, state) = trained(2);
    cfg.disentangled = false;
    cfg.transform_critic = false;
    cfg.weights.lambda_siam = 0.0;
    let m = &state.models;
    let (x, y) = (&pair.x.items.select(&[0, 1]), &pair.y.items.select(&[0, 1]));
    let cx = step_code(&cfg, 2, 0, 0);
    let cy = step_code(&cfg, 2, 0, 1);
    let _g = no_grad();
    let b = m.bind_frozen();
    let obj = generator_objective(m, &b, x, y, &cx, &cy, &cfg).unwrap();
    assert_eq!(obj.report.scl, 0.0);
    let naive = |c: &CycleArtifacts, g: &Generator, pg: &Bound, src: &ImageBatch| {
        let back = apply_transform(&c.x_adp, &c.mask_s, &c.t_yx, TransformKind::Homography);
        let rec = g.forward(pg, &back.warped).unwrap();
        let d = ops::abs(&ops::sub(&rec, &Var::constant(src.values.clone())));
        ops::mean(&d).item()
    };
    let want = naive(&obj.x_cycle, &m.g2, &b.g2, x) + naive(&obj.y_cycle, &m.g1, &b.g1, y);
    assert!((obj.report.pcl - want).abs() < 1e-12);
    assert!((obj.report.cyc - cfg.weights.lambda_pcl * want).abs() < 1e-12);
}

#[test]
fn untrained_corner_error_equals_gt_displacement() {
    let id = Transform::identity(TransformKind::Homography);
    assert_eq!(corner_error(&id, &id, (32, 32)).unwrap(), 0.0);
    let t = Transform::translation_px(TransformKind::Homography, 4.0, 0.0, (32, 32)).unwrap();
    assert!((corner_error(&id, &t, (32, 32)).unwrap() - 4.0).abs() < 1e-12);
    assert!((pixel_to_norm(31, 32) - 1.0).abs() < 1e-15);
}
