//! Retrieval metrics, synthetic homography recovery, identity preservation
//! and the multi-code sweep.

use std::path::Path;

use crate::autograd::{grad_tensors, no_grad, Var};
use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::geometry::{corner_error, Transform};
use crate::networks::{stm_forward, Models};
use crate::nn::{Adam, Linear, ParamSet};
use crate::ops;
use crate::seeded_rng;
use crate::tensor::Tensor;
use crate::training::{adapt, adapt_code};

/// Ranked retrieval outcome over the evaluated queries.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    /// Gallery indices per evaluated query, nearest first, after exclusion.
    pub ranked: Vec<Vec<usize>>,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub map: f64,
    /// Queries without any valid gallery match.
    pub excluded: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Single-query CMC and mAP with Euclidean ranking. Gallery entries sharing
/// both identity and camera with the query are ignored.
pub fn cmc_map(
    query_emb: &Tensor,
    gallery_emb: &Tensor,
    query_ids: &[i64],
    gallery_ids: &[i64],
    query_cams: &[i64],
    gallery_cams: &[i64],
) -> Result<RetrievalResult> {
    let (nq, ng) = (query_ids.len(), gallery_ids.len());
    if nq == 0 || ng == 0 {
        return Err(Error::EmptyBatch("retrieval query or gallery"));
    }
    if query_emb.ndim() != 2
        || gallery_emb.ndim() != 2
        || query_emb.shape()[0] != nq
        || gallery_emb.shape()[0] != ng
        || query_emb.shape()[1] != gallery_emb.shape()[1]
        || query_cams.len() != nq
        || gallery_cams.len() != ng
    {
        return Err(Error::Shape("retrieval inputs disagree in size".into()));
    }
    let d = query_emb.shape()[1];
    let mut ranked = Vec::new();
    let mut first_hit = Vec::new();
    let mut ap_sum = 0.0;
    let mut excluded = 0;
    for q in 0..nq {
        let qe = &query_emb.data()[q * d..(q + 1) * d];
        let mut cand: Vec<(f64, usize)> = (0..ng)
            .filter(|&g| !(gallery_ids[g] == query_ids[q] && gallery_cams[g] == query_cams[q]))
            .map(|g| (sq_dist(qe, &gallery_emb.data()[g * d..(g + 1) * d]), g))
            .collect();
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let hits: Vec<bool> = cand
            .iter()
            .map(|&(_, g)| gallery_ids[g] == query_ids[q])
            .collect();
        let n_rel = hits.iter().filter(|&&h| h).count();
        if n_rel == 0 {
            excluded += 1;
            continue;
        }
        let mut found = 0;
        let mut ap = 0.0;
        for (k, &h) in hits.iter().enumerate() {
            if h {
                found += 1;
                ap += found as f64 / (k + 1) as f64;
            }
        }
        ap_sum += ap / n_rel as f64;
        first_hit.push(hits.iter().position(|&h| h).expect("has a hit"));
        ranked.push(cand.into_iter().map(|(_, g)| g).collect());
    }
    if first_hit.is_empty() {
        return Err(Error::InvalidArgument(
            "no query has a valid gallery match".into(),
        ));
    }
    let n = first_hit.len() as f64;
    let cmc = |k: usize| first_hit.iter().filter(|&&r| r < k).count() as f64 / n;
    Ok(RetrievalResult {
        ranked,
        r1: cmc(1),
        r5: cmc(5),
        r10: cmc(10),
        map: ap_sum / n,
        excluded,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CornerErrorStats {
    pub mean: f64,
    pub median: f64,
    pub per_item: Vec<f64>,
}

/// S1's transforms on `x` (fixed code from `seed`) against ground truth.
pub fn mean_corner_error(
    models: &Models,
    x: &ImageBatch,
    gt: &[Transform],
    seed: u64,
) -> Result<CornerErrorStats> {
    let params = predict_params(models, x, seed, 0)?;
    corner_stats(&params, gt, models, x.size())
}

/// Same as [`mean_corner_error`].
pub fn homography_recovery_eval(
    models: &Models,
    x: &ImageBatch,
    gt: &[Transform],
    seed: u64,
) -> Result<CornerErrorStats> {
    mean_corner_error(models, x, gt, seed)
}

/// S1's transform parameters `[n, p]` under adaptation code `k`.
pub fn predict_params(models: &Models, x: &ImageBatch, seed: u64, k: u64) -> Result<Tensor> {
    let _g = no_grad();
    let b = models.bind_frozen();
    let code = adapt_code(models, x.len(), seed, k);
    let s = stm_forward(
        &models.s1,
        &b.s1,
        &Var::constant(x.values.clone()),
        &Var::constant(x.mask.clone()),
        &code,
    )?;
    Ok(s.params.value().clone())
}

/// Corner errors of each row of `params` against `gt`.
pub fn corner_stats(
    params: &Tensor,
    gt: &[Transform],
    models: &Models,
    size: (usize, usize),
) -> Result<CornerErrorStats> {
    let p = models.cfg.kind.param_len();
    if params.shape() != [gt.len(), p] || gt.is_empty() {
        return Err(Error::Shape(format!(
            "{} ground-truth transforms for params {:?}",
            gt.len(),
            params.shape()
        )));
    }
    let per_item = gt
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let t = Transform::new(models.cfg.kind, &params.data()[i * p..(i + 1) * p])?;
            corner_error(&t, g, size)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sorted = per_item.clone();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    let median = if m % 2 == 1 {
        sorted[m / 2]
    } else {
        0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
    };
    Ok(CornerErrorStats {
        mean: per_item.iter().sum::<f64>() / m as f64,
        median,
        per_item,
    })
}

fn embed(models: &Models, x: &Tensor) -> Result<Tensor> {
    let _g = no_grad();
    let b = models.bind_frozen();
    Ok(models
        .siam
        .embed(&b.siam, &Var::constant(x.clone()))?
        .value()
        .clone())
}

fn mean_row_dist(a: &Tensor, b: &Tensor) -> f64 {
    let (n, d) = (a.shape()[0], a.shape()[1]);
    (0..n)
        .map(|i| sq_dist(&a.data()[i * d..(i + 1) * d], &b.data()[i * d..(i + 1) * d]).sqrt())
        .sum::<f64>()
        / n as f64
}

/// Mean Siamese distance of `(x, adapted x)` pairs and of `(x, y)` pairs.
pub fn identity_preservation(
    models: &Models,
    x: &ImageBatch,
    y: &ImageBatch,
    seed: u64,
) -> Result<(f64, f64)> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::Shape(
            "identity preservation needs equally sized batches".into(),
        ));
    }
    let adapted = adapt(models, x, 1, seed)?.remove(0);
    let ex = embed(models, &x.values)?;
    let pos = mean_row_dist(&ex, &embed(models, &adapted.values)?);
    let neg = mean_row_dist(&ex, &embed(models, &y.values)?);
    Ok((pos, neg))
}

/// Input representation of the toy retrieval model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureSource {
    /// Frozen Siamese embeddings.
    Siamese,
    /// Raw pixels.
    Pixels,
}

/// Toy identity classifier trained on source images; its hidden layer is the
/// retrieval descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyRetrievalConfig {
    pub features: FeatureSource,
    pub hidden: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ToyRetrievalConfig {
    fn default() -> Self {
        Self {
            features: FeatureSource::Siamese,
            hidden: 32,
            steps: 300,
            lr: 1e-2,
            seed: 0,
        }
    }
}

fn features(models: &Models, x: &Tensor, src: FeatureSource) -> Result<Tensor> {
    match src {
        FeatureSource::Siamese => embed(models, x),
        FeatureSource::Pixels => {
            let n = x.shape()[0];
            x.clone().reshape(&[n, x.len() / n])
        }
    }
}

/// Trains the toy classifier on `train` and evaluates retrieval on `target`:
/// camera-0 items are queries, all other items form the gallery.
pub fn toy_retrieval(
    models: &Models,
    train: &ImageBatch,
    target: &ImageBatch,
    cfg: &ToyRetrievalConfig,
) -> Result<RetrievalResult> {
    let mut classes: Vec<i64> = train.identity.clone();
    classes.sort_unstable();
    classes.dedup();
    let labels: Vec<usize> = train
        .identity
        .iter()
        .map(|id| classes.binary_search(id).expect("known class"))
        .collect();
    let f = features(models, &train.values, cfg.features)?;
    let (n, d) = (f.shape()[0], f.shape()[1]);
    // standardize with training statistics
    let mut mu = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for i in 0..n {
        for k in 0..d {
            mu[k] += f.data()[i * d + k] / n as f64;
        }
    }
    for i in 0..n {
        for k in 0..d {
            sd[k] += (f.data()[i * d + k] - mu[k]).powi(2) / n as f64;
        }
    }
    let sd: Vec<f64> = sd.iter().map(|v| v.sqrt().max(1e-6)).collect();
    let norm = |t: &Tensor| {
        let m = t.shape()[0];
        let data = (0..m * d)
            .map(|j| (t.data()[j] - mu[j % d]) / sd[j % d])
            .collect();
        Tensor::new(&[m, d], data)
    };
    let fx = Var::constant(norm(&f));
    let mut rng = seeded_rng(cfg.seed, 0);
    let mut ps = ParamSet::new();
    let l0 = Linear::new(&mut ps, "toy.l0", &mut rng, (d, cfg.hidden));
    let l1 = Linear::new(&mut ps, "toy.l1", &mut rng, (cfg.hidden, classes.len()));
    let mut onehot = Tensor::zeros(&[n, classes.len()]);
    for (i, &l) in labels.iter().enumerate() {
        onehot.data_mut()[i * classes.len() + l] = 1.0;
    }
    let mut opt = Adam::new(&ps, cfg.lr, 0.9, 0.999);
    for _ in 0..cfg.steps {
        let b = ps.bind(true);
        let h = ops::leaky_relu(&l0.forward(&b, &fx), 0.2);
        let logp = ops::log_softmax(&l1.forward(&b, &h));
        let loss = ops::scale(&ops::sum(&ops::mul_const(&logp, &onehot)), -1.0 / n as f64);
        let g = grad_tensors(&loss, b.vars());
        opt.step(&mut ps, &g);
    }
    let b = ps.bind(false);
    let ft = Var::constant(norm(&features(models, &target.values, cfg.features)?));
    let desc = ops::leaky_relu(&l0.forward(&b, &ft), 0.2).value().clone();
    let q: Vec<usize> = (0..target.len())
        .filter(|&i| target.camera[i] == 0)
        .collect();
    let g: Vec<usize> = (0..target.len())
        .filter(|&i| target.camera[i] != 0)
        .collect();
    let pick = |idx: &[usize], v: &[i64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
    cmc_map(
        &desc.select_outer(&q),
        &desc.select_outer(&g),
        &pick(&q, &target.identity),
        &pick(&g, &target.identity),
        &pick(&q, &target.camera),
        &pick(&g, &target.camera),
    )
}

/// Retrieval with the toy model trained on raw source images (`m = 0`) or
/// on `m` adapted copies of them.
pub fn retrieval_with_adaptation(
    models: &Models,
    source: &ImageBatch,
    target: &ImageBatch,
    m: usize,
    cfg: &ToyRetrievalConfig,
) -> Result<RetrievalResult> {
    let train = if m == 0 {
        source.clone()
    } else {
        ImageBatch::concat(&adapt(models, source, m, cfg.seed)?)?
    };
    toy_retrieval(models, &train, target, cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub m: usize,
    pub result: RetrievalResult,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MSweep {
    pub rows: Vec<SweepRow>,
    /// Spearman correlation between `m` and R-1 (`None` with fewer than two
    /// distinct values).
    pub spearman: Option<f64>,
}

pub fn m_sweep(
    models: &Models,
    source: &ImageBatch,
    target: &ImageBatch,
    m_values: &[usize],
    cfg: &ToyRetrievalConfig,
) -> Result<MSweep> {
    if m_values.is_empty() || m_values.contains(&0) {
        return Err(Error::InvalidArgument("M values must be positive".into()));
    }
    let rows = m_values
        .iter()
        .map(|&m| {
            Ok(SweepRow {
                m,
                result: retrieval_with_adaptation(models, source, target, m, cfg)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ms: Vec<f64> = rows.iter().map(|r| r.m as f64).collect();
    let r1: Vec<f64> = rows.iter().map(|r| r.result.r1).collect();
    Ok(MSweep {
        spearman: spearman(&ms, &r1),
        rows,
    })
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

/// Writes `Method,R-1,R-5,R-10,mAP` rows.
pub fn write_metrics_csv(path: &Path, rows: &[(String, RetrievalResult)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["Method", "R-1", "R-5", "R-10", "mAP"])?;
    for (name, r) in rows {
        w.write_record([
            name.clone(),
            format!("{:.4}", r.r1),
            format!("{:.4}", r.r5),
            format!("{:.4}", r.r10),
            format!("{:.4}", r.map),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Line plot of R-1 against M.
pub fn plot_m_sweep(path: &Path, sweep: &MSweep) -> Result<()> {
    use plotters::prelude::*;
    let max_m = sweep.rows.iter().map(|r| r.m).max().unwrap_or(1) as f64;
    let (w, h) = (480u32, 320u32);
    let mut buf = vec![0u8; (w * h * 3) as usize];
    let mut draw = || -> std::result::Result<(), Box<dyn std::error::Error>> {
        let root = BitMapBackend::with_buffer(&mut buf, (w, h)).into_drawing_area();
        root.fill(&WHITE)?;
        let mut chart = ChartBuilder::on(&root)
            .margin(20)
            .build_cartesian_2d(0.0..max_m + 1.0, 0.0..1.0)?;
        chart.draw_series(LineSeries::new(
            sweep.rows.iter().map(|r| (r.m as f64, r.result.r1)),
            &BLUE,
        ))?;
        chart.draw_series(
            sweep
                .rows
                .iter()
                .map(|r| Circle::new((r.m as f64, r.result.r1), 4, BLUE.filled())),
        )?;
        root.present()?;
        Ok(())
    };
    draw().map_err(|e| Error::InvalidArgument(format!("plot failed: {e}")))?;
    let img = image::RgbImage::from_raw(w, h, buf).expect("buffer sized for the image");
    crate::data::save_png(&img, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        let d = rows[0].len();
        Tensor::new(
            &[rows.len(), d],
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
        )
    }

    #[test]
    fn exact_duplicate_ranks_first() {
        let q = t(&[&[0.0, 0.0]]);
        let mut g: Vec<Vec<f64>> = vec![vec![0.0, 0.0]];
        for k in 1..10 {
            g.push(vec![k as f64, 1.0]);
        }
        let gt = t(&g.iter().map(|r| r.as_slice()).collect::<Vec<_>>());
        let gids: Vec<i64> = (0..10).map(|k| if k == 0 { 7 } else { 100 + k }).collect();
        let r = cmc_map(&q, &gt, &[7], &gids, &[0], &[1; 10]).unwrap();
        assert_eq!((r.r1, r.map), (1.0, 1.0));
    }

    #[test]
    fn forced_rank_two() {
        let q = t(&[&[0.0]]);
        let g: Vec<Vec<f64>> = (0..10).map(|k| vec![k as f64 + 1.0]).collect();
        let gt = t(&g.iter().map(|r| r.as_slice()).collect::<Vec<_>>());
        let gids: Vec<i64> = (0..10).map(|k| if k == 1 { 3 } else { 50 + k }).collect();
        let r = cmc_map(&q, &gt, &[3], &gids, &[0], &[1; 10]).unwrap();
        assert_eq!(r.r1, 0.0);
        assert_eq!(r.r5, 1.0);
        assert_eq!(r.map, 0.5);
    }

    #[test]
    fn same_camera_matches_are_ignored() {
        let q = t(&[&[0.0], &[5.0]]);
        let g = t(&[&[0.0], &[1.0]]);
        // query 0 only matches in its own camera: excluded
        let r = cmc_map(&q, &g, &[1, 2], &[1, 2], &[0, 0], &[0, 1]).unwrap();
        assert_eq!(r.excluded, 1);
        assert_eq!(r.ranked.len(), 1);
        assert!(cmc_map(&t(&[&[0.0]]), &g, &[1], &[1, 2], &[0], &[0, 1]).is_err());
    }

    #[test]
    fn spearman_cases() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[0.1, 0.2, 0.3]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[0.3, 0.2, 0.1]), Some(-1.0));
        assert_eq!(spearman(&[1.0], &[0.3]), None);
        assert_eq!(spearman(&[1.0, 2.0], &[0.3, 0.3]), None);
    }
}
