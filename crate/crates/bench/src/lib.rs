//! Shared inputs for the kernel benchmarks in `benches/`.

use geoadapt_core::geometry::TransformKind;
use geoadapt_core::Tensor;
use rand::Rng;

/// Uniform values in `[-1, 1)` from a fixed stream.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = geoadapt_core::seeded_rng(seed, 0);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("shape matches data")
}

/// A batch of mild homographies, `[n, 8]`.
pub fn homography_params(n: usize, seed: u64) -> Tensor {
    let mut rng = geoadapt_core::seeded_rng(seed, 1);
    let id = TransformKind::Homography.identity_params();
    let data = (0..n)
        .flat_map(|_| {
            id.iter()
                .map(|v| v + rng.random_range(-0.05..0.05))
                .collect::<Vec<_>>()
        })
        .collect();
    Tensor::from_vec(&[n, 8], data).expect("shape matches data")
}
