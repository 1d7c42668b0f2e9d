//! Unsupervised geometric domain adaptation for person re-identification:
//! differentiable transforms and warping, the adaptation networks and losses,
//! synthetic data with ground-truth geometry, training and evaluation.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod networks;
pub mod nn;
pub mod ops;
pub mod tensor;
pub mod training;

pub use autograd::{grad, no_grad, Var};
pub use config::{DataSource, RunConfig};
pub use data::{Dataset, ImageBatch, SyntheticDomainSpec, SyntheticPair};
pub use error::{Error, Result};
pub use geometry::{SamplingGrid, Transform, TransformKind};
pub use tensor::Tensor;

use rand::SeedableRng;

/// Independent deterministic random stream `stream` of `seed`.
pub fn seeded_rng(seed: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
