//! Shared fixtures for the kernel benchmarks.

use pbvae::nn::{InitScheme, RngStream, Substream, Tensor};
use pbvae::pacbayes::{PosteriorScale, WeightPrior};
use pbvae::vae::{VaeArchitecture, VaeModel};

/// Desk-scale model (784 → 128 → 8), its prior and initial scales.
pub fn desk_model() -> (VaeModel, WeightPrior, PosteriorScale) {
    let arch = VaeArchitecture::new(784, 8, vec![128]).expect("valid architecture");
    let model = VaeModel::init(arch, InitScheme::ClampedNormal, &mut RngStream::new(0, Substream::Init))
        .expect("initialised model");
    let prior = WeightPrior::centred_at(&model, 0.01, 0.01).expect("prior layout");
    let scales = PosteriorScale::initial(&prior);
    (model, prior, scales)
}

/// A batch of pseudo-random binary images.
pub fn binary_batch(rows: usize, dim: usize, seed: u64) -> Tensor {
    let mut rng = RngStream::new(seed, Substream::Evaluation);
    let data = (0..rows * dim)
        .map(|_| if rng.uniform() < 0.2 { 1.0 } else { 0.0 })
        .collect();
    Tensor::matrix(rows, dim, data).expect("matching size")
}
