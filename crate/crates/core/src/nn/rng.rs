//! Seeded random streams.
//!
//! Every source of randomness in a run draws from its own ChaCha20 stream,
//! keyed by `(seed, substream, index)`. Streams never share state, so turning
//! dropout on or off leaves the latent and weight noise sequences untouched.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;

/// Named noise sources.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Substream {
    Init = 1,
    DataShuffle = 2,
    LatentNoise = 3,
    WeightNoise = 4,
    Dropout = 5,
    Split = 6,
    CertificateNoise = 7,
    Evaluation = 8,
}

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    substream: Substream,
    index: u64,
    rng: ChaCha20Rng,
}

impl RngStream {
    pub fn new(seed: u64, substream: Substream) -> Self {
        Self::indexed(seed, substream, 0)
    }

    /// Stream number `index` of a substream, e.g. one per epoch.
    pub fn indexed(seed: u64, substream: Substream, index: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        // 16 bits of substream id, 48 bits of index.
        rng.set_stream(((substream as u64) << 48) | (index & ((1 << 48) - 1)));
        Self {
            seed,
            substream,
            index,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn substream(&self) -> Substream {
        self.substream
    }

    pub fn index(&self) -> u64 {
        self.index
    }

    pub fn gaussian(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn fill_gaussian(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.rng.sample(StandardNormal);
        }
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.rng);
    }

    /// A fresh 64-bit seed drawn from this stream.
    pub fn next_seed(&mut self) -> u64 {
        self.rng.next_u64()
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}

/// I.i.d. standard normal tensor.
pub fn gaussian_sample(rng: &mut RngStream, shape: Vec<usize>) -> Tensor {
    let mut t = Tensor::zeros(shape);
    rng.fill_gaussian(t.data_mut());
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let a = gaussian_sample(&mut RngStream::new(7, Substream::LatentNoise), vec![4, 5]);
        let b = gaussian_sample(&mut RngStream::new(7, Substream::LatentNoise), vec![4, 5]);
        assert_eq!(a, b);
    }

    #[test]
    fn substreams_differ() {
        let mut a = RngStream::new(7, Substream::LatentNoise);
        let mut b = RngStream::new(7, Substream::WeightNoise);
        let mut c = RngStream::indexed(7, Substream::LatentNoise, 1);
        let (x, y, z) = (a.next_u64(), b.next_u64(), c.next_u64());
        assert_ne!(x, y);
        assert_ne!(x, z);
    }

    #[test]
    fn draws_on_one_stream_do_not_shift_another() {
        let mut latent = RngStream::new(3, Substream::LatentNoise);
        let first = latent.gaussian();

        let mut dropout = RngStream::new(3, Substream::Dropout);
        for _ in 0..1000 {
            dropout.uniform();
        }
        let mut latent_again = RngStream::new(3, Substream::LatentNoise);
        assert_eq!(first, latent_again.gaussian());
    }

    #[test]
    fn moments_of_a_million_draws() {
        let t = gaussian_sample(&mut RngStream::new(11, Substream::Evaluation), vec![1_000_000]);
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "variance {var}");
    }
}
