//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use pbvae::data::{write_idx, IdxArray, IDX_IMAGES_MAGIC};
use pbvae::harness::ExperimentConfig;
use pbvae::nn::{mlp_forward, Dropout, Tensor};
use pbvae::vae::{VaeModel, LOG_SIGMA_RANGE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
/// Gradient magnitudes below this are compared in absolute terms.
pub const FD_FLOOR: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn normal(r: &mut ChaCha20Rng) -> f64 {
    r.sample(StandardNormal)
}

pub fn normals(r: &mut ChaCha20Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(r)).collect()
}

pub fn binary_tensor(r: &mut ChaCha20Rng, rows: usize, cols: usize, p: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| if r.gen::<f64>() < p { 1.0 } else { 0.0 }).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

#[derive(Debug, Default, Clone, Copy)]
pub struct FdOutcome {
    pub checked: usize,
    pub skipped: usize,
    pub worst: f64,
}

impl FdOutcome {
    pub fn merge(&mut self, other: FdOutcome) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        self.worst = self.worst.max(other.worst);
    }
}

/// Central differences of `f` at `x` against `analytic`. A coordinate is
/// skipped when either probe changes `pattern` (a kink lies within `h`).
pub fn fd_check(
    f: impl Fn(&[f64]) -> f64,
    pattern: impl Fn(&[f64]) -> Vec<bool>,
    x: &[f64],
    analytic: &[f64],
    label: &str,
) -> FdOutcome {
    assert_eq!(x.len(), analytic.len(), "{label}: gradient length");
    let base = pattern(x);
    let mut out = FdOutcome::default();
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + FD_STEP;
        let (fp, pp) = (f(&probe), pattern(&probe));
        probe[i] = x[i] - FD_STEP;
        let (fm, pm) = (f(&probe), pattern(&probe));
        probe[i] = x[i];
        if pp != base || pm != base {
            out.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * FD_STEP);
        let e = rel_err(analytic[i], numeric);
        assert!(
            e <= FD_REL_TOL,
            "{label}[{i}]: analytic {} vs numeric {numeric} (relative error {e:.3e})",
            analytic[i]
        );
        out.checked += 1;
        out.worst = out.worst.max(e);
    }
    out
}

/// ReLU signs, `log σ` clipping and decoder clamping for a forward pass
/// with the given latent noise.
pub fn vae_pattern(model: &VaeModel, x: &Tensor, latent: &[Tensor], p_min: f64) -> Vec<bool> {
    let d = model.latent_dim();
    let (enc, cache) = mlp_forward(model.encoder_config(), model.phi(), x, Dropout::Off).unwrap();
    let mut pat = cache.relu_pattern();
    let (lo, hi) = LOG_SIGMA_RANGE;
    let mut mu = Vec::new();
    let mut sigma = Vec::new();
    for i in 0..x.rows() {
        let row = enc.row(i);
        mu.extend_from_slice(&row[..d]);
        for &ls in &row[d..] {
            pat.push(ls < lo || ls > hi);
            sigma.push(ls.clamp(lo, hi).exp());
        }
    }
    for eps in latent {
        let z: Vec<f64> = (0..mu.len()).map(|j| mu[j] + sigma[j] * eps.data()[j]).collect();
        let z = Tensor::matrix(x.rows(), d, z).unwrap();
        let (y, cache) = mlp_forward(model.decoder_config(), model.theta(), &z, Dropout::Off).unwrap();
        pat.extend(cache.relu_pattern());
        pat.extend(y.data().iter().map(|&v| v < p_min || v > 1.0 - p_min));
    }
    pat
}

/// Blocky 8×8 greyscale images: a few filled rectangles per image.
pub fn synthetic_images(count: usize, seed: u64) -> IdxArray {
    let (h, w) = (8, 8);
    let mut r = rng(seed);
    let mut data = vec![0u8; count * h * w];
    for img in data.chunks_mut(h * w) {
        for _ in 0..r.gen_range(1..=3) {
            let (y0, x0) = (r.gen_range(0..h), r.gen_range(0..w));
            let (y1, x1) = (r.gen_range(y0..h), r.gen_range(x0..w));
            let shade = r.gen_range(100..=255) as u8;
            for y in y0..=y1 {
                for x in x0..=x1 {
                    img[y * w + x] = shade;
                }
            }
        }
    }
    IdxArray {
        magic: IDX_IMAGES_MAGIC,
        dims: vec![count, h, w],
        data,
    }
}

/// Writes synthetic train/test IDX files into `dir` and returns a small,
/// fast configuration that uses them.
pub fn tiny_experiment(dir: &Path) -> ExperimentConfig {
    let train = dir.join("train-images.idx");
    let test = dir.join("test-images.idx");
    std::fs::create_dir_all(dir).unwrap();
    write_idx(&train, &synthetic_images(240, 1)).unwrap();
    write_idx(&test, &synthetic_images(80, 2)).unwrap();
    let text = format!(
        r#"
[data]
train_images = "{}"
test_images = "{}"
prior_fraction = 0.5

[model]
input_dim = 64
hidden_widths = [16]
latent_dim = 2

[prior]
epochs = 3

[train]
epochs = 3
batch_size = 20
sigma_phi = 0.05
sigma_theta = 0.05
"#,
        file_name(&train),
        file_name(&test)
    );
    ExperimentConfig::from_toml_str(&text, dir).unwrap()
}

fn file_name(p: &Path) -> String {
    p.file_name().unwrap().to_string_lossy().into_owned()
}

/// MNIST directory: `$PBVAE_MNIST_DIR`, else `<workspace>/data/mnist`.
pub fn mnist_dir() -> PathBuf {
    std::env::var_os("PBVAE_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}
