//! Gaussian-encoder / clamped-Bernoulli-decoder VAE.
//!
//! The encoder maps `x ∈ {0,1}^D` to `(μ, log σ) ∈ R^{2d}`; the decoder maps a
//! latent `z` through a sigmoid output layer whose values are clamped to
//! `[p_min, 1 − p_min]`. The clamp is what makes the rescaled reconstruction
//! loss bounded in `[0, 1]`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{minibatches, ImageDataset};
use crate::error::{Error, Result};
use crate::nn::{
    init_params, mlp_backward, mlp_backward_params, mlp_forward, AdamConfig, AdamState, Dropout,
    InitScheme, MlpConfig, OutputActivation, ParamVector, RngStream, Substream, Tensor,
};

/// Encoder `log σ` outputs are clipped to this range before exponentiation.
pub const LOG_SIGMA_RANGE: (f64, f64) = (-30.0, 10.0);

/// Default decoder clamp.
pub const DEFAULT_P_MIN: f64 = 5e-3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VaeArchitecture {
    pub input_dim: usize,
    pub latent_dim: usize,
    /// Encoder hidden widths; the decoder uses them in reverse order.
    pub hidden_widths: Vec<usize>,
}

impl VaeArchitecture {
    pub fn new(input_dim: usize, latent_dim: usize, hidden_widths: Vec<usize>) -> Result<Self> {
        let arch = Self {
            input_dim,
            latent_dim,
            hidden_widths,
        };
        arch.encoder_config()?;
        arch.decoder_config()?;
        Ok(arch)
    }

    pub fn encoder_config(&self) -> Result<MlpConfig> {
        MlpConfig::new(
            self.input_dim,
            self.hidden_widths.clone(),
            2 * self.latent_dim,
            OutputActivation::Identity,
        )
    }

    pub fn decoder_config(&self) -> Result<MlpConfig> {
        let mut widths = self.hidden_widths.clone();
        widths.reverse();
        MlpConfig::new(self.latent_dim, widths, self.input_dim, OutputActivation::Sigmoid)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub p_min: f64,
    /// Latent draws per datapoint.
    pub mc_samples: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            p_min: DEFAULT_P_MIN,
            mc_samples: 1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_min > 0.0 && self.p_min < 0.5) {
            return Err(Error::Config(format!("p_min {} outside (0, 0.5)", self.p_min)));
        }
        if self.mc_samples == 0 {
            return Err(Error::Config("mc_samples must be at least 1".into()));
        }
        Ok(())
    }

    /// `D · log(1/p_min)`: the negative log-likelihood of a fully wrong,
    /// clamp-saturated reconstruction. Dividing by it maps NLL into `[0, 1]`.
    pub fn rescale_constant(&self, input_dim: usize) -> f64 {
        input_dim as f64 * (1.0 / self.p_min).ln()
    }
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub mu: Tensor,
    /// Clipped to [`LOG_SIGMA_RANGE`].
    pub log_sigma: Tensor,
}

#[derive(Debug, Clone)]
pub struct LatentSample {
    pub z: Tensor,
    /// Standard-normal noise used: `z = μ + σ ⊙ eps`.
    pub eps: Tensor,
}

/// A VAE: encoder parameters φ, decoder parameters θ, and their layouts.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    arch: VaeArchitecture,
    encoder: MlpConfig,
    decoder: MlpConfig,
    phi: ParamVector,
    theta: ParamVector,
}

impl VaeModel {
    pub fn new(arch: VaeArchitecture, phi: ParamVector, theta: ParamVector) -> Result<Self> {
        let encoder = arch.encoder_config()?;
        let decoder = arch.decoder_config()?;
        if phi.layer_shapes() != encoder.layer_shapes().as_slice() {
            return Err(Error::Shape("encoder parameters do not match the architecture".into()));
        }
        if theta.layer_shapes() != decoder.layer_shapes().as_slice() {
            return Err(Error::Shape("decoder parameters do not match the architecture".into()));
        }
        Ok(Self {
            arch,
            encoder,
            decoder,
            phi,
            theta,
        })
    }

    pub fn init(arch: VaeArchitecture, scheme: InitScheme, rng: &mut RngStream) -> Result<Self> {
        let phi = init_params(&arch.encoder_config()?, scheme, rng)?;
        let theta = init_params(&arch.decoder_config()?, scheme, rng)?;
        Self::new(arch, phi, theta)
    }

    pub fn architecture(&self) -> &VaeArchitecture {
        &self.arch
    }

    pub fn encoder_config(&self) -> &MlpConfig {
        &self.encoder
    }

    pub fn decoder_config(&self) -> &MlpConfig {
        &self.decoder
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    pub fn phi(&self) -> &ParamVector {
        &self.phi
    }

    pub fn theta(&self) -> &ParamVector {
        &self.theta
    }

    pub fn phi_mut(&mut self) -> &mut ParamVector {
        &mut self.phi
    }

    pub fn theta_mut(&mut self) -> &mut ParamVector {
        &mut self.theta
    }

    /// Same architecture, different weights.
    pub fn with_params(&self, phi: ParamVector, theta: ParamVector) -> Result<Self> {
        Self::new(self.arch.clone(), phi, theta)
    }

    /// SHA-256 over the architecture and the raw parameter bytes.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.arch).expect("architecture serialises"));
        for v in self.phi.as_slice().iter().chain(self.theta.as_slice()) {
            h.update(v.to_le_bytes());
        }
        hex(&h.finalize())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.arch.input_dim {
            return Err(Error::Shape(format!(
                "expected (batch, {}) input, got {:?}",
                self.arch.input_dim,
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn encode(&self, x: &Tensor) -> Result<EncoderOutput> {
        self.check_input(x)?;
        let (out, _) = mlp_forward(&self.encoder, &self.phi, x, Dropout::Off)?;
        Ok(split_encoder_output(&out, self.arch.latent_dim))
    }

    /// [`encode`](Self::encode) that first rejects non-binary inputs.
    pub fn encode_strict(&self, x: &Tensor) -> Result<EncoderOutput> {
        if let Some(i) = x.data().iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Validation(format!(
                "input entry {i} is {} (expected 0 or 1)",
                x.data()[i]
            )));
        }
        self.encode(x)
    }

    /// Clamped Bernoulli means `ω ∈ [p_min, 1 − p_min]^D`.
    pub fn decode(&self, z: &Tensor, p_min: f64) -> Result<Tensor> {
        if z.shape().len() != 2 || z.cols() != self.arch.latent_dim {
            return Err(Error::Shape(format!(
                "expected (batch, {}) latent, got {:?}",
                self.arch.latent_dim,
                z.shape()
            )));
        }
        let (mut out, _) = mlp_forward(&self.decoder, &self.theta, z, Dropout::Off)?;
        out.data_mut()
            .iter_mut()
            .for_each(|w| *w = w.clamp(p_min, 1.0 - p_min));
        Ok(out)
    }

    /// Per-example statistics of `−log p_θ(x|z)` over `mc_samples` latent draws.
    pub fn reconstruction_stats(
        &self,
        x: &Tensor,
        loss: &LossConfig,
        rng: &mut RngStream,
    ) -> Result<ReconstructionStats> {
        loss.validate()?;
        self.check_input(x)?;
        let enc = self.encode(x)?;
        let n = x.rows();
        let m = loss.mc_samples;
        let mut sum = vec![0.0; n];
        let mut sum_sq = vec![0.0; n];
        for _ in 0..m {
            let sample = sample_latent(&enc, rng);
            let omega = self.decode(&sample.z, loss.p_min)?;
            let ll = bernoulli_log_likelihood(x, &omega, loss.p_min)?;
            for i in 0..n {
                sum[i] -= ll[i];
                sum_sq[i] += ll[i] * ll[i];
            }
        }
        let mf = m as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / mf).collect();
        let variance = (m > 1).then(|| {
            mean.iter()
                .zip(&sum_sq)
                .map(|(mu, sq)| ((sq - mf * mu * mu) / (mf - 1.0)).max(0.0))
                .collect()
        });
        Ok(ReconstructionStats {
            nll_mean: mean,
            nll_variance: variance,
            mc_samples: m,
        })
    }

    /// Per-example `−E_q[log p_θ(x|z)]` estimate (unrescaled nats).
    pub fn reconstruction_nll(&self, x: &Tensor, loss: &LossConfig, rng: &mut RngStream) -> Result<Vec<f64>> {
        Ok(self.reconstruction_stats(x, loss, rng)?.nll_mean)
    }

    /// Per-example bounded loss `ℓ ∈ [0, 1]`.
    pub fn reconstruction_loss(&self, x: &Tensor, loss: &LossConfig, rng: &mut RngStream) -> Result<Vec<f64>> {
        let scale = loss.rescale_constant(self.arch.input_dim);
        Ok(self
            .reconstruction_nll(x, loss, rng)?
            .into_iter()
            .map(|v| v / scale)
            .collect())
    }

    /// Mean objective `recon_scale · NLL + β · KL` over the batch and its
    /// gradients, using the supplied standard-normal latent noise (one
    /// `(batch, d)` tensor per Monte-Carlo draw).
    ///
    /// With dropout, one mask per network is drawn for the whole call and
    /// shared across the latent draws.
    pub fn objective_with_noise(
        &self,
        x: &Tensor,
        latent_noise: &[Tensor],
        terms: ObjectiveTerms,
        mut dropout: Option<(f64, &mut RngStream)>,
    ) -> Result<ObjectiveGradients> {
        self.check_input(x)?;
        if latent_noise.is_empty() {
            return Err(Error::Contract("at least one latent noise draw is required".into()));
        }
        let batch = x.rows();
        let d = self.arch.latent_dim;
        let (lo, hi) = LOG_SIGMA_RANGE;

        let enc_dropout = match dropout.as_mut() {
            Some((rate, rng)) => Dropout::On { rate: *rate, rng },
            None => Dropout::Off,
        };
        let (enc_out, enc_cache) = mlp_forward(&self.encoder, &self.phi, x, enc_dropout)?;

        let mut mu = Tensor::zeros(vec![batch, d]);
        let mut sigma = Tensor::zeros(vec![batch, d]);
        let mut ls_active = vec![true; batch * d];
        for i in 0..batch {
            let row = enc_out.row(i);
            for k in 0..d {
                mu.data_mut()[i * d + k] = row[k];
                let raw = row[d + k];
                ls_active[i * d + k] = (lo..=hi).contains(&raw);
                sigma.data_mut()[i * d + k] = raw.clamp(lo, hi).exp();
            }
        }

        let m = latent_noise.len();
        let weight = terms.recon_scale / (batch as f64 * m as f64);
        let mut grad_mu = vec![0.0; batch * d];
        let mut grad_ls = vec![0.0; batch * d];
        let mut grad_theta = self.theta.zeros_like();
        let mut nll_total = 0.0;

        for eps in latent_noise {
            if eps.shape() != [batch, d] {
                return Err(Error::Shape(format!(
                    "latent noise shape {:?}, expected [{batch}, {d}]",
                    eps.shape()
                )));
            }
            let z = latent_from_noise(&mu, &sigma, eps);
            let dec_dropout = match dropout.as_mut() {
                Some((rate, rng)) => Dropout::On { rate: *rate, rng },
                None => Dropout::Off,
            };
            let (y, dec_cache) = mlp_forward(&self.decoder, &self.theta, &z, dec_dropout)?;
            let mut grad_y = Tensor::zeros(y.shape().to_vec());
            for ((g, &yv), &xv) in grad_y.data_mut().iter_mut().zip(y.data()).zip(x.data()) {
                let w = yv.clamp(terms.p_min, 1.0 - terms.p_min);
                nll_total -= xv * w.ln() + (1.0 - xv) * (1.0 - w).ln();
                if yv >= terms.p_min && yv <= 1.0 - terms.p_min {
                    *g = weight * (-xv / w + (1.0 - xv) / (1.0 - w));
                }
            }
            let (g_theta, g_z) = mlp_backward(&self.theta, &dec_cache, &grad_y)?;
            grad_theta.axpy(1.0, &g_theta);
            for j in 0..batch * d {
                let gz = g_z.data()[j];
                grad_mu[j] += gz;
                if ls_active[j] {
                    grad_ls[j] += gz * sigma.data()[j] * eps.data()[j];
                }
            }
        }

        let kl = latent_kl_parts(&mu, &sigma);
        let kl_mean = kl.iter().sum::<f64>() / batch as f64;
        if terms.beta != 0.0 {
            let w = terms.beta / batch as f64;
            for j in 0..batch * d {
                grad_mu[j] += w * mu.data()[j];
                if ls_active[j] {
                    let s = sigma.data()[j];
                    grad_ls[j] += w * (s * s - 1.0);
                }
            }
        }

        let mut grad_enc = Tensor::zeros(vec![batch, 2 * d]);
        for i in 0..batch {
            let row = grad_enc.row_mut(i);
            row[..d].copy_from_slice(&grad_mu[i * d..(i + 1) * d]);
            row[d..].copy_from_slice(&grad_ls[i * d..(i + 1) * d]);
        }
        let grad_phi = mlp_backward_params(&self.phi, &enc_cache, &grad_enc)?;

        let recon_nll = nll_total / (batch as f64 * m as f64);
        Ok(ObjectiveGradients {
            value: terms.recon_scale * recon_nll + terms.beta * kl_mean,
            recon_nll,
            latent_kl: kl_mean,
            grad_phi,
            grad_theta,
        })
    }
}

/// Per-example reconstruction statistics.
#[derive(Debug, Clone)]
pub struct ReconstructionStats {
    /// Mean over latent draws of `−log p_θ(x|z)`, one entry per example.
    pub nll_mean: Vec<f64>,
    /// Sample variance over latent draws (only when `mc_samples > 1`).
    pub nll_variance: Option<Vec<f64>>,
    pub mc_samples: usize,
}

/// Weights of the two objective terms.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveTerms {
    /// Multiplier on the mean reconstruction NLL: `1` for the β-VAE
    /// objective, `1 / (D log(1/p_min))` for the bounded loss.
    pub recon_scale: f64,
    pub beta: f64,
    pub p_min: f64,
}

#[derive(Debug, Clone)]
pub struct ObjectiveGradients {
    pub value: f64,
    /// Mean unrescaled reconstruction NLL over batch and latent draws.
    pub recon_nll: f64,
    /// Mean latent KL over the batch.
    pub latent_kl: f64,
    pub grad_phi: ParamVector,
    pub grad_theta: ParamVector,
}

fn split_encoder_output(out: &Tensor, d: usize) -> EncoderOutput {
    let batch = out.rows();
    let (lo, hi) = LOG_SIGMA_RANGE;
    let mut mu = Vec::with_capacity(batch * d);
    let mut ls = Vec::with_capacity(batch * d);
    for i in 0..batch {
        let row = out.row(i);
        mu.extend_from_slice(&row[..d]);
        ls.extend(row[d..].iter().map(|v| v.clamp(lo, hi)));
    }
    EncoderOutput {
        mu: Tensor::from_raw(vec![batch, d], mu),
        log_sigma: Tensor::from_raw(vec![batch, d], ls),
    }
}

fn latent_from_noise(mu: &Tensor, sigma: &Tensor, eps: &Tensor) -> Tensor {
    let z = mu
        .data()
        .iter()
        .zip(sigma.data())
        .zip(eps.data())
        .map(|((m, s), e)| m + s * e)
        .collect();
    Tensor::from_raw(mu.shape().to_vec(), z)
}

/// Reparameterised draw `z = μ + σ ⊙ ε`, `ε ~ N(0, I)`.
pub fn sample_latent(enc: &EncoderOutput, rng: &mut RngStream) -> LatentSample {
    let eps = crate::nn::gaussian_sample(rng, enc.mu.shape().to_vec());
    let z = latent_with_noise(enc, &eps);
    LatentSample { z, eps }
}

/// `μ + σ ⊙ eps` for recorded noise.
pub fn latent_with_noise(enc: &EncoderOutput, eps: &Tensor) -> Tensor {
    let sigma: Vec<f64> = enc.log_sigma.data().iter().map(|l| l.exp()).collect();
    latent_from_noise(&enc.mu, &Tensor::from_raw(enc.mu.shape().to_vec(), sigma), eps)
}

fn latent_kl_parts(mu: &Tensor, sigma: &Tensor) -> Vec<f64> {
    (0..mu.rows())
        .map(|i| {
            mu.row(i)
                .iter()
                .zip(sigma.row(i))
                .map(|(m, s)| 0.5 * (m * m + s * s - 1.0 - 2.0 * s.ln()))
                .sum::<f64>()
        })
        .collect()
}

/// `KL(N(μ, diag σ²) ‖ N(0, I))` per example.
pub fn latent_kl(enc: &EncoderOutput) -> Vec<f64> {
    let d = enc.mu.cols();
    (0..enc.mu.rows())
        .map(|i| {
            let mu = enc.mu.row(i);
            let ls = enc.log_sigma.row(i);
            (0..d)
                .map(|k| 0.5 * (mu[k] * mu[k] + (2.0 * ls[k]).exp() - 1.0 - 2.0 * ls[k]))
                .sum()
        })
        .collect()
}

/// `Σ_j x_j log ω_j + (1 − x_j) log(1 − ω_j)` per example.
pub fn bernoulli_log_likelihood(x: &Tensor, omega: &Tensor, p_min: f64) -> Result<Vec<f64>> {
    if x.shape() != omega.shape() {
        return Err(Error::Shape(format!(
            "x {:?} vs omega {:?}",
            x.shape(),
            omega.shape()
        )));
    }
    if let Some(w) = omega.data().iter().find(|&&w| w < p_min || w > 1.0 - p_min) {
        return Err(Error::Contract(format!(
            "decoder mean {w} outside the clamp range [{p_min}, {}]",
            1.0 - p_min
        )));
    }
    Ok((0..x.rows())
        .map(|i| {
            x.row(i)
                .iter()
                .zip(omega.row(i))
                .map(|(xv, w)| xv * w.ln() + (1.0 - xv) * (1.0 - w).ln())
                .sum()
        })
        .collect())
}

/// Mean β-VAE objective over a batch (`−log p_θ(x|z) + β·KL`, unrescaled),
/// with one set of latent draws taken from `rng`.
pub fn beta_vae_objective(
    model: &VaeModel,
    batch: &Tensor,
    beta: f64,
    loss: &LossConfig,
    rng: &mut RngStream,
) -> Result<ObjectiveGradients> {
    if beta < 0.0 {
        return Err(Error::Config(format!("beta {beta} must be non-negative")));
    }
    loss.validate()?;
    let noise = draw_latent_noise(rng, batch.rows(), model.latent_dim(), loss.mc_samples);
    model.objective_with_noise(
        batch,
        &noise,
        ObjectiveTerms {
            recon_scale: 1.0,
            beta,
            p_min: loss.p_min,
        },
        None,
    )
}

pub(crate) fn draw_latent_noise(rng: &mut RngStream, batch: usize, d: usize, draws: usize) -> Vec<Tensor> {
    (0..draws)
        .map(|_| crate::nn::gaussian_sample(rng, vec![batch, d]))
        .collect()
}

/// Settings of a β-VAE training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaVaeTraining {
    pub beta: f64,
    pub dropout_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaVaeEpoch {
    pub epoch: usize,
    pub objective: f64,
    pub recon_raw: f64,
    pub latent_kl: f64,
}

/// Minibatch Adam on the β-VAE objective. On a non-finite loss or gradient
/// the model is restored to its state at the start of the failing epoch and
/// [`Error::Diverged`] is returned.
pub fn train_beta_vae(
    model: &mut VaeModel,
    data: &ImageDataset,
    cfg: &BetaVaeTraining,
    mut on_epoch: impl FnMut(&BetaVaeEpoch),
) -> Result<Vec<BetaVaeEpoch>> {
    cfg.loss.validate()?;
    cfg.adam.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut adam_phi = AdamState::for_params(cfg.adam, model.phi());
    let mut adam_theta = AdamState::for_params(cfg.adam, model.theta());
    let terms = ObjectiveTerms {
        recon_scale: 1.0,
        beta: cfg.beta,
        p_min: cfg.loss.p_min,
    };
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let snapshot = model.clone();
        let e = epoch as u64;
        let shuffle_seed = RngStream::indexed(cfg.seed, Substream::DataShuffle, e).next_seed();
        let mut latent_rng = RngStream::indexed(cfg.seed, Substream::LatentNoise, e);
        let mut dropout_rng = RngStream::indexed(cfg.seed, Substream::Dropout, e);

        let (mut obj_sum, mut nll_sum, mut kl_sum, mut seen) = (0.0, 0.0, 0.0, 0usize);
        for batch in minibatches(data, cfg.batch_size, shuffle_seed) {
            let b = batch.x.rows();
            let noise = draw_latent_noise(&mut latent_rng, b, model.latent_dim(), cfg.loss.mc_samples);
            let dropout = (cfg.dropout_rate > 0.0).then_some((cfg.dropout_rate, &mut dropout_rng));
            let out = model.objective_with_noise(&batch.x, &noise, terms, dropout)?;
            if !out.value.is_finite() || !out.grad_phi.is_finite() || !out.grad_theta.is_finite() {
                *model = snapshot;
                return Err(Error::Diverged { epoch });
            }
            adam_phi.step(model.phi_mut(), &out.grad_phi)?;
            adam_theta.step(model.theta_mut(), &out.grad_theta)?;
            obj_sum += out.value * b as f64;
            nll_sum += out.recon_nll * b as f64;
            kl_sum += out.latent_kl * b as f64;
            seen += b;
        }
        let n = seen.max(1) as f64;
        let record = BetaVaeEpoch {
            epoch,
            objective: obj_sum / n,
            recon_raw: nll_sum / n,
            latent_kl: kl_sum / n,
        };
        on_epoch(&record);
        log.push(record);
    }
    Ok(log)
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
