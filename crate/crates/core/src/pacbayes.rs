//! Weight-space PAC-Bayes objectives for stochastic VAEs.
//!
//! The posterior over weights is `N(φ, s_φ² I) ⊗ N(θ, s_θ² I)` with scalar
//! scales `s = exp(ρ)`; the prior is `N(φ⁰, σ_φ² I) ⊗ N(θ⁰, σ_θ² I)`.
//! Training minimises either the McAllester-form bound (one square-root
//! penalty per network) or the quadratic bound, with the weight KL scaled by
//! an attenuation factor `λ`. The confidence term is never attenuated.

use serde::{Deserialize, Serialize};

use crate::data::{minibatches, ImageDataset};
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamState, ParamVector, RngStream, Substream, Tensor};
use crate::vae::{draw_latent_noise, LossConfig, ObjectiveTerms, VaeModel};

/// Data-independent Gaussian prior over encoder and decoder weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightPrior {
    pub phi0: ParamVector,
    pub theta0: ParamVector,
    pub sigma_phi: f64,
    pub sigma_theta: f64,
}

impl WeightPrior {
    pub fn new(phi0: ParamVector, theta0: ParamVector, sigma_phi: f64, sigma_theta: f64) -> Result<Self> {
        for (name, s) in [("sigma_phi", sigma_phi), ("sigma_theta", sigma_theta)] {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Contract(format!("{name} = {s} must be positive")));
            }
        }
        Ok(Self {
            phi0,
            theta0,
            sigma_phi,
            sigma_theta,
        })
    }

    /// Prior centred at the model's current weights.
    pub fn centred_at(model: &VaeModel, sigma_phi: f64, sigma_theta: f64) -> Result<Self> {
        Self::new(model.phi().clone(), model.theta().clone(), sigma_phi, sigma_theta)
    }

    pub fn check_layout(&self, model: &VaeModel) -> Result<()> {
        if !self.phi0.same_layout(model.phi()) || !self.theta0.same_layout(model.theta()) {
            return Err(Error::Shape("prior centre does not match the model layout".into()));
        }
        Ok(())
    }
}

/// Log posterior scales, one per network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosteriorScale {
    pub rho_phi: f64,
    pub rho_theta: f64,
}

impl PosteriorScale {
    pub fn from_scales(s_phi: f64, s_theta: f64) -> Self {
        Self {
            rho_phi: s_phi.ln(),
            rho_theta: s_theta.ln(),
        }
    }

    /// `s = σ / 2` for both networks.
    pub fn initial(prior: &WeightPrior) -> Self {
        Self::from_scales(prior.sigma_phi / 2.0, prior.sigma_theta / 2.0)
    }

    pub fn s_phi(&self) -> f64 {
        self.rho_phi.exp()
    }

    pub fn s_theta(&self) -> f64 {
        self.rho_theta.exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    Mcallester,
    Quadratic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PacBayesConfig {
    pub delta: f64,
    /// Size of the bound-evaluation set; the `n` of every penalty term.
    pub n_bound: usize,
    pub bound_kind: BoundKind,
    /// `λ`: multiplier on the weight KL inside the penalties.
    pub kl_attenuation: f64,
    pub weight_noise_samples: usize,
}

impl PacBayesConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!("delta {} outside (0, 1)", self.delta)));
        }
        if self.n_bound == 0 {
            return Err(Error::Config("n_bound must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.kl_attenuation) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.kl_attenuation)));
        }
        if self.weight_noise_samples == 0 {
            return Err(Error::Config("weight_noise_samples must be at least 1".into()));
        }
        Ok(())
    }
}

/// `log(2√n / δ)`.
pub fn confidence_term(n: usize, delta: f64) -> f64 {
    (2.0 * (n as f64).sqrt() / delta).ln()
}

/// `KL(N(center, s² I) ‖ N(prior_center, σ² I))`.
pub fn gaussian_weight_kl(center: &ParamVector, prior_center: &ParamVector, s2: f64, sigma2: f64) -> Result<f64> {
    if !(s2 > 0.0 && sigma2 > 0.0) {
        return Err(Error::Contract(format!(
            "variances must be positive (s² = {s2}, σ² = {sigma2})"
        )));
    }
    center.ensure_same_layout(prior_center, "weight KL")?;
    let dist = center.distance_sq(prior_center);
    let n = center.total_count() as f64;
    Ok(dist / (2.0 * sigma2) + 0.5 * n * (s2 / sigma2 + (sigma2 / s2).ln() - 1.0))
}

/// `(params + s·ε, ε)` with `ε ~ N(0, I)`.
pub fn perturb_weights(params: &ParamVector, s: f64, rng: &mut RngStream) -> (ParamVector, ParamVector) {
    let eps = standard_noise_like(params, rng);
    let mut noisy = params.clone();
    noisy.axpy(s, &eps);
    (noisy, eps)
}

pub(crate) fn standard_noise_like(params: &ParamVector, rng: &mut RngStream) -> ParamVector {
    let mut eps = params.zeros_like();
    rng.fill_gaussian(eps.as_mut_slice());
    eps
}

/// Per-network McAllester penalty `√((λ·KL + log(2√n/δ)) / (2n))`.
pub fn mcallester_penalty(kl: f64, cfg: &PacBayesConfig) -> Result<f64> {
    let n = cfg.n_bound as f64;
    let arg = (cfg.kl_attenuation * kl + confidence_term(cfg.n_bound, cfg.delta)) / (2.0 * n);
    if arg < 0.0 {
        return Err(Error::Contract(format!("negative penalty argument {arg}")));
    }
    Ok(arg.sqrt())
}

/// Quadratic bound `(√B + √(R̂ + B))²`.
pub fn quadratic_bound(recon: f64, b: f64) -> Result<f64> {
    if b < 0.0 || recon + b < 0.0 {
        return Err(Error::Contract(format!("quadratic bound with B = {b}, R̂ = {recon}")));
    }
    Ok((b.sqrt() + (recon + b).sqrt()).powi(2))
}

/// Frozen noise for one weight-space sample.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    /// Standard-normal encoder noise; the perturbed encoder is `φ + s_φ·eps_phi`.
    pub eps_phi: ParamVector,
    pub eps_theta: ParamVector,
    /// Standard-normal latent noise, one `(batch, d)` tensor per latent draw.
    pub latent: Vec<Tensor>,
}

impl NoiseDraw {
    pub fn sample(
        model: &VaeModel,
        batch: usize,
        latent_draws: usize,
        weight_rng: &mut RngStream,
        latent_rng: &mut RngStream,
    ) -> Self {
        Self {
            eps_phi: standard_noise_like(model.phi(), weight_rng),
            eps_theta: standard_noise_like(model.theta(), weight_rng),
            latent: draw_latent_noise(latent_rng, batch, model.latent_dim(), latent_draws),
        }
    }
}

/// Value and gradients of a PAC-Bayes objective.
#[derive(Debug, Clone)]
pub struct PacBayesGradients {
    pub value: f64,
    /// Stochastic bounded reconstruction loss `R̂` on the batch.
    pub recon_bounded: f64,
    /// The same in raw nats per image.
    pub recon_raw: f64,
    pub kl_phi: f64,
    pub kl_theta: f64,
    /// McAllester: the encoder's square-root term. Quadratic: the encoder's
    /// share `λ·KL_φ/(2n)` of `B`.
    pub penalty_phi: f64,
    pub penalty_theta: f64,
    pub grad_phi: ParamVector,
    pub grad_theta: ParamVector,
    pub grad_rho_phi: f64,
    pub grad_rho_theta: f64,
}

/// The objective with all noise supplied by the caller.
pub fn pacbayes_objective_with_noise(
    model: &VaeModel,
    prior: &WeightPrior,
    scales: &PosteriorScale,
    batch: &Tensor,
    noise: &[NoiseDraw],
    cfg: &PacBayesConfig,
    loss: &LossConfig,
) -> Result<PacBayesGradients> {
    cfg.validate()?;
    loss.validate()?;
    prior.check_layout(model)?;
    if noise.is_empty() {
        return Err(Error::Contract("at least one weight-noise draw is required".into()));
    }
    let (s_phi, s_theta) = (scales.s_phi(), scales.s_theta());
    let terms = ObjectiveTerms {
        recon_scale: 1.0 / loss.rescale_constant(model.input_dim()),
        beta: 0.0,
        p_min: loss.p_min,
    };

    let k = noise.len() as f64;
    let mut recon = 0.0;
    let mut recon_raw = 0.0;
    let mut grad_phi = model.phi().zeros_like();
    let mut grad_theta = model.theta().zeros_like();
    let (mut g_rho_phi, mut g_rho_theta) = (0.0, 0.0);
    for draw in noise {
        let mut phi = model.phi().clone();
        phi.axpy(s_phi, &draw.eps_phi);
        let mut theta = model.theta().clone();
        theta.axpy(s_theta, &draw.eps_theta);
        let out = model
            .with_params(phi, theta)?
            .objective_with_noise(batch, &draw.latent, terms, None)?;
        recon += out.value / k;
        recon_raw += out.recon_nll / k;
        g_rho_phi += s_phi * draw.eps_phi.dot(&out.grad_phi) / k;
        g_rho_theta += s_theta * draw.eps_theta.dot(&out.grad_theta) / k;
        grad_phi.axpy(1.0 / k, &out.grad_phi);
        grad_theta.axpy(1.0 / k, &out.grad_theta);
    }

    let (sig2_phi, sig2_theta) = (prior.sigma_phi.powi(2), prior.sigma_theta.powi(2));
    let kl_phi = gaussian_weight_kl(model.phi(), &prior.phi0, s_phi * s_phi, sig2_phi)?;
    let kl_theta = gaussian_weight_kl(model.theta(), &prior.theta0, s_theta * s_theta, sig2_theta)?;
    let n = cfg.n_bound as f64;
    let lambda = cfg.kl_attenuation;

    // Multipliers on ∂KL_φ and ∂KL_θ, and on ∂R̂.
    let (value, penalty_phi, penalty_theta, w_kl_phi, w_kl_theta, w_recon) = match cfg.bound_kind {
        BoundKind::Mcallester => {
            let p_phi = mcallester_penalty(kl_phi, cfg)?;
            let p_theta = mcallester_penalty(kl_theta, cfg)?;
            (
                recon + p_phi + p_theta,
                p_phi,
                p_theta,
                lambda / (4.0 * n * p_phi),
                lambda / (4.0 * n * p_theta),
                1.0,
            )
        }
        BoundKind::Quadratic => {
            let conf = confidence_term(cfg.n_bound, cfg.delta);
            let b = (lambda * (kl_phi + kl_theta) + conf) / (2.0 * n);
            let value = quadratic_bound(recon, b)?;
            let (rb, rrb) = (b.sqrt(), (recon + b).sqrt());
            let d_b = (rb + rrb) * (1.0 / rb + 1.0 / rrb);
            let d_recon = (rb + rrb) / rrb;
            let w = d_b * lambda / (2.0 * n);
            (
                value,
                lambda * kl_phi / (2.0 * n),
                lambda * kl_theta / (2.0 * n),
                w,
                w,
                d_recon,
            )
        }
    };

    grad_phi.scale(w_recon);
    grad_theta.scale(w_recon);
    if lambda != 0.0 {
        let dphi = model.phi().sub(&prior.phi0);
        grad_phi.axpy(w_kl_phi / sig2_phi, &dphi);
        let dtheta = model.theta().sub(&prior.theta0);
        grad_theta.axpy(w_kl_theta / sig2_theta, &dtheta);
    }
    let n_phi = model.phi().total_count() as f64;
    let n_theta = model.theta().total_count() as f64;
    let grad_rho_phi = w_recon * g_rho_phi + w_kl_phi * n_phi * (s_phi * s_phi / sig2_phi - 1.0);
    let grad_rho_theta = w_recon * g_rho_theta + w_kl_theta * n_theta * (s_theta * s_theta / sig2_theta - 1.0);

    Ok(PacBayesGradients {
        value,
        recon_bounded: recon,
        recon_raw,
        kl_phi,
        kl_theta,
        penalty_phi,
        penalty_theta,
        grad_phi,
        grad_theta,
        grad_rho_phi,
        grad_rho_theta,
    })
}

#[allow(clippy::too_many_arguments)]
fn objective_of_kind(
    kind: BoundKind,
    model: &VaeModel,
    prior: &WeightPrior,
    scales: &PosteriorScale,
    batch: &Tensor,
    cfg: &PacBayesConfig,
    loss: &LossConfig,
    weight_rng: &mut RngStream,
    latent_rng: &mut RngStream,
) -> Result<PacBayesGradients> {
    let noise: Vec<NoiseDraw> = (0..cfg.weight_noise_samples)
        .map(|_| NoiseDraw::sample(model, batch.rows(), loss.mc_samples, weight_rng, latent_rng))
        .collect();
    let cfg = PacBayesConfig {
        bound_kind: kind,
        ..*cfg
    };
    pacbayes_objective_with_noise(model, prior, scales, batch, &noise, &cfg, loss)
}

/// McAllester-form objective `R̂ + P_φ + P_θ` with fresh weight and latent noise.
#[allow(clippy::too_many_arguments)]
pub fn mcallester_objective(
    model: &VaeModel,
    prior: &WeightPrior,
    scales: &PosteriorScale,
    batch: &Tensor,
    cfg: &PacBayesConfig,
    loss: &LossConfig,
    weight_rng: &mut RngStream,
    latent_rng: &mut RngStream,
) -> Result<PacBayesGradients> {
    objective_of_kind(BoundKind::Mcallester, model, prior, scales, batch, cfg, loss, weight_rng, latent_rng)
}

/// Quadratic objective `(√B + √(R̂ + B))²` with fresh weight and latent noise.
#[allow(clippy::too_many_arguments)]
pub fn quadratic_objective(
    model: &VaeModel,
    prior: &WeightPrior,
    scales: &PosteriorScale,
    batch: &Tensor,
    cfg: &PacBayesConfig,
    loss: &LossConfig,
    weight_rng: &mut RngStream,
    latent_rng: &mut RngStream,
) -> Result<PacBayesGradients> {
    objective_of_kind(BoundKind::Quadratic, model, prior, scales, batch, cfg, loss, weight_rng, latent_rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorTraining {
    pub pacbayes: PacBayesConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorEpoch {
    pub epoch: usize,
    pub objective: f64,
    pub recon_raw: f64,
    pub recon_bounded: f64,
    pub penalty_phi: f64,
    pub penalty_theta: f64,
    pub s_phi: f64,
    pub s_theta: f64,
}

/// Minibatch Adam over `(φ, θ, ρ_φ, ρ_θ)`. Weights start wherever `model`
/// is; callers normally start from the prior centre with
/// [`PosteriorScale::initial`]. On divergence the model and scales are
/// restored to the start of the failing epoch.
pub fn train_posterior(
    model: &mut VaeModel,
    scales: &mut PosteriorScale,
    prior: &WeightPrior,
    data: &ImageDataset,
    cfg: &PosteriorTraining,
    mut on_epoch: impl FnMut(&PosteriorEpoch),
) -> Result<Vec<PosteriorEpoch>> {
    cfg.pacbayes.validate()?;
    cfg.adam.validate()?;
    cfg.loss.validate()?;
    prior.check_layout(model)?;
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut adam_phi = AdamState::for_params(cfg.adam, model.phi());
    let mut adam_theta = AdamState::for_params(cfg.adam, model.theta());
    let mut adam_rho = AdamState::new(cfg.adam, 2);
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let snapshot = (model.clone(), *scales);
        let e = epoch as u64;
        let shuffle_seed = RngStream::indexed(cfg.seed, Substream::DataShuffle, e).next_seed();
        let mut weight_rng = RngStream::indexed(cfg.seed, Substream::WeightNoise, e);
        let mut latent_rng = RngStream::indexed(cfg.seed, Substream::LatentNoise, e);

        let mut sums = [0.0; 5];
        let mut seen = 0usize;
        for batch in minibatches(data, cfg.batch_size, shuffle_seed) {
            let b = batch.x.rows();
            let noise: Vec<NoiseDraw> = (0..cfg.pacbayes.weight_noise_samples)
                .map(|_| NoiseDraw::sample(model, b, cfg.loss.mc_samples, &mut weight_rng, &mut latent_rng))
                .collect();
            let out = pacbayes_objective_with_noise(model, prior, scales, &batch.x, &noise, &cfg.pacbayes, &cfg.loss)?;
            let finite = out.value.is_finite()
                && out.grad_phi.is_finite()
                && out.grad_theta.is_finite()
                && out.grad_rho_phi.is_finite()
                && out.grad_rho_theta.is_finite();
            if !finite {
                (*model, *scales) = snapshot;
                return Err(Error::Diverged { epoch });
            }
            adam_phi.step(model.phi_mut(), &out.grad_phi)?;
            adam_theta.step(model.theta_mut(), &out.grad_theta)?;
            let mut rho = [scales.rho_phi, scales.rho_theta];
            adam_rho.step_slice(&mut rho, &[out.grad_rho_phi, out.grad_rho_theta])?;
            (scales.rho_phi, scales.rho_theta) = (rho[0], rho[1]);

            let w = b as f64;
            for (acc, v) in sums.iter_mut().zip([
                out.value,
                out.recon_raw,
                out.recon_bounded,
                out.penalty_phi,
                out.penalty_theta,
            ]) {
                *acc += v * w;
            }
            seen += b;
        }
        let n = seen.max(1) as f64;
        let record = PosteriorEpoch {
            epoch,
            objective: sums[0] / n,
            recon_raw: sums[1] / n,
            recon_bounded: sums[2] / n,
            penalty_phi: sums[3] / n,
            penalty_theta: sums[4] / n,
            s_phi: scales.s_phi(),
            s_theta: scales.s_theta(),
        };
        on_epoch(&record);
        log.push(record);
    }
    Ok(log)
}
