//! Risk certificates: binary kl, its upper inversion, and the derandomised
//! and noise-free budgets.
//!
//! All certificates bound the expected bounded reconstruction loss `R` via
//! `kl(R̂ ‖ R) ≤ budget`, solved upward for `R`.

use serde::{Deserialize, Serialize};

use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::nn::{ParamVector, RngStream, Substream};
use crate::pacbayes::{confidence_term, gaussian_weight_kl, quadratic_bound, PosteriorScale, WeightPrior};
use crate::vae::{LossConfig, VaeModel};

/// Rows per forward pass when evaluating over a whole dataset.
const EVAL_CHUNK: usize = 1000;

/// Smallest posterior scale accepted by the randomised diagnostic.
pub const MIN_DIAGNOSTIC_SCALE: f64 = 1e-8;

/// `kl(q ‖ p)` between Bernoulli parameters, with `0·log 0 = 0`. Returns
/// `+∞` when `p ∈ {0, 1}` and `q ≠ p`.
pub fn binary_kl(q: f64, p: f64) -> f64 {
    if q == p {
        return 0.0;
    }
    if p <= 0.0 || p >= 1.0 {
        return f64::INFINITY;
    }
    // ln(q/p) and ln((1−q)/(1−p)) via ln_1p keep precision for q ≈ p.
    let a = if q > 0.0 { q * ((q - p) / p).ln_1p() } else { 0.0 };
    let b = if q < 1.0 {
        (1.0 - q) * ((p - q) / (1.0 - p)).ln_1p()
    } else {
        0.0
    };
    (a + b).max(0.0)
}

/// `sup { q ∈ [p, 1] : kl(p ‖ q) ≤ c }`, by bisection down to adjacent
/// floating-point values. The upper end of the final bracket is returned.
pub fn kl_inverse(p: f64, c: f64) -> f64 {
    let p = p.clamp(0.0, 1.0);
    if c <= 0.0 || p >= 1.0 {
        return p;
    }
    let (mut lo, mut hi) = (p, 1.0_f64);
    for _ in 0..4096 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if binary_kl(p, mid) <= c {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

fn check_pair(a: &ParamVector, b: &ParamVector, what: &str) -> Result<()> {
    if a.same_layout(b) {
        Ok(())
    } else {
        Err(Error::Shape(format!("{what}: parameter layouts differ")))
    }
}

fn derandomised_term(w: &ParamVector, w0: &ParamVector, eps: &ParamVector, sigma: f64, n: f64) -> Result<f64> {
    check_pair(w, w0, "prior centre")?;
    check_pair(w, eps, "noise")?;
    // ‖Δ + ε‖² − ‖ε‖² = ‖Δ‖² + 2Δ·ε, without the cancellation.
    let s: f64 = w
        .as_slice()
        .iter()
        .zip(w0.as_slice())
        .zip(eps.as_slice())
        .map(|((a, b), e)| {
            let d = a - b;
            d * d + 2.0 * d * e
        })
        .sum();
    Ok(s / (2.0 * sigma * sigma * n))
}

/// `(‖Δφ+ε_φ‖² − ‖ε_φ‖²)/(2σ_φ²n) + (same for θ) + log(2√n/δ)/n`, where
/// `ε ~ N(0, σ² I)` is the noise actually added to the weights. Not floored.
pub fn derandomised_budget(
    phi: &ParamVector,
    theta: &ParamVector,
    prior: &WeightPrior,
    eps_phi: &ParamVector,
    eps_theta: &ParamVector,
    n: usize,
    delta: f64,
) -> Result<f64> {
    check_budget_args(n, delta)?;
    let nf = n as f64;
    Ok(derandomised_term(phi, &prior.phi0, eps_phi, prior.sigma_phi, nf)?
        + derandomised_term(theta, &prior.theta0, eps_theta, prior.sigma_theta, nf)?
        + confidence_term(n, delta) / nf)
}

/// `‖Δφ‖²/(2σ_φ²n) + ‖Δθ‖²/(2σ_θ²n) + log(2√n/δ)/(2n)`.
pub fn noise_free_budget(phi: &ParamVector, theta: &ParamVector, prior: &WeightPrior, n: usize, delta: f64) -> Result<f64> {
    check_budget_args(n, delta)?;
    check_pair(phi, &prior.phi0, "prior centre")?;
    check_pair(theta, &prior.theta0, "prior centre")?;
    let nf = n as f64;
    Ok(phi.distance_sq(&prior.phi0) / (2.0 * prior.sigma_phi.powi(2) * nf)
        + theta.distance_sq(&prior.theta0) / (2.0 * prior.sigma_theta.powi(2) * nf)
        + confidence_term(n, delta) / (2.0 * nf))
}

fn check_budget_args(n: usize, delta: f64) -> Result<()> {
    if n == 0 {
        return Err(Error::Contract("bound set is empty".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Config(format!("delta {delta} outside (0, 1)")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertificateKind {
    Derandomised,
    NoiseFree,
    McallesterRandomised,
    QuadraticRandomised,
}

/// Where the empirical risk of a derandomised certificate is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertificateMode {
    /// At the noise-perturbed weights `(φ + ε_φ, θ + ε_θ)`.
    Perturbed,
    /// At `(φ, θ)`, with the budget still using the drawn noise.
    SmallNoiseApprox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertificateConfig {
    pub delta: f64,
    pub loss: LossConfig,
    pub noise_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub kind: CertificateKind,
    pub mode: Option<CertificateMode>,
    pub empirical_loss: f64,
    /// The budget passed to [`kl_inverse`] (floored at zero).
    pub kl_budget: f64,
    pub risk_bound: f64,
    pub risk_bound_rescaled_nats_per_image: f64,
    pub n: usize,
    pub delta: f64,
    pub sigma_phi: f64,
    pub sigma_theta: f64,
    pub noise_seed: u64,
    pub checkpoint_hash: String,
    /// Standard error of `empirical_loss` due to latent sampling; not part
    /// of the bound.
    pub latent_mc_std_error: f64,
}

/// Mean bounded loss over `data` and the standard error of that mean due to
/// latent sampling.
pub fn empirical_risk(model: &VaeModel, data: &ImageDataset, loss: &LossConfig, rng: &mut RngStream) -> Result<(f64, f64)> {
    let scale = loss.rescale_constant(model.input_dim());
    let (mut sum, mut var_sum) = (0.0, 0.0);
    for chunk in data.chunks(EVAL_CHUNK) {
        let stats = model.reconstruction_stats(&chunk, loss, rng)?;
        sum += stats.nll_mean.iter().sum::<f64>();
        if let Some(v) = &stats.nll_variance {
            var_sum += v.iter().sum::<f64>() / stats.mc_samples as f64;
        }
    }
    let n = data.count() as f64;
    Ok((sum / n / scale, var_sum.sqrt() / n / scale))
}

/// `σ·N(0, I)` weight noise for both networks from the certificate seed.
pub fn certificate_noise(model: &VaeModel, prior: &WeightPrior, noise_seed: u64) -> (ParamVector, ParamVector) {
    let mut rng = RngStream::new(noise_seed, Substream::CertificateNoise);
    let mut eps_phi = model.phi().zeros_like();
    rng.fill_gaussian(eps_phi.as_mut_slice());
    eps_phi.scale(prior.sigma_phi);
    let mut eps_theta = model.theta().zeros_like();
    rng.fill_gaussian(eps_theta.as_mut_slice());
    eps_theta.scale(prior.sigma_theta);
    (eps_phi, eps_theta)
}

struct Drawn {
    eps_phi: ParamVector,
    eps_theta: ParamVector,
}

fn risk_at(model: &VaeModel, drawn: Option<&Drawn>, bound_set: &ImageDataset, cfg: &CertificateConfig) -> Result<(f64, f64)> {
    let mut rng = RngStream::new(cfg.noise_seed, Substream::Evaluation);
    match drawn {
        Some(d) => {
            let mut phi = model.phi().clone();
            phi.axpy(1.0, &d.eps_phi);
            let mut theta = model.theta().clone();
            theta.axpy(1.0, &d.eps_theta);
            empirical_risk(&model.with_params(phi, theta)?, bound_set, &cfg.loss, &mut rng)
        }
        None => empirical_risk(model, bound_set, &cfg.loss, &mut rng),
    }
}

#[allow(clippy::too_many_arguments)]
fn build(
    kind: CertificateKind,
    mode: Option<CertificateMode>,
    (empirical_loss, se): (f64, f64),
    budget: f64,
    model: &VaeModel,
    prior: &WeightPrior,
    n: usize,
    cfg: &CertificateConfig,
) -> Certificate {
    let kl_budget = budget.max(0.0);
    let risk_bound = kl_inverse(empirical_loss, kl_budget);
    Certificate {
        kind,
        mode,
        empirical_loss,
        kl_budget,
        risk_bound,
        risk_bound_rescaled_nats_per_image: risk_bound * cfg.loss.rescale_constant(model.input_dim()),
        n,
        delta: cfg.delta,
        sigma_phi: prior.sigma_phi,
        sigma_theta: prior.sigma_theta,
        noise_seed: cfg.noise_seed,
        checkpoint_hash: model.fingerprint(),
        latent_mc_std_error: se,
    }
}

fn check_inputs(model: &VaeModel, prior: &WeightPrior, bound_set: &ImageDataset, cfg: &CertificateConfig) -> Result<()> {
    cfg.loss.validate()?;
    prior.check_layout(model)?;
    check_budget_args(bound_set.count(), cfg.delta)?;
    if bound_set.dim() != model.input_dim() {
        return Err(Error::Shape(format!(
            "bound set has dimension {}, model expects {}",
            bound_set.dim(),
            model.input_dim()
        )));
    }
    Ok(())
}

/// Derandomised certificate for a single noise draw.
pub fn evaluate_certificate(
    model: &VaeModel,
    prior: &WeightPrior,
    bound_set: &ImageDataset,
    cfg: &CertificateConfig,
    mode: CertificateMode,
) -> Result<Certificate> {
    check_inputs(model, prior, bound_set, cfg)?;
    let (eps_phi, eps_theta) = certificate_noise(model, prior, cfg.noise_seed);
    let drawn = Drawn { eps_phi, eps_theta };
    let n = bound_set.count();
    let budget = derandomised_budget(model.phi(), model.theta(), prior, &drawn.eps_phi, &drawn.eps_theta, n, cfg.delta)?;
    let risk = match mode {
        CertificateMode::Perturbed => risk_at(model, Some(&drawn), bound_set, cfg)?,
        CertificateMode::SmallNoiseApprox => risk_at(model, None, bound_set, cfg)?,
    };
    Ok(build(CertificateKind::Derandomised, Some(mode), risk, budget, model, prior, n, cfg))
}

/// The three certificates reported for a trained model: derandomised
/// (perturbed), derandomised (small-noise approximation) and noise-free.
/// The noise-free certificate inverts through the perturbed empirical risk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateSet {
    pub derandomised: Certificate,
    pub small_noise_approx: Certificate,
    pub noise_free: Certificate,
}

impl CertificateSet {
    pub fn all(&self) -> [&Certificate; 3] {
        [&self.derandomised, &self.small_noise_approx, &self.noise_free]
    }
}

pub fn evaluate_certificates(
    model: &VaeModel,
    prior: &WeightPrior,
    bound_set: &ImageDataset,
    cfg: &CertificateConfig,
) -> Result<CertificateSet> {
    check_inputs(model, prior, bound_set, cfg)?;
    let (eps_phi, eps_theta) = certificate_noise(model, prior, cfg.noise_seed);
    let drawn = Drawn { eps_phi, eps_theta };
    let n = bound_set.count();
    let budget = derandomised_budget(model.phi(), model.theta(), prior, &drawn.eps_phi, &drawn.eps_theta, n, cfg.delta)?;
    let perturbed = risk_at(model, Some(&drawn), bound_set, cfg)?;
    let clean = risk_at(model, None, bound_set, cfg)?;
    let nf_budget = noise_free_budget(model.phi(), model.theta(), prior, n, cfg.delta)?;
    Ok(CertificateSet {
        derandomised: build(
            CertificateKind::Derandomised,
            Some(CertificateMode::Perturbed),
            perturbed,
            budget,
            model,
            prior,
            n,
            cfg,
        ),
        small_noise_approx: build(
            CertificateKind::Derandomised,
            Some(CertificateMode::SmallNoiseApprox),
            clean,
            budget,
            model,
            prior,
            n,
            cfg,
        ),
        noise_free: build(CertificateKind::NoiseFree, None, perturbed, nf_budget, model, prior, n, cfg),
    })
}

/// Randomised-bound values at `Q = N(φ, s_φ² I) ⊗ N(θ, s_θ² I)` from a Monte
/// Carlo estimate of `E_Q[R̂]`. The estimation error is not accounted for,
/// so these are diagnostics rather than certificates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomisedBoundReport {
    pub empirical_loss_mc: f64,
    pub weight_samples: usize,
    pub kl_phi: f64,
    pub kl_theta: f64,
    pub mcallester: f64,
    pub quadratic: f64,
    pub s_phi: f64,
    pub s_theta: f64,
    /// Set when a scale fell below [`MIN_DIAGNOSTIC_SCALE`] and was raised to it.
    pub scale_clamped: bool,
    pub note: String,
}

pub fn randomised_bound_report(
    model: &VaeModel,
    prior: &WeightPrior,
    scales: &PosteriorScale,
    bound_set: &ImageDataset,
    cfg: &CertificateConfig,
    weight_samples: usize,
) -> Result<RandomisedBoundReport> {
    check_inputs(model, prior, bound_set, cfg)?;
    if weight_samples == 0 {
        return Err(Error::Config("at least one weight sample is required".into()));
    }
    let mut scale_clamped = false;
    let mut clamp = |s: f64| {
        if s < MIN_DIAGNOSTIC_SCALE {
            scale_clamped = true;
            MIN_DIAGNOSTIC_SCALE
        } else {
            s
        }
    };
    let (s_phi, s_theta) = (clamp(scales.s_phi()), clamp(scales.s_theta()));

    let mut weight_rng = RngStream::indexed(cfg.noise_seed, Substream::CertificateNoise, 1);
    let mut latent_rng = RngStream::indexed(cfg.noise_seed, Substream::Evaluation, 1);
    let mut total = 0.0;
    for _ in 0..weight_samples {
        let mut phi = model.phi().clone();
        let mut eps = phi.zeros_like();
        weight_rng.fill_gaussian(eps.as_mut_slice());
        phi.axpy(s_phi, &eps);
        let mut theta = model.theta().clone();
        let mut eps = theta.zeros_like();
        weight_rng.fill_gaussian(eps.as_mut_slice());
        theta.axpy(s_theta, &eps);
        total += empirical_risk(&model.with_params(phi, theta)?, bound_set, &cfg.loss, &mut latent_rng)?.0;
    }
    let r = total / weight_samples as f64;

    let kl_phi = gaussian_weight_kl(model.phi(), &prior.phi0, s_phi * s_phi, prior.sigma_phi.powi(2))?;
    let kl_theta = gaussian_weight_kl(model.theta(), &prior.theta0, s_theta * s_theta, prior.sigma_theta.powi(2))?;
    let n = bound_set.count() as f64;
    let b = (kl_phi + kl_theta + confidence_term(bound_set.count(), cfg.delta)) / (2.0 * n);
    Ok(RandomisedBoundReport {
        empirical_loss_mc: r,
        weight_samples,
        kl_phi,
        kl_theta,
        mcallester: r + b.sqrt(),
        quadratic: quadratic_bound(r, b)?,
        s_phi,
        s_theta,
        scale_clamped,
        note: "diagnostic (no MC correction)".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn kl_of_equal_arguments_is_zero() {
        assert_eq!(binary_kl(0.3, 0.3), 0.0);
    }

    #[test]
    fn kl_from_zero() {
        for p in [0.01, 0.3, 0.9] {
            assert_relative_eq!(binary_kl(0.0, p), -(1.0 - p).ln(), max_relative = 1e-14);
        }
    }

    #[test]
    fn kl_degenerate_reference() {
        assert_eq!(binary_kl(0.2, 0.0), f64::INFINITY);
        assert_eq!(binary_kl(0.2, 1.0), f64::INFINITY);
        assert_eq!(binary_kl(1.0, 1.0), 0.0);
    }

    #[test]
    fn inverse_with_zero_budget_is_identity() {
        for p in [0.0, 0.123, 0.5, 1.0] {
            assert_eq!(kl_inverse(p, 0.0), p);
        }
    }

    #[test]
    fn inverse_from_zero_is_closed_form() {
        for c in [1e-6, 0.01, 0.5, 3.0] {
            assert!((kl_inverse(0.0, c) - (1.0 - (-c).exp())).abs() < 1e-12);
        }
    }

    #[test]
    fn inverse_inverts() {
        for &(p, c) in &[(0.1, 0.01), (0.5, 0.2), (0.02, 1e-4), (0.9, 0.05)] {
            let q = kl_inverse(p, c);
            assert!(q >= p && q <= 1.0);
            assert!((binary_kl(p, q) - c).abs() < 1e-10, "p={p} c={c} q={q}");
        }
    }

    #[test]
    fn huge_budget_saturates_at_one() {
        let q = kl_inverse(0.4, 1e6);
        assert!(q > 1.0 - 1e-12 && q <= 1.0);
    }
}
