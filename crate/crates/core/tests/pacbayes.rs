mod common;

use common::*;
use pbvae::data::{ImageDataset, SplitTag};
use pbvae::nn::{AdamConfig, InitScheme, RngStream, Substream};
use pbvae::pacbayes::{
    confidence_term, gaussian_weight_kl, mcallester_objective, mcallester_penalty, pacbayes_objective_with_noise,
    perturb_weights, quadratic_bound, train_posterior, BoundKind, NoiseDraw, PacBayesConfig, PosteriorScale,
    PosteriorTraining, WeightPrior,
};
use pbvae::vae::{LossConfig, VaeArchitecture, VaeModel};
use rand::Rng;

fn model(seed: u64) -> VaeModel {
    let arch = VaeArchitecture::new(16, 2, vec![8]).unwrap();
    VaeModel::init(arch, InitScheme::ClampedNormal, &mut RngStream::new(seed, Substream::Init)).unwrap()
}

fn config(kind: BoundKind, lambda: f64) -> PacBayesConfig {
    PacBayesConfig {
        delta: 0.05,
        n_bound: 500,
        bound_kind: kind,
        kl_attenuation: lambda,
        weight_noise_samples: 1,
    }
}

#[test]
fn weight_kl_matches_coordinatewise_sum() {
    let mut r = rng(1);
    for _ in 0..20 {
        let m = model(r.gen());
        let mut prior = m.phi().clone();
        prior.as_mut_slice().iter_mut().for_each(|v| *v += 0.1 * normal(&mut r));
        let (s, sigma): (f64, f64) = (r.gen_range(0.01..0.5), r.gen_range(0.01..0.5));
        // Σ_k [log(σ/s) + (s² + (w_k − p_k)²)/(2σ²) − 1/2]
        let expected: f64 = m
            .phi()
            .as_slice()
            .iter()
            .zip(prior.as_slice())
            .map(|(w, p)| (sigma / s).ln() + (s * s + (w - p).powi(2)) / (2.0 * sigma * sigma) - 0.5)
            .sum();
        let got = gaussian_weight_kl(m.phi(), &prior, s * s, sigma * sigma).unwrap();
        assert!((got - expected).abs() < 1e-9 * expected.abs().max(1.0), "{got} vs {expected}");
    }
}

#[test]
fn weight_kl_is_zero_at_the_prior_and_rejects_bad_input() {
    let m = model(0);
    assert_eq!(gaussian_weight_kl(m.phi(), m.phi(), 0.01, 0.01).unwrap(), 0.0);
    assert!(gaussian_weight_kl(m.phi(), m.phi(), 0.0, 0.01).is_err());
    assert!(gaussian_weight_kl(m.phi(), m.theta(), 0.01, 0.01).is_err());
}

#[test]
fn penalty_attenuates_only_the_kl() {
    let cfg = config(BoundKind::Mcallester, 0.25);
    let (kl, n) = (37.0, 500.0);
    let conf = (2.0 * f64::sqrt(n) / 0.05).ln();
    assert!((confidence_term(500, 0.05) - conf).abs() < 1e-15);
    let expected = ((0.25 * kl + conf) / (2.0 * n)).sqrt();
    assert!((mcallester_penalty(kl, &cfg).unwrap() - expected).abs() < 1e-15);
    // λ = 0 leaves the confidence term.
    let zero = mcallester_penalty(kl, &config(BoundKind::Mcallester, 0.0)).unwrap();
    assert!((zero - (conf / (2.0 * n)).sqrt()).abs() < 1e-15);
}

#[test]
fn quadratic_bound_closed_form() {
    assert!((quadratic_bound(0.3, 0.0).unwrap() - 0.3).abs() < 1e-15);
    let (r, b) = (0.2f64, 0.05f64);
    let expected = r + 2.0 * b + 2.0 * (b * (r + b)).sqrt();
    assert!((quadratic_bound(r, b).unwrap() - expected).abs() < 1e-15);
    assert!(quadratic_bound(0.1, -0.01).is_err());
}

#[test]
fn perturbation_records_its_noise() {
    let m = model(1);
    let mut rng = RngStream::new(4, Substream::WeightNoise);
    let (noisy, eps) = perturb_weights(m.phi(), 0.05, &mut rng);
    for ((a, w), e) in noisy.as_slice().iter().zip(m.phi().as_slice()).zip(eps.as_slice()) {
        assert!((a - (w + 0.05 * e)).abs() < 1e-15);
    }
}

#[test]
fn objective_value_is_consistent_with_its_parts() {
    let mut r = rng(5);
    let m = model(5);
    let prior = WeightPrior::centred_at(&model(6), 0.05, 0.08).unwrap();
    let scales = PosteriorScale::initial(&prior);
    let x = binary_tensor(&mut r, 6, 16, 0.4);
    let loss = LossConfig::default();
    let mut wr = RngStream::new(0, Substream::WeightNoise);
    let mut lr = RngStream::new(0, Substream::LatentNoise);
    let noise = vec![NoiseDraw::sample(&m, 6, 1, &mut wr, &mut lr)];

    let mc = config(BoundKind::Mcallester, 0.5);
    let g = pacbayes_objective_with_noise(&m, &prior, &scales, &x, &noise, &mc, &loss).unwrap();
    let kl_phi = gaussian_weight_kl(m.phi(), &prior.phi0, scales.s_phi().powi(2), 0.05f64.powi(2)).unwrap();
    let kl_theta = gaussian_weight_kl(m.theta(), &prior.theta0, scales.s_theta().powi(2), 0.08f64.powi(2)).unwrap();
    assert!((g.kl_phi - kl_phi).abs() < 1e-9 * kl_phi);
    assert!((g.kl_theta - kl_theta).abs() < 1e-9 * kl_theta);
    let expected = g.recon_bounded + mcallester_penalty(kl_phi, &mc).unwrap() + mcallester_penalty(kl_theta, &mc).unwrap();
    assert!((g.value - expected).abs() < 1e-12);
    assert!((0.0..=1.0).contains(&g.recon_bounded));

    let q = config(BoundKind::Quadratic, 0.5);
    let gq = pacbayes_objective_with_noise(&m, &prior, &scales, &x, &noise, &q, &loss).unwrap();
    let b = (0.5 * (kl_phi + kl_theta) + confidence_term(500, 0.05)) / 1000.0;
    assert!((gq.value - quadratic_bound(gq.recon_bounded, b).unwrap()).abs() < 1e-12);
}

#[test]
fn kl_vanishes_when_posterior_equals_prior() {
    let m = model(8);
    let prior = WeightPrior::centred_at(&m, 0.05, 0.05).unwrap();
    let scales = PosteriorScale::from_scales(0.05, 0.05);
    let x = pbvae::nn::Tensor::matrix(2, 16, vec![0.0; 32]).unwrap();
    let cfg = config(BoundKind::Mcallester, 1.0);
    let loss = LossConfig::default();
    let mut a = RngStream::new(1, Substream::WeightNoise);
    let mut b = RngStream::new(1, Substream::LatentNoise);
    let noise = vec![NoiseDraw::sample(&m, 2, 1, &mut a, &mut b)];
    let g = pacbayes_objective_with_noise(&m, &prior, &scales, &x, &noise, &cfg, &loss).unwrap();
    assert!(g.kl_phi.abs() < 1e-12 && g.kl_theta.abs() < 1e-12);
    let conf = (confidence_term(500, 0.05) / 1000.0).sqrt();
    assert!((g.penalty_phi - conf).abs() < 1e-12 && (g.penalty_theta - conf).abs() < 1e-12);
}

#[test]
fn fresh_noise_objectives_are_seed_deterministic() {
    let mut r = rng(9);
    let m = model(9);
    let prior = WeightPrior::centred_at(&m, 0.05, 0.05).unwrap();
    let scales = PosteriorScale::initial(&prior);
    let x = binary_tensor(&mut r, 4, 16, 0.5);
    let cfg = config(BoundKind::Mcallester, 1.0);
    let eval = || {
        let mut a = RngStream::new(2, Substream::WeightNoise);
        let mut b = RngStream::new(2, Substream::LatentNoise);
        mcallester_objective(&m, &prior, &scales, &x, &cfg, &LossConfig::default(), &mut a, &mut b)
            .unwrap()
            .value
    };
    assert_eq!(eval(), eval());
}

#[test]
fn posterior_training_reduces_the_objective() {
    let imgs = synthetic_images(200, 4);
    let bits: Vec<u8> = imgs.data.iter().map(|&p| u8::from(p > 127)).collect();
    let data = ImageDataset::new(bits, 64, "synthetic", SplitTag::Bound).unwrap();
    let arch = VaeArchitecture::new(64, 2, vec![16]).unwrap();
    let prior_model = VaeModel::init(arch, InitScheme::ClampedNormal, &mut RngStream::new(0, Substream::Init)).unwrap();
    let prior = WeightPrior::centred_at(&prior_model, 0.05, 0.05).unwrap();
    let mut m = prior_model.clone();
    let mut scales = PosteriorScale::initial(&prior);
    let cfg = PosteriorTraining {
        pacbayes: PacBayesConfig {
            n_bound: 200,
            ..config(BoundKind::Mcallester, 1.0)
        },
        epochs: 20,
        batch_size: 20,
        adam: AdamConfig::with_learning_rate(1e-2),
        loss: LossConfig::default(),
        seed: 0,
    };
    let epochs = train_posterior(&mut m, &mut scales, &prior, &data, &cfg, |_| {}).unwrap();
    assert_eq!(epochs.len(), 20);
    assert!(epochs.last().unwrap().objective < epochs[0].objective, "{:?}", epochs.iter().map(|e| e.objective).collect::<Vec<_>>());
    assert!(scales.s_phi() > 0.0 && scales.s_theta() > 0.0);
}
