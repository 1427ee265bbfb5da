mod common;

use common::*;
use pbvae::data::{ImageDataset, SplitTag};
use pbvae::nn::{AdamConfig, InitScheme, RngStream, Substream, Tensor};
use pbvae::vae::{
    bernoulli_log_likelihood, beta_vae_objective, latent_kl, latent_with_noise, train_beta_vae, BetaVaeTraining,
    EncoderOutput, LossConfig, ObjectiveTerms, VaeArchitecture, VaeModel, LOG_SIGMA_RANGE,
};
use rand::Rng;

fn model(seed: u64, input: usize, latent: usize, hidden: Vec<usize>) -> VaeModel {
    let arch = VaeArchitecture::new(input, latent, hidden).unwrap();
    VaeModel::init(arch, InitScheme::ClampedNormal, &mut RngStream::new(seed, Substream::Init)).unwrap()
}

#[test]
fn latent_kl_matches_per_coordinate_formula() {
    let mut r = rng(1);
    for _ in 0..50 {
        let d = r.gen_range(1..6);
        let mu = normals(&mut r, d);
        let ls: Vec<f64> = (0..d).map(|_| r.gen_range(-3.0..2.0)).collect();
        let enc = EncoderOutput {
            mu: Tensor::matrix(1, d, mu.clone()).unwrap(),
            log_sigma: Tensor::matrix(1, d, ls.clone()).unwrap(),
        };
        // KL(N(μ, σ²) ‖ N(0, 1)) = log(1/σ) + (σ² + μ²)/2 − 1/2.
        let expected: f64 = (0..d)
            .map(|k| -ls[k] + 0.5 * ((2.0 * ls[k]).exp() + mu[k] * mu[k]) - 0.5)
            .sum();
        assert!((latent_kl(&enc)[0] - expected).abs() < 1e-12 * (1.0 + expected));
    }
}

#[test]
fn bernoulli_likelihood_matches_direct_sum_and_rejects_unclamped() {
    let x = Tensor::matrix(1, 3, vec![1.0, 0.0, 1.0]).unwrap();
    let w = Tensor::matrix(1, 3, vec![0.9, 0.2, 0.5]).unwrap();
    let ll = bernoulli_log_likelihood(&x, &w, 5e-3).unwrap()[0];
    let expected = 0.9f64.ln() + 0.8f64.ln() + 0.5f64.ln();
    assert!((ll - expected).abs() < 1e-15);
    let bad = Tensor::matrix(1, 3, vec![1.0, 0.2, 0.5]).unwrap();
    assert!(bernoulli_log_likelihood(&x, &bad, 5e-3).is_err());
}

#[test]
fn decoder_output_is_clamped() {
    let mut m = model(0, 10, 2, vec![8]);
    m.theta_mut().scale(100.0);
    let z = Tensor::matrix(4, 2, vec![3.0, -3.0, 10.0, 1.0, -5.0, 2.0, 0.1, 0.0]).unwrap();
    let w = m.decode(&z, 5e-3).unwrap();
    assert!(w.data().iter().all(|&v| (5e-3..=1.0 - 5e-3).contains(&v)));
    assert!(w.data().iter().any(|&v| v == 5e-3 || v == 1.0 - 5e-3));
}

#[test]
fn bounded_loss_lies_in_unit_interval_even_for_extreme_weights() {
    let mut r = rng(3);
    for i in 0..40 {
        let mut m = model(i, 12, 2, vec![6]);
        let scale = 10f64.powf(r.gen_range(-1.0..3.0));
        m.phi_mut().scale(scale);
        m.theta_mut().scale(scale);
        let x = binary_tensor(&mut r, 6, 12, 0.5);
        let l = m
            .reconstruction_loss(&x, &LossConfig::default(), &mut RngStream::new(i, Substream::Evaluation))
            .unwrap();
        assert!(l.iter().all(|v| (0.0..=1.0).contains(v)), "{l:?}");
    }
}

#[test]
fn encoder_log_sigma_is_clipped() {
    let mut m = model(2, 5, 2, vec![4]);
    m.phi_mut().scale(1e4);
    let x = Tensor::matrix(2, 5, vec![1.0; 10]).unwrap();
    let enc = m.encode(&x).unwrap();
    let (lo, hi) = LOG_SIGMA_RANGE;
    assert!(enc.log_sigma.data().iter().all(|v| (lo..=hi).contains(v)));
}

#[test]
fn objective_is_mean_of_reconstruction_plus_weighted_kl() {
    let mut r = rng(4);
    let m = model(4, 16, 3, vec![10]);
    let x = binary_tensor(&mut r, 7, 16, 0.3);
    let eps = Tensor::matrix(7, 3, normals(&mut r, 21)).unwrap();
    let beta = 0.37;
    let p_min = 5e-3;
    let out = m
        .objective_with_noise(&x, std::slice::from_ref(&eps), ObjectiveTerms { recon_scale: 1.0, beta, p_min }, None)
        .unwrap();

    let enc = m.encode(&x).unwrap();
    let z = latent_with_noise(&enc, &eps);
    let w = m.decode(&z, p_min).unwrap();
    let ll = bernoulli_log_likelihood(&x, &w, p_min).unwrap();
    let kl = latent_kl(&enc);
    let expected = (0..7).map(|i| -ll[i] + beta * kl[i]).sum::<f64>() / 7.0;
    assert!((out.value - expected).abs() < 1e-10 * expected.abs());

    // β = 0 leaves only the reconstruction term.
    let zero = m
        .objective_with_noise(&x, &[eps], ObjectiveTerms { recon_scale: 1.0, beta: 0.0, p_min }, None)
        .unwrap();
    assert!((zero.value - zero.recon_nll).abs() < 1e-12 * zero.value);
}

#[test]
fn beta_vae_objective_rejects_negative_beta() {
    let m = model(5, 8, 2, vec![4]);
    let x = Tensor::matrix(1, 8, vec![0.0; 8]).unwrap();
    let mut rng = RngStream::new(0, Substream::LatentNoise);
    assert!(beta_vae_objective(&m, &x, -0.1, &LossConfig::default(), &mut rng).is_err());
}

#[test]
fn training_lowers_the_objective_and_is_reproducible() {
    let imgs = synthetic_images(200, 9);
    let bits: Vec<u8> = imgs.data.iter().map(|&p| u8::from(p as f64 > 127.5)).collect();
    let data = ImageDataset::new(bits, 64, "synthetic", SplitTag::Prior).unwrap();
    let cfg = BetaVaeTraining {
        beta: 0.5,
        dropout_rate: 0.1,
        epochs: 15,
        batch_size: 20,
        adam: AdamConfig::with_learning_rate(5e-3),
        loss: LossConfig::default(),
        seed: 3,
    };
    let run = || {
        let mut m = model(7, 64, 2, vec![16]);
        let mut epochs = Vec::new();
        train_beta_vae(&mut m, &data, &cfg, |e| epochs.push(e.objective)).unwrap();
        (m.fingerprint(), epochs)
    };
    let (fp_a, epochs) = run();
    let (fp_b, _) = run();
    assert_eq!(fp_a, fp_b);
    assert_eq!(epochs.len(), 15);
    assert!(epochs.last().unwrap() < &(0.8 * epochs[0]), "{epochs:?}");
}
