use serde::{Deserialize, Serialize};

use super::params::ParamVector;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// Adam moments for a flat parameter buffer, with bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step_count: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Self {
            config,
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
        }
    }

    pub fn for_params(config: AdamConfig, params: &ParamVector) -> Self {
        Self::new(config, params.total_count())
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second_moment
    }

    /// One update of a network's parameters. A non-finite gradient is
    /// rejected before anything is modified.
    pub fn step(&mut self, params: &mut ParamVector, grads: &ParamVector) -> Result<()> {
        params.ensure_same_layout(grads, "adam step")?;
        if let Some(layer) = grads.first_non_finite_layer() {
            return Err(Error::NonFinite {
                what: "gradient",
                layer,
            });
        }
        self.step_slice(params.as_mut_slice(), grads.as_slice())
    }

    /// Update for a raw slice; layer 0 is reported for non-finite entries.
    pub fn step_slice(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "adam state tracks {} values, got {} parameters and {} gradients",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                what: "gradient",
                layer: 0,
            });
        }
        self.step_count += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(
            self.first_moment
                .iter_mut()
                .zip(self.second_moment.iter_mut()),
        ) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_first_step_leaves_params() {
        let mut state = AdamState::new(AdamConfig::default(), 3);
        let mut p = vec![1.0, -2.0, 3.0];
        state.step_slice(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut state = AdamState::new(AdamConfig::with_learning_rate(0.0), 2);
        let mut p = vec![0.5, 0.25];
        for _ in 0..5 {
            state.step_slice(&mut p, &[3.0, -7.0]).unwrap();
        }
        assert_eq!(p, vec![0.5, 0.25]);
        assert_eq!(state.step_count(), 5);
    }

    #[test]
    fn quadratic_trajectory_matches_recurrence() {
        // f(w) = w², w₀ = 1. Recurrence evaluated directly with the textbook
        // formulas in a separate form (explicit bias-corrected learning rate).
        let (lr, b1, b2, eps) = (1e-3_f64, 0.9_f64, 0.999_f64, 1e-8_f64);
        let mut w_ref = 1.0_f64;
        let (mut m, mut v) = (0.0_f64, 0.0_f64);
        let mut expected = Vec::new();
        for t in 1..=3 {
            let g = 2.0 * w_ref;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            w_ref -= lr * m_hat / (v_hat.sqrt() + eps);
            expected.push(w_ref);
        }

        let mut state = AdamState::new(AdamConfig::default(), 1);
        let mut w = [1.0];
        for e in expected {
            let g = [2.0 * w[0]];
            state.step_slice(&mut w, &g).unwrap();
            assert!((w[0] - e).abs() < 1e-12, "{} vs {e}", w[0]);
        }
        // Adam's first steps move by ≈ lr regardless of gradient scale.
        assert!((w[0] - (1.0 - 3e-3)).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_names_layer() {
        use crate::nn::{MlpConfig, OutputActivation};
        let config = MlpConfig::new(2, vec![3], 1, OutputActivation::Identity).unwrap();
        let mut p = ParamVector::zeros(&config.layer_shapes()).unwrap();
        let mut g = p.zeros_like();
        let last = g.total_count() - 1;
        g.as_mut_slice()[last] = f64::NAN;
        let mut state = AdamState::for_params(AdamConfig::default(), &p);
        let err = state.step(&mut p, &g).unwrap_err();
        assert!(matches!(err, Error::NonFinite { layer: 1, .. }), "{err}");
        assert_eq!(state.step_count(), 0);
    }
}
