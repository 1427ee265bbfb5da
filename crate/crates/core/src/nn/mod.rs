//! Minimal dense network engine: tensors, parameter buffers, forward and
//! reverse passes for ReLU MLPs, Adam, dropout, and seeded noise.

mod adam;
mod mlp;
mod params;
mod rng;
mod tensor;

use serde::{Deserialize, Serialize};

pub use adam::{AdamConfig, AdamState};
pub use mlp::{mlp_backward, mlp_backward_params, mlp_forward, sigmoid, Dropout, ForwardCache};
pub use params::{HiddenActivation, LayerShape, MlpConfig, OutputActivation, ParamVector};
pub use rng::{gaussian_sample, RngStream, Substream};
pub use tensor::Tensor;

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    Zero,
    /// Weights `N(0, 1/n_in)` truncated to two standard deviations; zero biases.
    ClampedNormal,
}

/// Truncation point of the clamped-normal initialiser, in standard deviations.
pub const INIT_TRUNCATION: f64 = 2.0;

pub fn init_params(config: &MlpConfig, scheme: InitScheme, rng: &mut RngStream) -> Result<ParamVector> {
    config.validate()?;
    let mut params = ParamVector::zeros(&config.layer_shapes())?;
    if scheme == InitScheme::ClampedNormal {
        for l in 0..params.num_layers() {
            let in_dim = params.layer_shapes()[l].in_dim;
            let std = 1.0 / (in_dim as f64).sqrt();
            let (w, _) = params.layer_mut(l);
            for v in w {
                let z = loop {
                    let z = rng.gaussian();
                    if z.abs() <= INIT_TRUNCATION {
                        break z;
                    }
                };
                *v = z * std;
            }
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_scheme_is_all_zero() {
        let config = MlpConfig::new(4, vec![3], 2, OutputActivation::Identity).unwrap();
        let p = init_params(&config, InitScheme::Zero, &mut RngStream::new(0, Substream::Init)).unwrap();
        assert!(p.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn clamped_normal_respects_bound_and_zero_bias() {
        let config = MlpConfig::new(784, vec![16], 4, OutputActivation::Identity).unwrap();
        let p = init_params(&config, InitScheme::ClampedNormal, &mut RngStream::new(5, Substream::Init)).unwrap();
        for l in 0..p.num_layers() {
            let n_in = p.layer_shapes()[l].in_dim as f64;
            let bound = 2.0 / n_in.sqrt();
            assert!(p.weight(l).iter().all(|w| w.abs() <= bound));
            assert!(p.bias(l).iter().all(|&b| b == 0.0));
        }
    }
}
