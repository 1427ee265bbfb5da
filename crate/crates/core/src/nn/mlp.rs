//! Forward and reverse passes for the dense ReLU network family.
//!
//! Layer `l` computes `z = a W_lᵀ + b_l` for a batch `a` of shape
//! `(batch, in)`. Hidden layers apply ReLU and then (in training) inverted
//! dropout; the last layer applies the configured output activation.

use super::params::{LayerShape, MlpConfig, OutputActivation, ParamVector};
use super::rng::RngStream;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Dropout applied to hidden activations.
pub enum Dropout<'a> {
    /// Evaluation mode: activations pass through untouched.
    Off,
    /// Training mode with inverted scaling `1 / (1 - rate)` on kept units.
    On { rate: f64, rng: &'a mut RngStream },
}

/// Everything the reverse pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    shapes: Vec<LayerShape>,
    batch: usize,
    output_activation: OutputActivation,
    /// Input seen by each layer (after activation and dropout of the previous one).
    layer_inputs: Vec<Vec<f64>>,
    /// Pre-activations of the hidden layers.
    hidden_pre: Vec<Vec<f64>>,
    /// Per-unit dropout multipliers (0 or 1/(1-rate)) for each hidden layer.
    dropout_masks: Vec<Option<Vec<f64>>>,
    output: Vec<f64>,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn output(&self) -> &[f64] {
        &self.output
    }

    pub fn hidden_pre_activations(&self) -> &[Vec<f64>] {
        &self.hidden_pre
    }

    /// Sign pattern of every ReLU unit; finite-difference checks use it to
    /// detect steps that cross a kink.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.hidden_pre.iter().flatten().map(|&z| z > 0.0).collect()
    }
}

/// `c (m×n) = beta * c + a (m×k) · b (k×n)` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: every caller passes buffers whose extents cover the strided
    // access pattern for the given (m, k, n); `c` is a distinct row-major
    // buffer of length m*n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_layout(config: &MlpConfig, params: &ParamVector) -> Result<()> {
    let expected = config.layer_shapes();
    let got = params.layer_shapes();
    if expected.len() != got.len() {
        return Err(Error::LayerShape {
            layer: expected.len().min(got.len()),
            detail: format!("config has {} layers, parameters have {}", expected.len(), got.len()),
        });
    }
    for (i, (e, g)) in expected.iter().zip(got).enumerate() {
        if e != g {
            return Err(Error::LayerShape {
                layer: i,
                detail: format!(
                    "config expects {}x{}, parameters hold {}x{}",
                    e.out_dim, e.in_dim, g.out_dim, g.in_dim
                ),
            });
        }
    }
    Ok(())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Runs the network on a `(batch, input_dim)` tensor.
pub fn mlp_forward(
    config: &MlpConfig,
    params: &ParamVector,
    input: &Tensor,
    dropout: Dropout<'_>,
) -> Result<(Tensor, ForwardCache)> {
    check_layout(config, params)?;
    if input.shape().len() != 2 || input.cols() != config.input_dim {
        return Err(Error::LayerShape {
            layer: 0,
            detail: format!(
                "input shape {:?} does not match input width {}",
                input.shape(),
                config.input_dim
            ),
        });
    }
    let (rate, mut dropout_rng) = match dropout {
        Dropout::Off => (0.0, None),
        Dropout::On { rate, rng } => {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
            }
            (rate, Some(rng))
        }
    };

    let shapes = config.layer_shapes();
    let batch = input.rows();
    let last = shapes.len() - 1;
    let mut layer_inputs = Vec::with_capacity(shapes.len());
    let mut hidden_pre = Vec::with_capacity(last);
    let mut dropout_masks = Vec::with_capacity(last);
    let mut current = input.data().to_vec();

    for (l, s) in shapes.iter().enumerate() {
        let (inp, out) = (s.in_dim as isize, s.out_dim);
        let bias = params.bias(l);
        let mut z = Vec::with_capacity(batch * out);
        for _ in 0..batch {
            z.extend_from_slice(bias);
        }
        // z += a · Wᵀ ; W is (out, in) row-major so Wᵀ has strides (1, in).
        gemm(
            batch,
            s.in_dim,
            out,
            &current,
            (inp, 1),
            params.weight(l),
            (1, inp),
            1.0,
            &mut z,
        );
        layer_inputs.push(std::mem::take(&mut current));

        if l == last {
            if config.output_activation == OutputActivation::Sigmoid {
                z.iter_mut().for_each(|v| *v = sigmoid(*v));
            }
            current = z;
        } else {
            let mut a: Vec<f64> = z.iter().map(|&v| v.max(0.0)).collect();
            let mask = match dropout_rng.as_deref_mut() {
                Some(rng) if rate > 0.0 => {
                    let keep = 1.0 / (1.0 - rate);
                    let mask: Vec<f64> = (0..a.len())
                        .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
                        .collect();
                    a.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
                    Some(mask)
                }
                _ => None,
            };
            hidden_pre.push(z);
            dropout_masks.push(mask);
            current = a;
        }
    }

    let output = Tensor::from_raw(vec![batch, config.output_dim], current.clone());
    let cache = ForwardCache {
        shapes,
        batch,
        output_activation: config.output_activation,
        layer_inputs,
        hidden_pre,
        dropout_masks,
        output: current,
    };
    Ok((output, cache))
}

/// Reverse pass returning parameter and input gradients.
pub fn mlp_backward(
    params: &ParamVector,
    cache: &ForwardCache,
    output_gradient: &Tensor,
) -> Result<(ParamVector, Tensor)> {
    let (grads, input_grad) = backward_impl(params, cache, output_gradient, true)?;
    let input_grad = input_grad.expect("input gradient requested");
    let in_dim = cache.shapes[0].in_dim;
    Ok((grads, Tensor::from_raw(vec![cache.batch, in_dim], input_grad)))
}

/// Reverse pass that skips the (unused) gradient with respect to the input.
pub fn mlp_backward_params(
    params: &ParamVector,
    cache: &ForwardCache,
    output_gradient: &Tensor,
) -> Result<ParamVector> {
    backward_impl(params, cache, output_gradient, false).map(|(g, _)| g)
}

fn backward_impl(
    params: &ParamVector,
    cache: &ForwardCache,
    output_gradient: &Tensor,
    want_input_grad: bool,
) -> Result<(ParamVector, Option<Vec<f64>>)> {
    if params.layer_shapes() != cache.shapes.as_slice() {
        return Err(Error::Contract(
            "forward cache was produced by a network with a different layout".into(),
        ));
    }
    let out_dim = cache.shapes.last().map(|s| s.out_dim).unwrap_or(0);
    if output_gradient.len() != cache.batch * out_dim || cache.output.len() != output_gradient.len()
    {
        return Err(Error::Contract(format!(
            "output gradient shape {:?} does not match cached output ({} x {})",
            output_gradient.shape(),
            cache.batch,
            out_dim
        )));
    }

    let batch = cache.batch;
    let mut grads = params.zeros_like();
    let mut delta: Vec<f64> = output_gradient.data().to_vec();
    if cache.output_activation == OutputActivation::Sigmoid {
        for (d, &y) in delta.iter_mut().zip(&cache.output) {
            *d *= y * (1.0 - y);
        }
    }

    for l in (0..cache.shapes.len()).rev() {
        let s = cache.shapes[l];
        let input = &cache.layer_inputs[l];
        {
            let (gw, gb) = grads.layer_mut(l);
            // dW = δᵀ · a ; δ is (batch, out) so δᵀ has strides (1, out).
            gemm(
                s.out_dim,
                batch,
                s.in_dim,
                &delta,
                (1, s.out_dim as isize),
                input,
                (s.in_dim as isize, 1),
                0.0,
                gw,
            );
            for row in delta.chunks_exact(s.out_dim) {
                gb.iter_mut().zip(row).for_each(|(b, d)| *b += d);
            }
        }
        if l == 0 && !want_input_grad {
            return Ok((grads, None));
        }
        // dA = δ · W
        let mut da = vec![0.0; batch * s.in_dim];
        gemm(
            batch,
            s.out_dim,
            s.in_dim,
            &delta,
            (s.out_dim as isize, 1),
            params.weight(l),
            (s.in_dim as isize, 1),
            0.0,
            &mut da,
        );
        if l == 0 {
            return Ok((grads, Some(da)));
        }
        let pre = &cache.hidden_pre[l - 1];
        match &cache.dropout_masks[l - 1] {
            Some(mask) => {
                for ((d, &z), &m) in da.iter_mut().zip(pre).zip(mask) {
                    *d = if z > 0.0 { *d * m } else { 0.0 };
                }
            }
            None => {
                for (d, &z) in da.iter_mut().zip(pre) {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
        }
        delta = da;
    }
    unreachable!("loop returns at layer 0")
}
