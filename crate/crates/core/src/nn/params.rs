use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HiddenActivation {
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Identity,
    Sigmoid,
}

/// Architecture of a dense feed-forward network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub output_dim: usize,
    pub hidden_activation: HiddenActivation,
    pub output_activation: OutputActivation,
}

impl MlpConfig {
    pub fn new(
        input_dim: usize,
        hidden_widths: Vec<usize>,
        output_dim: usize,
        output_activation: OutputActivation,
    ) -> Result<Self> {
        let config = Self {
            input_dim,
            hidden_widths,
            output_dim,
            hidden_activation: HiddenActivation::Relu,
            output_activation,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_widths.contains(&0) {
            return Err(Error::Config(format!(
                "all layer widths must be positive: {} -> {:?} -> {}",
                self.input_dim, self.hidden_widths, self.output_dim
            )));
        }
        Ok(())
    }

    pub fn layer_shapes(&self) -> Vec<LayerShape> {
        let mut dims = Vec::with_capacity(self.hidden_widths.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_widths);
        dims.push(self.output_dim);
        dims.windows(2)
            .map(|w| LayerShape {
                in_dim: w[0],
                out_dim: w[1],
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(LayerShape::param_count).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LayerShape {
    pub fn param_count(&self) -> usize {
        self.out_dim * (self.in_dim + 1)
    }
}

/// All weights and biases of one network in a single flat buffer.
///
/// Layer `i` occupies `out * in` weight entries (row-major, shape
/// `(out, in)`) followed by `out` bias entries. Keeping one contiguous buffer
/// makes the vector arithmetic needed by the weight-space objectives (norms,
/// perturbations, optimiser moments) a plain slice operation.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    shapes: Vec<LayerShape>,
    offsets: Vec<usize>,
    data: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(shapes: &[LayerShape]) -> Result<Self> {
        let total = shapes.iter().map(LayerShape::param_count).sum();
        Self::from_flat(shapes, vec![0.0; total])
    }

    pub fn from_flat(shapes: &[LayerShape], data: Vec<f64>) -> Result<Self> {
        if shapes.is_empty() {
            return Err(Error::Shape("parameter vector needs at least one layer".into()));
        }
        for (i, pair) in shapes.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::LayerShape {
                    layer: i + 1,
                    detail: format!(
                        "input width {} does not chain from previous output {}",
                        pair[1].in_dim, pair[0].out_dim
                    ),
                });
            }
        }
        if let Some(i) = shapes.iter().position(|s| s.in_dim == 0 || s.out_dim == 0) {
            return Err(Error::LayerShape {
                layer: i,
                detail: "zero-width layer".into(),
            });
        }
        let mut offsets = Vec::with_capacity(shapes.len() + 1);
        let mut acc = 0;
        for s in shapes {
            offsets.push(acc);
            acc += s.param_count();
        }
        offsets.push(acc);
        if acc != data.len() {
            return Err(Error::Shape(format!(
                "layout needs {acc} parameters, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shapes: shapes.to_vec(),
            offsets,
            data,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            shapes: self.shapes.clone(),
            offsets: self.offsets.clone(),
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn total_count(&self) -> usize {
        self.data.len()
    }

    pub fn num_layers(&self) -> usize {
        self.shapes.len()
    }

    pub fn layer_shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.shapes == other.shapes
    }

    pub(crate) fn ensure_same_layout(&self, other: &ParamVector, what: &str) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: parameter layouts differ ({} vs {} parameters)",
                self.total_count(),
                other.total_count()
            )))
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.data
    }

    pub fn weight(&self, layer: usize) -> &[f64] {
        let s = self.shapes[layer];
        let start = self.offsets[layer];
        &self.data[start..start + s.in_dim * s.out_dim]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        let s = self.shapes[layer];
        let start = self.offsets[layer] + s.in_dim * s.out_dim;
        &self.data[start..start + s.out_dim]
    }

    /// Mutable `(weight, bias)` views of one layer.
    pub fn layer_mut(&mut self, layer: usize) -> (&mut [f64], &mut [f64]) {
        let s = self.shapes[layer];
        let block = &mut self.data[self.offsets[layer]..self.offsets[layer + 1]];
        block.split_at_mut(s.in_dim * s.out_dim)
    }

    /// Flat range of the given layer's parameters.
    pub fn layer_range(&self, layer: usize) -> std::ops::Range<usize> {
        self.offsets[layer]..self.offsets[layer + 1]
    }

    /// Index of the layer owning flat coordinate `index`.
    pub fn layer_of(&self, index: usize) -> usize {
        self.offsets.partition_point(|&o| o <= index) - 1
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// `‖self − other‖²`
    pub fn distance_sq(&self, other: &ParamVector) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &ParamVector) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    /// `self − other`
    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// First layer holding a non-finite entry, if any.
    pub fn first_non_finite_layer(&self) -> Option<usize> {
        self.data
            .iter()
            .position(|v| !v.is_finite())
            .map(|i| self.layer_of(i))
    }
}
