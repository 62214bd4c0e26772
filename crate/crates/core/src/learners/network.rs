//! Dense feed-forward stacks: initialisation, forward pass with cache, and
//! backpropagation.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seed;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Tanh => z.mapv_inplace(f64::tanh),
        }
    }

    /// Multiply `grad` in place by the derivative, given the activated output.
    fn backprop(self, grad: &mut Array2<f64>, activated: &Array2<f64>) {
        match self {
            Activation::Relu => Zip::from(grad).and(activated).for_each(|g, &a| {
                if a <= 0.0 {
                    *g = 0.0;
                }
            }),
            Activation::Tanh => Zip::from(grad).and(activated).for_each(|g, &a| *g *= 1.0 - a * a),
        }
    }
}

/// Layer shapes of a base learner. An empty `hidden_dims` is softmax regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    #[serde(default)]
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    #[serde(default)]
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

fn default_init_scale() -> f64 {
    1.0
}

impl NetworkSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize) -> Self {
        Self { input_dim, hidden_dims, output_dim, activation: Activation::Relu, init_scale: 1.0 }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_output_dim(&self, output_dim: usize) -> Self {
        Self { output_dim, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::ShapeMismatch(format!("all layer widths must be >= 1: {self:?}")));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::InvalidConfig(format!("init_scale must be > 0, got {}", self.init_scale)));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every dense layer, bottom to top.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// Number of feature (hidden) layers below the classifier.
    pub fn feature_layers(&self) -> usize {
        self.hidden_dims.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `fan_in x fan_out`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { weight: Array2::zeros((fan_in, fan_out)), bias: Array1::zeros(fan_out) }
    }

    pub(crate) fn init(fan_in: usize, fan_out: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let bound = scale / (fan_in as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-bound..bound));
        Self { weight, bias: Array1::zeros(fan_out) }
    }

    pub fn n_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub(crate) fn zeros_like(&self) -> Self {
        Self::zeros(self.weight.nrows(), self.weight.ncols())
    }

    pub(crate) fn values(&self) -> impl Iterator<Item = &f64> {
        self.weight.iter().chain(self.bias.iter())
    }

    pub(crate) fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.iter_mut().chain(self.bias.iter_mut())
    }
}

/// Parameters of a dense stack.
///
/// A full network ends in a linear classifier layer (`linear_top`); a
/// shared trunk applies the activation after every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    layers: Vec<Dense>,
    activation: Activation,
    linear_top: bool,
}

/// Intermediate values kept for backpropagation.
pub(crate) struct ForwardCache {
    /// `outputs[0]` is the input, `outputs[i + 1]` the output of layer `i`.
    pub outputs: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.outputs.last().expect("cache holds at least the input")
    }
}

impl NetworkParams {
    pub fn from_layers(layers: Vec<Dense>, activation: Activation, linear_top: bool) -> Result<Self> {
        for w in layers.windows(2) {
            if w[0].weight.ncols() != w[1].weight.nrows() {
                return Err(Error::ShapeMismatch(format!(
                    "layer output width {} does not feed input width {}",
                    w[0].weight.ncols(),
                    w[1].weight.nrows()
                )));
            }
        }
        for l in &layers {
            if l.bias.len() != l.weight.ncols() {
                return Err(Error::ShapeMismatch("bias length differs from layer width".into()));
            }
        }
        Ok(Self { layers, activation, linear_top })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn linear_top(&self) -> bool {
        self.linear_top
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.nrows())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.ncols())
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Dense::n_params).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.values().all(|v| v.is_finite()))
    }

    /// Split into the bottom `k` layers (activated, usable as a trunk) and
    /// the rest.
    pub(crate) fn split_at(&self, k: usize) -> (NetworkParams, Vec<Dense>) {
        let bottom =
            NetworkParams { layers: self.layers[..k].to_vec(), activation: self.activation, linear_top: false };
        (bottom, self.layers[k..].to_vec())
    }

    pub(crate) fn check_input(&self, features: &ArrayView2<f64>) -> Result<()> {
        if features.ncols() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "feature width {} does not match network input {}",
                features.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub(crate) fn forward_cached(&self, x: ArrayView2<f64>) -> ForwardCache {
        let mut outputs = Vec::with_capacity(self.layers.len() + 1);
        outputs.push(x.to_owned());
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = outputs[i].dot(&layer.weight);
            z += &layer.bias;
            if !(self.linear_top && i == last) {
                self.activation.apply(&mut z);
            }
            outputs.push(z);
        }
        ForwardCache { outputs }
    }

    /// Output of the stack without keeping intermediates.
    pub(crate) fn forward_output(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let last = self.layers.len().saturating_sub(1);
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight);
            z += &layer.bias;
            if !(self.linear_top && i == last) {
                self.activation.apply(&mut z);
            }
            h = z;
        }
        h
    }

    /// Backpropagate `grad_out` (gradient w.r.t. the stack output) and return
    /// per-layer gradients plus, if requested, the gradient w.r.t. the input.
    pub(crate) fn backward(
        &self,
        cache: &ForwardCache,
        grad_out: Array2<f64>,
        want_input_grad: bool,
    ) -> (Vec<Dense>, Option<Array2<f64>>) {
        let n = self.layers.len();
        let mut grads: Vec<Option<Dense>> = vec![None; n];
        let mut delta = grad_out;
        for i in (0..n).rev() {
            if !(self.linear_top && i == n - 1) {
                self.activation.backprop(&mut delta, &cache.outputs[i + 1]);
            }
            let layer = &self.layers[i];
            let gw = cache.outputs[i].t().dot(&delta);
            let gb = delta.sum_axis(Axis(0));
            if i > 0 || want_input_grad {
                delta = delta.dot(&layer.weight.t());
            }
            grads[i] = Some(Dense { weight: gw, bias: gb });
        }
        let grads = grads.into_iter().map(|g| g.expect("every layer visited")).collect();
        (grads, if want_input_grad || n == 0 { Some(delta) } else { None })
    }
}

/// Weights uniform in `±init_scale / sqrt(fan_in)`, zero biases.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> Result<NetworkParams> {
    spec.validate()?;
    let mut rng = seed::rng(seed, &[INIT_STREAM]);
    let layers = spec.layer_shapes().into_iter().map(|(i, o)| Dense::init(i, o, spec.init_scale, &mut rng)).collect();
    Ok(NetworkParams { layers, activation: spec.activation, linear_top: true })
}

pub(crate) fn init_layers(shapes: &[(usize, usize)], scale: f64, seed: u64) -> Vec<Dense> {
    let mut rng = seed::rng(seed, &[INIT_STREAM]);
    shapes.iter().map(|&(i, o)| Dense::init(i, o, scale, &mut rng)).collect()
}

const INIT_STREAM: u64 = 0x1417;

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    p
}

/// Smallest index of the row maximum.
pub(crate) fn argmax_rows(values: &Array2<f64>) -> Vec<usize> {
    values
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
