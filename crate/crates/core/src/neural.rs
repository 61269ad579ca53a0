//! Minimal dense-network engine: fully connected layers, ReLU on hidden
//! layers, exact reverse-mode gradients, and SGD with classical momentum.
//! Sized for the small fixed feed-forward topologies this toolkit trains.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("input has width {got} but the network expects {expected}")]
    ShapeMismatch { got: usize, expected: usize },
    #[error("gradient has width {got} but the network output has width {expected}")]
    OutputGradMismatch { got: usize, expected: usize },
    #[error("stale forward cache: parameters were updated after the forward pass")]
    StaleCache,
}

/// Layer widths (input first, output last) plus the dual-head marker used by
/// encoders whose output splits into equal-width mean / log-variance halves.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layer_widths: Vec<usize>,
    pub dual_head: bool,
}

impl NetworkSpec {
    pub fn new(layer_widths: Vec<usize>, dual_head: bool) -> Result<Self, NeuralError> {
        if layer_widths.len() < 2 {
            return Err(NeuralError::InvalidSpec("need at least input and output widths".into()));
        }
        if layer_widths.iter().any(|&w| w == 0) {
            return Err(NeuralError::InvalidSpec("all widths must be at least 1".into()));
        }
        if dual_head && layer_widths.last().unwrap() % 2 != 0 {
            return Err(NeuralError::InvalidSpec(
                "a dual-head output must have even width".into(),
            ));
        }
        Ok(Self { layer_widths, dual_head })
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }
}

/// One affine layer: row-major `out x in` weights plus a bias vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTensors<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> LayerTensors<T> {
    fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self { weights: vec![T::zero(); out_dim * in_dim], bias: vec![T::zero(); out_dim] }
    }
}

/// Network weights with paired momentum velocity buffers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams<T> {
    pub spec: NetworkSpec,
    pub layers: Vec<LayerTensors<T>>,
    velocities: Vec<LayerTensors<T>>,
    revision: u64,
}

/// Per-layer gradients, same shapes as the parameters they refer to.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGrads<T> {
    pub layers: Vec<LayerTensors<T>>,
}

impl<T: Real> NetworkGrads<T> {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        let layers = spec
            .layer_widths
            .windows(2)
            .map(|w| LayerTensors::zeros(w[1], w[0]))
            .collect();
        Self { layers }
    }

    pub fn reset(&mut self) {
        for layer in &mut self.layers {
            layer.weights.iter_mut().for_each(|v| *v = T::zero());
            layer.bias.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn scale(&mut self, factor: T) {
        for layer in &mut self.layers {
            layer.weights.iter_mut().for_each(|v| *v *= factor);
            layer.bias.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Flattens all entries (weights then bias, layer by layer); used by
    /// finite-difference checks.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend_from_slice(&layer.weights);
            out.extend_from_slice(&layer.bias);
        }
        out
    }
}

/// Activations recorded by a forward pass, consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    /// Input to each layer (post-activation of the previous one).
    activations: Vec<Vec<T>>,
    revision: u64,
}

/// He-initialized weights (std sqrt(2 / fan_in)), zero biases.
pub fn init_params<T: Real, R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> NetworkParams<T> {
    let mut layers = Vec::with_capacity(spec.n_layers());
    for w in spec.layer_widths.windows(2) {
        let (in_dim, out_dim) = (w[0], w[1]);
        let std = (T::cst(2.0) / T::from_usize(in_dim).unwrap()).sqrt();
        let weights = (0..out_dim * in_dim).map(|_| std * T::standard_normal(rng)).collect();
        layers.push(LayerTensors { weights, bias: vec![T::zero(); out_dim] });
    }
    let velocities = spec
        .layer_widths
        .windows(2)
        .map(|w| LayerTensors::zeros(w[1], w[0]))
        .collect();
    NetworkParams { spec: spec.clone(), layers, velocities, revision: 0 }
}

impl<T: Real> NetworkParams<T> {
    pub fn n_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Mutable view used by tests that craft weights by hand.
    pub fn layers_mut(&mut self) -> &mut Vec<LayerTensors<T>> {
        self.revision += 1;
        &mut self.layers
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend_from_slice(&layer.weights);
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    /// Writes a flat vector (as produced by [`Self::flatten`]) back into the
    /// layer tensors.
    pub fn unflatten_from(&mut self, flat: &[T]) {
        let mut i = 0;
        for layer in &mut self.layers {
            for w in &mut layer.weights {
                *w = flat[i];
                i += 1;
            }
            for b in &mut layer.bias {
                *b = flat[i];
                i += 1;
            }
        }
        self.revision += 1;
        debug_assert_eq!(i, flat.len());
    }
}

fn affine<T: Real>(layer: &LayerTensors<T>, input: &[T], out: &mut Vec<T>) {
    let in_dim = input.len();
    let out_dim = layer.bias.len();
    out.clear();
    out.reserve(out_dim);
    for r in 0..out_dim {
        let row = &layer.weights[r * in_dim..(r + 1) * in_dim];
        let mut acc = layer.bias[r];
        for (w, x) in row.iter().zip(input) {
            acc = acc + *w * *x;
        }
        out.push(acc);
    }
}

/// Forward pass: affine + ReLU per hidden layer, affine on the output layer.
/// Returns the output and the activation cache needed by [`backward`].
pub fn forward<T: Real>(
    params: &NetworkParams<T>,
    input: &[T],
) -> Result<(Vec<T>, ForwardCache<T>), NeuralError> {
    if input.len() != params.spec.input_width() {
        return Err(NeuralError::ShapeMismatch {
            got: input.len(),
            expected: params.spec.input_width(),
        });
    }
    let n_layers = params.layers.len();
    let mut activations = Vec::with_capacity(n_layers);
    activations.push(input.to_vec());
    let mut current = Vec::new();
    for (l, layer) in params.layers.iter().enumerate() {
        affine(layer, activations.last().unwrap(), &mut current);
        if l + 1 < n_layers {
            let activated: Vec<T> =
                current.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
            activations.push(activated);
        }
    }
    Ok((current, ForwardCache { activations, revision: params.revision }))
}

/// Forward pass without a cache, for inference loops.
pub fn infer<T: Real>(params: &NetworkParams<T>, input: &[T]) -> Result<Vec<T>, NeuralError> {
    if input.len() != params.spec.input_width() {
        return Err(NeuralError::ShapeMismatch {
            got: input.len(),
            expected: params.spec.input_width(),
        });
    }
    let n_layers = params.layers.len();
    let mut a = input.to_vec();
    let mut b = Vec::new();
    for (l, layer) in params.layers.iter().enumerate() {
        affine(layer, &a, &mut b);
        if l + 1 < n_layers {
            b.iter_mut().for_each(|v| {
                if !(*v > T::zero()) {
                    *v = T::zero();
                }
            });
        }
        std::mem::swap(&mut a, &mut b);
    }
    Ok(a)
}

/// Exact reverse-mode gradients for one recorded forward pass. Returns the
/// parameter gradients and the gradient with respect to the network input.
/// The ReLU subgradient at 0 is taken as 0.
pub fn backward<T: Real>(
    params: &NetworkParams<T>,
    cache: &ForwardCache<T>,
    output_gradient: &[T],
) -> Result<(NetworkGrads<T>, Vec<T>), NeuralError> {
    let mut grads = NetworkGrads::zeros(&params.spec);
    let mut input_grad = Vec::new();
    backward_into(params, cache, output_gradient, &mut grads, &mut input_grad)?;
    Ok((grads, input_grad))
}

/// As [`backward`], but accumulates (`+=`) into `grads` and reuses the
/// `input_grad` buffer; this is the batch-loop entry point.
pub fn backward_into<T: Real>(
    params: &NetworkParams<T>,
    cache: &ForwardCache<T>,
    output_gradient: &[T],
    grads: &mut NetworkGrads<T>,
    input_grad: &mut Vec<T>,
) -> Result<(), NeuralError> {
    if cache.revision != params.revision {
        return Err(NeuralError::StaleCache);
    }
    let out_dim = params.spec.output_width();
    if output_gradient.len() != out_dim {
        return Err(NeuralError::OutputGradMismatch {
            got: output_gradient.len(),
            expected: out_dim,
        });
    }

    let mut dz = output_gradient.to_vec();
    let mut da = Vec::new();
    for l in (0..params.layers.len()).rev() {
        let layer = &params.layers[l];
        let a_in = &cache.activations[l];
        let in_dim = a_in.len();
        let g = &mut grads.layers[l];
        for (r, &dzr) in dz.iter().enumerate() {
            g.bias[r] += dzr;
            let row = &mut g.weights[r * in_dim..(r + 1) * in_dim];
            for (gw, &a) in row.iter_mut().zip(a_in) {
                *gw += dzr * a;
            }
        }
        // da_in = W^T dz
        da.clear();
        da.resize(in_dim, T::zero());
        for (r, &dzr) in dz.iter().enumerate() {
            let row = &layer.weights[r * in_dim..(r + 1) * in_dim];
            for (d, &w) in da.iter_mut().zip(row) {
                *d += w * dzr;
            }
        }
        if l > 0 {
            // gate by the ReLU mask of the previous layer's output
            dz.clear();
            dz.extend(
                da.iter()
                    .zip(&cache.activations[l])
                    .map(|(&d, &a)| if a > T::zero() { d } else { T::zero() }),
            );
        }
    }
    input_grad.clear();
    input_grad.extend_from_slice(&da);
    Ok(())
}

/// Classical-momentum SGD update, in place:
/// v <- momentum * v + g; p <- p - learning_rate * v.
pub fn sgd_step<T: Real>(
    params: &mut NetworkParams<T>,
    grads: &NetworkGrads<T>,
    learning_rate: T,
    momentum: T,
) {
    for (layer, (vel, grad)) in params
        .layers
        .iter_mut()
        .zip(params.velocities.iter_mut().zip(&grads.layers))
    {
        for ((p, v), &g) in layer
            .weights
            .iter_mut()
            .zip(vel.weights.iter_mut())
            .zip(&grad.weights)
        {
            *v = momentum * *v + g;
            *p = *p - learning_rate * *v;
        }
        for ((p, v), &g) in layer.bias.iter_mut().zip(vel.bias.iter_mut()).zip(&grad.bias) {
            *v = momentum * *v + g;
            *p = *p - learning_rate * *v;
        }
    }
    params.revision += 1;
}
