//! Multi-layer perceptron embedding network with explicit backpropagation and Adam.
//!
//! Hidden layers use `tanh`; the output layer is linear. Gradients are
//! accumulated (summed) over a batch; callers fold any averaging into the
//! output gradients they pass to [`EmbeddingModel::backward`].

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

const CHECKPOINT_VERSION: u32 = 1;

/// One affine layer: `y = W x + b`, with `W` stored as `out × in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(input: usize, output: usize) -> Self {
        Self {
            weights: Matrix::zeros(output, input),
            bias: vec![0.0; output],
        }
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.weights.cols(), self.weights.rows())
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.weights.rows())
            .map(|r| crate::linalg::dot(self.weights.row(r), x) + self.bias[r])
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingModel {
    layer_sizes: Vec<usize>,
    layers: Vec<Layer>,
}

/// Per-parameter gradients with the same shapes as an [`EmbeddingModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<Layer>,
}

impl GradientSet {
    pub fn zeros_like(model: &EmbeddingModel) -> Self {
        Self {
            layers: model.layers.iter().map(Layer::zeros_like).collect(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn is_zero(&self) -> bool {
        self.flat().iter().all(|&g| g == 0.0)
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &GradientSet, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.as_mut_slice().iter_mut().zip(b.weights.as_slice()) {
                *x += scale * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += scale * y;
            }
        }
    }
}

fn flatten(layers: &[Layer]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend_from_slice(l.weights.as_slice());
        out.extend_from_slice(&l.bias);
    }
    out
}

fn params_mut(layers: &mut [Layer]) -> impl Iterator<Item = &mut f64> {
    layers
        .iter_mut()
        .flat_map(|l| l.weights.as_mut_slice().iter_mut().chain(l.bias.iter_mut()))
}

/// Activations recorded during a forward pass; `activations[0]` is the input.
struct Trace {
    activations: Vec<Vec<f64>>,
}

impl EmbeddingModel {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(layer_sizes: &[usize], rng: &mut R) -> Result<Self> {
        let mut model = Self::zeros(layer_sizes)?;
        for layer in &mut model.layers {
            let fan_in = layer.weights.cols() as f64;
            let fan_out = layer.weights.rows() as f64;
            let limit = (6.0 / (fan_in + fan_out)).sqrt();
            for w in layer.weights.as_mut_slice() {
                *w = rng.random_range(-limit..=limit);
            }
        }
        Ok(model)
    }

    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::invalid("an embedding model needs at least input and output sizes"));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::invalid("layer sizes must be positive"));
        }
        let layers = layer_sizes
            .windows(2)
            .map(|w| Layer::zeros(w[0], w[1]))
            .collect();
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            layers,
        })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::invalid("no layers given"))?;
        let mut sizes = vec![first.weights.cols()];
        for l in &layers {
            if l.weights.cols() != *sizes.last().unwrap() || l.bias.len() != l.weights.rows() {
                return Err(Error::invalid("inconsistent layer shapes"));
            }
            if l.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::invalid("non-finite bias"));
            }
            sizes.push(l.weights.rows());
        }
        Ok(Self {
            layer_sizes: sizes,
            layers,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn embed_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.as_slice().len() + l.bias.len())
            .sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.parameter_count() {
            return Err(Error::invalid("parameter vector has the wrong length"));
        }
        for (p, v) in params_mut(&mut self.layers).zip(values) {
            *p = *v;
        }
        Ok(())
    }

    /// Deep copy used as a frozen distillation target.
    pub fn snapshot(&self) -> EmbeddingModel {
        self.clone()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(x)?.activations.pop().unwrap())
    }

    pub fn forward_batch(&self, xs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        xs.iter().map(|x| self.forward(x)).collect()
    }

    fn trace(&self, x: &[f64]) -> Result<Trace> {
        if x.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut h = layer.apply(activations.last().unwrap());
            if i != last {
                h.iter_mut().for_each(|v| *v = v.tanh());
            }
            activations.push(h);
        }
        Ok(Trace { activations })
    }

    /// Reverse-mode gradients of `Σ_i ⟨output_grads[i], f(inputs[i])⟩` with
    /// respect to every parameter.
    pub fn backward(&self, inputs: &[&[f64]], output_grads: &[Vec<f64>]) -> Result<GradientSet> {
        if inputs.len() != output_grads.len() {
            return Err(Error::invalid(format!(
                "backward: {} inputs but {} output gradients",
                inputs.len(),
                output_grads.len()
            )));
        }
        let mut grads = GradientSet::zeros_like(self);
        let last = self.layers.len() - 1;
        for (x, g_out) in inputs.iter().zip(output_grads) {
            if g_out.len() != self.embed_dim() {
                return Err(Error::invalid("backward: output gradient has the wrong length"));
            }
            if g_out.iter().all(|&g| g == 0.0) {
                continue;
            }
            let trace = self.trace(x)?;
            let mut delta = g_out.clone();
            for i in (0..=last).rev() {
                if i != last {
                    // tanh' = 1 - tanh²; activations[i + 1] holds tanh output.
                    for (d, a) in delta.iter_mut().zip(&trace.activations[i + 1]) {
                        *d *= 1.0 - a * a;
                    }
                }
                let input = &trace.activations[i];
                let g = &mut grads.layers[i];
                for (r, d) in delta.iter().enumerate() {
                    g.bias[r] += d;
                    for (w, a) in g.weights.row_mut(r).iter_mut().zip(input) {
                        *w += d * a;
                    }
                }
                if i > 0 {
                    let w = &self.layers[i].weights;
                    let mut prev = vec![0.0; w.cols()];
                    for (r, d) in delta.iter().enumerate() {
                        for (p, wv) in prev.iter_mut().zip(w.row(r)) {
                            *p += d * wv;
                        }
                    }
                    delta = prev;
                }
            }
        }
        Ok(grads)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let record = Checkpoint {
            format_version: CHECKPOINT_VERSION,
            model: self.clone(),
        };
        let text = serde_json::to_string(&record)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let record: Checkpoint = serde_json::from_str(&text)?;
        if record.format_version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!(
                "unsupported checkpoint version {}",
                record.format_version
            )));
        }
        let model = Self::from_layers(record.model.layers)?;
        if model.layer_sizes != record.model.layer_sizes {
            return Err(Error::Schema("layer_sizes disagree with stored layers".into()));
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    model: EmbeddingModel,
}

/// Adam optimizer state with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

impl Adam {
    pub fn new(model: &EmbeddingModel, learning_rate: f64) -> Self {
        let n = model.parameter_count();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, model: &mut EmbeddingModel, grads: &GradientSet) -> Result<()> {
        let g = grads.flat();
        if g.len() != self.first_moment.len() || g.len() != model.parameter_count() {
            return Err(Error::invalid("optimizer state does not match the model"));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let params = params_mut(&mut model.layers);
        for (((p, g), m), v) in params
            .zip(&g)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}
