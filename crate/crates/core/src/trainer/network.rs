//! Fully connected network with softmax output and cross-entropy loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::TrainError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// Dense layer: `weights` is `outputs x inputs`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.weights.chunks_exact(self.inputs).zip(&self.bias).map(|(row, b)| {
            row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b
        }));
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub layers: Vec<DenseLayer>,
    pub activation: Activation,
}

/// Gradient of the loss with the same shapes as [`Model::layers`].
pub type Gradients = Vec<DenseLayer>;

pub fn stable_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl Model {
    /// All-zero parameters for the given `[d, h1, .., C]` layout.
    pub fn zeros(layer_sizes: &[usize], activation: Activation) -> Self {
        Self {
            layers: layer_sizes.windows(2).map(|w| DenseLayer::zeros(w[0], w[1])).collect(),
            activation,
        }
    }

    /// Uniform initialisation in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init(layer_sizes: &[usize], activation: Activation, rng: &mut ChaCha8Rng) -> Self {
        let mut model = Self::zeros(layer_sizes, activation);
        for layer in &mut model.layers {
            let limit = (6.0 / (layer.inputs + layer.outputs) as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.random_range(-limit..limit);
            }
        }
        model
    }

    pub fn seeded(layer_sizes: &[usize], activation: Activation, seed: u64) -> Self {
        Self::init(layer_sizes, activation, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn n_inputs(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn n_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Runs the network, keeping every layer's (post-activation) output.
    fn forward_all(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.outputs);
            layer.forward(&acts[l], &mut out);
            if l < last {
                out.iter_mut().for_each(|z| *z = self.activation.apply(*z));
            }
            acts.push(out);
        }
        acts
    }

    pub fn logits(&self, x: &[f32]) -> Result<Vec<f64>, TrainError> {
        if x.len() != self.n_inputs() {
            return Err(TrainError::DimensionMismatch {
                expected: self.n_inputs(),
                found: x.len(),
            });
        }
        let x: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        Ok(self.forward_all(&x).pop().unwrap())
    }

    /// Class probabilities for one input.
    pub fn predict(&self, x: &[f32]) -> Result<Vec<f64>, TrainError> {
        Ok(stable_softmax(&self.logits(x)?))
    }

    /// Mean cross-entropy over `batch` (indices into `data`, duplicates allowed)
    /// and its gradient with respect to every parameter.
    pub fn loss_and_gradient(&self, data: &Dataset, batch: &[usize]) -> Result<(f64, Gradients), TrainError> {
        if batch.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        if data.n_features() != self.n_inputs() {
            return Err(TrainError::DimensionMismatch {
                expected: self.n_inputs(),
                found: data.n_features(),
            });
        }
        let mut grads: Gradients = self.layers.iter().map(|l| DenseLayer::zeros(l.inputs, l.outputs)).collect();
        let mut loss = 0.0;
        let scale = 1.0 / batch.len() as f64;
        for &i in batch {
            let x: Vec<f64> = data.features(i).iter().map(|&v| v as f64).collect();
            let y = data.target(i) as usize;
            let acts = self.forward_all(&x);
            let logits = acts.last().unwrap();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let log_sum = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
            loss += log_sum - logits[y];

            // dL/dlogits = softmax - onehot
            let mut delta: Vec<f64> = logits.iter().map(|z| (z - log_sum).exp()).collect();
            delta[y] -= 1.0;
            for l in (0..self.layers.len()).rev() {
                let layer = &self.layers[l];
                let input = &acts[l];
                let g = &mut grads[l];
                for (o, &d) in delta.iter().enumerate() {
                    g.bias[o] += d * scale;
                    let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (gw, &xi) in row.iter_mut().zip(input) {
                        *gw += d * xi * scale;
                    }
                }
                if l > 0 {
                    let mut prev = vec![0.0; layer.inputs];
                    for (o, &d) in delta.iter().enumerate() {
                        let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                        for (p, &w) in prev.iter_mut().zip(row) {
                            *p += d * w;
                        }
                    }
                    for (p, &a) in prev.iter_mut().zip(input) {
                        *p *= self.activation.derivative_from_output(a);
                    }
                    delta = prev;
                }
            }
        }
        Ok((loss * scale, grads))
    }

    /// Flattened parameters: per layer, weights then bias.
    pub fn flat_parameters(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_flat_parameters(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.parameter_count());
        let mut it = params.iter().copied();
        for layer in &mut self.layers {
            layer.weights.iter_mut().chain(layer.bias.iter_mut()).for_each(|p| *p = it.next().unwrap());
        }
    }
}

pub fn flatten(layers: &[DenseLayer]) -> Vec<f64> {
    layers
        .iter()
        .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
        .collect()
}
