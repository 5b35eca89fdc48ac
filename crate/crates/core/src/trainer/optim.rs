use serde::{Deserialize, Serialize};

use super::network::{DenseLayer, Gradients, Model};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// Used by `momentum` only.
    pub momentum: f64,
    /// L2 penalty added to weight gradients (biases are not decayed).
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            momentum: 0.9,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Learning-rate schedule over epochs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Multiply the rate by `gamma` once each listed epoch has been reached.
    Step { milestones: Vec<usize>, gamma: f64 },
}

impl LrSchedule {
    pub fn rate(&self, base: f64, epoch: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Step { milestones, gamma } => {
                let passed = milestones.iter().filter(|&&m| epoch >= m).count();
                base * gamma.powi(passed as i32)
            }
        }
    }
}

pub(crate) struct Optimizer {
    config: OptimizerConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

impl Optimizer {
    pub(crate) fn new(config: OptimizerConfig, model: &Model) -> Self {
        let n = model.parameter_count();
        let second = if config.kind == OptimizerKind::Adam { vec![0.0; n] } else { Vec::new() };
        Self {
            config,
            first: vec![0.0; n],
            second,
            steps: 0,
        }
    }

    pub(crate) fn step(&mut self, model: &mut Model, grads: &Gradients, learning_rate: f64) {
        self.steps += 1;
        let cfg = &self.config;
        let bias1 = 1.0 - cfg.beta1.powi(self.steps as i32);
        let bias2 = 1.0 - cfg.beta2.powi(self.steps as i32);
        let mut offset = 0;
        for (layer, grad) in model.layers.iter_mut().zip(grads) {
            let DenseLayer { weights, bias, .. } = layer;
            let groups = [(weights, &grad.weights, cfg.weight_decay), (bias, &grad.bias, 0.0)];
            for (params, g, decay) in groups {
                for (j, (p, &g)) in params.iter_mut().zip(g.iter()).enumerate() {
                    let k = offset + j;
                    let g = g + decay * *p;
                    match cfg.kind {
                        OptimizerKind::Sgd => *p -= learning_rate * g,
                        OptimizerKind::Momentum => {
                            self.first[k] = cfg.momentum * self.first[k] + g;
                            *p -= learning_rate * self.first[k];
                        }
                        OptimizerKind::Adam => {
                            self.first[k] = cfg.beta1 * self.first[k] + (1.0 - cfg.beta1) * g;
                            self.second[k] = cfg.beta2 * self.second[k] + (1.0 - cfg.beta2) * g * g;
                            let m = self.first[k] / bias1;
                            let v = self.second[k] / bias2;
                            *p -= learning_rate * m / (v.sqrt() + cfg.epsilon);
                        }
                    }
                }
                offset += params.len();
            }
        }
    }
}
