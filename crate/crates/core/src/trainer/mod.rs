//! Training engine that records checkpoint predictions.
//!
//! Every `checkpoint_every` mini-batches the current model is evaluated on
//! the evaluation split and its argmax labels (and probabilities) are
//! appended to the trace. The first checkpoint is therefore taken after at
//! least one optimizer step; the untrained model is never recorded.

mod dataset;
mod network;
mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{PredictionTrace, TraceError, TraceParts};

pub use dataset::{
    load_dataset, load_idx, parse_csv, parse_idx, synth_dataset, Dataset, DatasetError, DatasetFormat,
    SynthDataset, SynthSpec, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC,
};
pub use network::{argmax, flatten, stable_softmax, Activation, DenseLayer, Gradients, Model};
pub use optim::{LrSchedule, OptimizerConfig, OptimizerKind};

use optim::Optimizer;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("input has dimension {found}, expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: u64, loss: f64 },
    #[error(transparent)]
    Trace(#[from] TraceError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// `[d, h1, .., C]`.
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub optimizer: OptimizerConfig,
    pub lr_schedule: LrSchedule,
    pub batch_size: usize,
    pub epochs: usize,
    /// Mini-batches between two recorded checkpoints.
    pub checkpoint_every: usize,
    pub seed: u64,
    pub record_probabilities: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            layer_sizes: vec![2, 16, 2],
            activation: Activation::Relu,
            optimizer: OptimizerConfig::default(),
            lr_schedule: LrSchedule::Constant,
            batch_size: 32,
            epochs: 30,
            checkpoint_every: 10,
            seed: 0,
            record_probabilities: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.layer_sizes.len() < 2 || self.layer_sizes.contains(&0) {
            return Err(TrainError::Config("layer_sizes needs at least input and output sizes, all positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(TrainError::Config("checkpoint_every must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be >= 1".into()));
        }
        if !(self.optimizer.learning_rate > 0.0 && self.optimizer.learning_rate.is_finite()) {
            return Err(TrainError::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }

    /// Mini-batches per epoch; the last short batch is kept.
    pub fn batches_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size)
    }

    /// Checkpoints the run records: one per full cadence interval plus a
    /// final one when the last step does not fall on the cadence.
    pub fn expected_checkpoints(&self, n_train: usize) -> usize {
        (self.epochs * self.batches_per_epoch(n_train)).div_ceil(self.checkpoint_every)
    }
}

pub struct TrainRun {
    pub trace: PredictionTrace,
    pub model: Model,
    pub total_steps: u64,
}

const STREAM_INIT: u64 = 0;
const STREAM_EPOCH_BASE: u64 = 1 << 32;

fn evaluate(
    model: &Model,
    eval_set: &Dataset,
    record_probabilities: bool,
    labels: &mut Vec<u16>,
    probabilities: &mut Vec<f32>,
) -> Result<(), TrainError> {
    for i in 0..eval_set.len() {
        let p = model.predict(eval_set.features(i))?;
        labels.push(argmax(&p) as u16);
        if record_probabilities {
            probabilities.extend(p.iter().map(|&x| x as f32));
        }
    }
    Ok(())
}

/// Trains `config` on `train_set`, recording predictions on `eval_set`.
///
/// The run is a pure function of its inputs: the training set is reshuffled
/// each epoch from a sub-stream of `config.seed` keyed by the epoch index.
pub fn train(config: &TrainConfig, train_set: &Dataset, eval_set: &Dataset) -> Result<TrainRun, TrainError> {
    config.validate()?;
    let d = config.layer_sizes[0];
    let c = *config.layer_sizes.last().unwrap();
    if train_set.n_features() != d || eval_set.n_features() != d {
        return Err(TrainError::DimensionMismatch {
            expected: d,
            found: if train_set.n_features() != d { train_set.n_features() } else { eval_set.n_features() },
        });
    }
    if train_set.n_classes() > c || eval_set.n_classes() > c {
        return Err(TrainError::Config(format!(
            "output layer has {c} units but the data has {} classes",
            train_set.n_classes().max(eval_set.n_classes())
        )));
    }
    if train_set.is_empty() || eval_set.is_empty() {
        return Err(TrainError::Config("training and evaluation sets must be non-empty".into()));
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    init_rng.set_stream(STREAM_INIT);
    let mut model = Model::init(&config.layer_sizes, config.activation, &mut init_rng);
    let mut optimizer = Optimizer::new(config.optimizer.clone(), &model);

    let mut steps_at = Vec::new();
    let mut labels = Vec::new();
    let mut probabilities = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step: u64 = 0;
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(STREAM_EPOCH_BASE + epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let rate = config.lr_schedule.rate(config.optimizer.learning_rate, epoch);
        for batch in order.chunks(config.batch_size) {
            let (loss, grads) = model.loss_and_gradient(train_set, batch)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { step, loss });
            }
            optimizer.step(&mut model, &grads, rate);
            step += 1;
            if step.is_multiple_of(config.checkpoint_every as u64) {
                evaluate(&model, eval_set, config.record_probabilities, &mut labels, &mut probabilities)?;
                steps_at.push(step);
            }
        }
    }
    if steps_at.last() != Some(&step) {
        evaluate(&model, eval_set, config.record_probabilities, &mut labels, &mut probabilities)?;
        steps_at.push(step);
    }
    if model.flat_parameters().iter().any(|p| !p.is_finite()) {
        return Err(TrainError::Diverged { step, loss: f64::NAN });
    }

    let trace = PredictionTrace::new(TraceParts {
        n_classes: c,
        n_examples: eval_set.len(),
        checkpoint_steps: steps_at,
        labels,
        probabilities: config.record_probabilities.then_some(probabilities),
        true_labels: Some(eval_set.targets().to_vec()),
        seed: config.seed,
    })?;
    Ok(TrainRun {
        trace,
        model,
        total_steps: step,
    })
}

/// Fraction of `data` the model classifies correctly.
pub fn accuracy(model: &Model, data: &Dataset) -> Result<f64, TrainError> {
    let mut correct = 0usize;
    for i in 0..data.len() {
        if argmax(&model.predict(data.features(i))?) == data.target(i) as usize {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}
