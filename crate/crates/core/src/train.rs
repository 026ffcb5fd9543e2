//! Mini-batch stochastic gradient descent on the cross-entropy loss.
//!
//! Training is deterministic given the data and [`TrainConfig`]: one
//! ChaCha stream seeded from `config.seed` draws the initial weights and then
//! every epoch's shuffle. Per-sample gradients inside a batch may be computed
//! in parallel but are always summed in sample order.

use std::time::Instant;

use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::cnn::{backward, forward, Architecture, CnnError, CnnModel, Gradients};
use crate::dataset::EncodedDataset;
use crate::encoder::ByteMatrix;

/// Floor applied to predicted probabilities before taking the log.
pub const LOSS_EPSILON: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("inconsistent shapes: {0}")]
    InconsistentShapes(String),
    #[error("class `{0}` has no training samples")]
    MissingClass(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("prediction and target lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Model(#[from] CnnError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub num_filters: usize,
    pub filter_size: usize,
    pub stride: usize,
    pub pool_size: usize,
    pub pool_stride: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            learning_rate: 0.01,
            num_filters: 16,
            filter_size: 3,
            stride: 1,
            pool_size: 2,
            pool_stride: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let ints = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("num_filters", self.num_filters),
            ("filter_size", self.filter_size),
            ("stride", self.stride),
            ("pool_size", self.pool_size),
            ("pool_stride", self.pool_stride),
        ];
        if let Some((name, _)) = ints.iter().find(|(_, v)| *v == 0) {
            return Err(TrainError::InvalidConfig(format!("{name} must be positive")));
        }
        // Zero is accepted: it leaves the initial weights untouched.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "learning rate {} must be a finite non-negative number",
                self.learning_rate
            )));
        }
        Ok(())
    }

    pub fn architecture(&self, input_side: usize, num_classes: usize) -> Architecture {
        Architecture {
            input_side,
            num_filters: self.num_filters,
            filter_size: self.filter_size,
            conv_stride: self.stride,
            pool_size: self.pool_size,
            pool_stride: self.pool_stride,
            num_classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
    pub seconds: f64,
}

impl EpochStats {
    /// `epoch <n> loss <x> acc <y> secs <t>`
    pub fn progress_line(&self) -> String {
        format!(
            "epoch {} loss {:.6} acc {:.6} secs {:.3}",
            self.epoch, self.mean_loss, self.accuracy, self.seconds
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    pub epoch_accuracy: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
}

impl TrainReport {
    pub fn epochs(&self) -> usize {
        self.epoch_loss.len()
    }
}

/// `-Σ y_i ln max(p_i, 1e-12)`.
pub fn cross_entropy(prediction: &[f64], target: &[f64]) -> Result<f64, TrainError> {
    if prediction.len() != target.len() {
        return Err(TrainError::LengthMismatch(prediction.len(), target.len()));
    }
    Ok(-prediction
        .iter()
        .zip(target)
        .filter(|(_, &y)| y != 0.0)
        .map(|(&p, &y)| y * p.max(LOSS_EPSILON).ln())
        .sum::<f64>())
}

pub fn one_hot(label: usize, classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; classes];
    v[label] = 1.0;
    v
}

/// Rounds every parameter to the nearest `f32`, the precision of model files.
pub fn round_to_storage(model: &mut CnnModel) {
    for params in model.parameters_mut() {
        params.iter_mut().for_each(|w| *w = f64::from(*w as f32));
    }
}

/// Glorot-uniform weights drawn at single precision, zero biases.
pub fn init_model<R: Rng>(
    arch: Architecture,
    class_names: Vec<String>,
    rng: &mut R,
) -> Result<CnnModel, CnnError> {
    let mut model = CnnModel::zeros(arch, class_names)?;
    let receptive = arch.filter_size * arch.filter_size;
    let conv_limit = (6.0 / (receptive + arch.num_filters * receptive) as f64).sqrt();
    let n_in = model.dense.inputs;
    let dense_limit = (6.0 / (n_in + arch.num_classes) as f64).sqrt();
    for (params, limit) in [
        (&mut model.conv.filters, conv_limit),
        (&mut model.dense.weights, dense_limit),
    ] {
        let dist = Uniform::new_inclusive(-limit as f32, limit as f32);
        params
            .iter_mut()
            .for_each(|w| *w = f64::from(dist.sample(rng)));
    }
    Ok(model)
}

/// Summed result of forward/backward over a batch.
#[derive(Debug, Clone)]
pub struct BatchResult {
    /// Gradients averaged over the batch.
    pub gradients: Gradients,
    pub total_loss: f64,
    pub correct: usize,
}

/// Mean gradient and summed loss for `(matrix, label)` pairs.
pub fn batch_gradients(
    model: &CnnModel,
    batch: &[(&ByteMatrix, usize)],
) -> Result<BatchResult, CnnError> {
    let n = model.num_classes();
    let per_sample: Vec<Result<(Gradients, f64, bool), CnnError>> = batch
        .par_iter()
        .map(|&(matrix, label)| {
            let (probs, cache) = forward(model, matrix)?;
            let target = one_hot(label, n);
            let loss = cross_entropy(probs.data(), &target).expect("lengths agree");
            let grads = backward(model, &cache, &target)?;
            Ok((grads, loss, probs.argmax() == label))
        })
        .collect();
    let mut gradients = Gradients::zeros_like(model);
    let mut total_loss = 0.0;
    let mut correct = 0;
    for item in per_sample {
        let (g, loss, hit) = item?;
        gradients.add_assign(&g);
        total_loss += loss;
        correct += usize::from(hit);
    }
    if !batch.is_empty() {
        gradients.scale(1.0 / batch.len() as f64);
    }
    Ok(BatchResult {
        gradients,
        total_loss,
        correct,
    })
}

/// `θ ← θ − η ∇L`
pub fn apply_update(model: &mut CnnModel, gradients: &Gradients, learning_rate: f64) {
    for (params, grads) in model.parameters_mut().into_iter().zip(gradients.slices()) {
        params
            .iter_mut()
            .zip(grads)
            .for_each(|(w, g)| *w -= learning_rate * g);
    }
}

/// One epoch's visiting order: a shuffle of `0..n` cut into batches of
/// `batch_size`, the last batch possibly shorter.
pub fn shuffled_batches<R: Rng>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

fn check_training_set(set: &EncodedDataset) -> Result<usize, TrainError> {
    let side = set.side().ok_or(TrainError::EmptyDataset)?;
    if let Some(s) = set.samples.iter().find(|s| s.matrix.side() != side) {
        return Err(TrainError::InconsistentShapes(format!(
            "sample of side {} among samples of side {side}",
            s.matrix.side()
        )));
    }
    if set.class_names.is_empty() {
        return Err(TrainError::InconsistentShapes("no class names".into()));
    }
    if let Some(s) = set.samples.iter().find(|s| s.label >= set.class_names.len()) {
        return Err(TrainError::InconsistentShapes(format!(
            "label {} for {} classes",
            s.label,
            set.class_names.len()
        )));
    }
    let counts = set.class_counts();
    if let Some(i) = counts.iter().position(|&c| c == 0) {
        return Err(TrainError::MissingClass(set.class_names[i].clone()));
    }
    Ok(side)
}

pub fn train(
    set: &EncodedDataset,
    config: &TrainConfig,
) -> Result<(CnnModel, TrainReport), TrainError> {
    train_with_progress(set, config, |_| {})
}

/// Like [`train`], calling `on_epoch` after every epoch.
pub fn train_with_progress<F>(
    set: &EncodedDataset,
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<(CnnModel, TrainReport), TrainError>
where
    F: FnMut(&EpochStats),
{
    config.validate()?;
    let side = check_training_set(set)?;
    let arch = config.architecture(side, set.class_names.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = init_model(arch, set.class_names.clone(), &mut rng)?;

    let mut report = TrainReport::default();
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for chunk in shuffled_batches(set.len(), config.batch_size, &mut rng) {
            let batch: Vec<(&ByteMatrix, usize)> = chunk
                .iter()
                .map(|&i| (&set.samples[i].matrix, set.samples[i].label))
                .collect();
            let result = batch_gradients(&model, &batch)?;
            loss_sum += result.total_loss;
            correct += result.correct;
            apply_update(&mut model, &result.gradients, config.learning_rate);
        }
        let stats = EpochStats {
            epoch,
            mean_loss: loss_sum / set.len() as f64,
            accuracy: correct as f64 / set.len() as f64,
            seconds: started.elapsed().as_secs_f64(),
        };
        report.epoch_loss.push(stats.mean_loss);
        report.epoch_accuracy.push(stats.accuracy);
        report.epoch_seconds.push(stats.seconds);
        on_epoch(&stats);
    }
    round_to_storage(&mut model);
    Ok((model, report))
}
