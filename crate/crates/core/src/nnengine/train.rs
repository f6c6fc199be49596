use std::fmt;

use serde::{Deserialize, Serialize};

use super::{forward, loss_and_gradients, BnMode, Dataset, EngineError};
use crate::cipher::ImageTensor;
use crate::model::{ConvMixerModel, Geometry};
use crate::rnglinalg::RngState;

/// Running statistics keep this fraction of their old value per step.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: Optimizer::Adam,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(EngineError::Config(format!("learning rate {} must be finite and >= 0", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(EngineError::Config("batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return Err(EngineError::Config("Adam needs beta1, beta2 in [0, 1) and epsilon > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

/// `epoch \t loss \t train-acc \t test-acc`, accuracies in percent.
impl fmt::Display for EpochReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{:.6}\t{:.2}\t", self.epoch, self.loss, self.train_accuracy)?;
        match self.test_accuracy {
            Some(a) => write!(f, "{a:.2}"),
            None => write!(f, "-"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ConvMixerModel,
    pub log: Vec<EpochReport>,
}

/// Top-1 accuracy in percent, inference mode.
pub(crate) fn dataset_accuracy(m: &ConvMixerModel, data: &Dataset) -> Result<f64, EngineError> {
    if data.is_empty() {
        return Err(EngineError::Empty);
    }
    let mut correct = 0usize;
    for (x, y) in data.iter() {
        if forward(m, x)?.argmax() == y {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / data.len() as f64)
}

/// Folds one batch's statistics into the running estimates. `count` is the
/// number of values each statistic was computed over; the variance is
/// stored unbiased.
pub fn apply_batch_stats(m: &mut ConvMixerModel, stats: &[(Vec<f64>, Vec<f64>)], count: usize) {
    let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
    for (bn, (mean, var)) in m.batch_norms_mut().into_iter().zip(stats) {
        for c in 0..bn.len() {
            bn.running_mean[c] = BN_MOMENTUM * bn.running_mean[c] + (1.0 - BN_MOMENTUM) * mean[c];
            bn.running_var[c] = BN_MOMENTUM * bn.running_var[c] + (1.0 - BN_MOMENTUM) * var[c] * unbias;
        }
    }
}

struct AdamState {
    step: i32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

/// Trains a plain model from a seeded initialization. Initialization and
/// per-epoch shuffling both draw from one SplitMix64 stream seeded with
/// `config.seed`, so the result is bit-reproducible.
pub fn train(
    config: &TrainConfig,
    geometry: Geometry,
    data: &Dataset,
    test: Option<&Dataset>,
) -> Result<TrainOutcome, EngineError> {
    config.validate()?;
    if data.is_empty() {
        return Err(EngineError::Empty);
    }
    if data.classes() != geometry.classes {
        return Err(EngineError::Geometry(format!(
            "dataset has {} classes, model {}",
            data.classes(),
            geometry.classes
        )));
    }
    let mut rng = RngState::new(config.seed);
    let mut model = ConvMixerModel::init(geometry, &mut rng)?;
    let sizes: Vec<usize> = model.trainable_mut().iter().map(|(_, t)| t.len()).collect();
    let mut adam = AdamState {
        step: 0,
        first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let xs: Vec<&ImageTensor> = batch.iter().map(|&i| &data.images()[i]).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| data.labels()[i]).collect();
            let out = loss_and_gradients(&model, &xs, &ys, BnMode::Training)?;
            if !out.loss.is_finite() {
                return Err(EngineError::Diverged { epoch });
            }
            loss_sum += out.loss * batch.len() as f64;
            let positions = xs[0].height() / geometry.patch * (xs[0].width() / geometry.patch);
            apply_batch_stats(&mut model, &out.batch_stats, positions * batch.len());
            adam.step += 1;
            for (i, ((_, param), (_, grad))) in model.trainable_mut().into_iter().zip(&out.grads.tensors).enumerate() {
                match config.optimizer {
                    Optimizer::Sgd => {
                        for (p, g) in param.iter_mut().zip(grad) {
                            *p -= config.learning_rate * g;
                        }
                    }
                    Optimizer::Adam => {
                        let c1 = 1.0 - config.beta1.powi(adam.step);
                        let c2 = 1.0 - config.beta2.powi(adam.step);
                        let (m1, m2) = (&mut adam.first[i], &mut adam.second[i]);
                        for (j, (p, &g)) in param.iter_mut().zip(grad).enumerate() {
                            m1[j] = config.beta1 * m1[j] + (1.0 - config.beta1) * g;
                            m2[j] = config.beta2 * m2[j] + (1.0 - config.beta2) * g * g;
                            *p -= config.learning_rate * (m1[j] / c1) / ((m2[j] / c2).sqrt() + config.epsilon);
                        }
                    }
                }
            }
        }
        let loss = loss_sum / data.len() as f64;
        if !loss.is_finite() {
            return Err(EngineError::Diverged { epoch });
        }
        let report = EpochReport {
            epoch,
            loss,
            train_accuracy: dataset_accuracy(&model, data)?,
            test_accuracy: test.map(|t| dataset_accuracy(&model, t)).transpose()?,
        };
        log::info!("{report}");
        log.push(report);
    }
    Ok(TrainOutcome { model, log })
}
