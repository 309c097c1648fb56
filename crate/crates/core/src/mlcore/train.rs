use std::ops::Range;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{accumulate_grad, forward, predict, Workspace};
use super::{Dataset, MlError, ModelSpec, ParamVector};
use crate::rng::{derive_rng, derive_seed};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    /// Local epochs per round (τ).
    pub epochs: u32,
    pub lr: f64,
    pub batch_size: usize,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<(), MlError> {
        if self.epochs == 0 {
            return Err(MlError::InvalidTraining("epochs must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(MlError::InvalidTraining(format!("learning rate {} invalid", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(MlError::InvalidTraining("batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

/// Seed for the batch shuffle of one epoch.
pub fn epoch_seed(seed: u64, epoch: u32) -> u64 {
    derive_seed("epoch-shuffle", &[seed, u64::from(epoch)])
}

/// Runs `cfg.epochs` passes of mini-batch SGD on mean cross-entropy.
pub fn local_train(
    params: &ParamVector,
    data: &Dataset,
    spec: &ModelSpec,
    cfg: &SgdConfig,
    seed: u64,
) -> Result<ParamVector, MlError> {
    cfg.validate()?;
    train_epochs(params, data, spec, cfg.lr, cfg.batch_size, seed, 0..cfg.epochs)
}

/// Runs the epochs with indices in `epochs`, each shuffled by
/// [`epoch_seed`]. Splitting a range into consecutive calls gives the same
/// result as one call over the whole range.
pub fn train_epochs(
    params: &ParamVector,
    data: &Dataset,
    spec: &ModelSpec,
    lr: f64,
    batch_size: usize,
    seed: u64,
    epochs: Range<u32>,
) -> Result<ParamVector, MlError> {
    spec.check_params(params)?;
    check_data(spec, data)?;
    if batch_size == 0 {
        return Err(MlError::InvalidTraining("batch size must be positive".into()));
    }
    let mut w = params.as_slice().to_vec();
    let mut grad = vec![0.0; w.len()];
    let mut ws = Workspace::new(spec);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in epochs {
        order.sort_unstable();
        order.shuffle(&mut derive_rng("shuffle", &[epoch_seed(seed, epoch)]));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                epoch_loss += accumulate_grad(spec, &w, data.row(i), data.labels()[i], &mut grad, &mut ws);
            }
            let step = lr / batch.len() as f64;
            for (wi, gi) in w.iter_mut().zip(&grad) {
                *wi -= step * gi;
            }
        }
        let mean = epoch_loss / data.len() as f64;
        if !mean.is_finite() || w.iter().any(|v| !v.is_finite()) {
            return Err(MlError::Diverged { epoch, loss: mean });
        }
    }
    ParamVector::new(w)
}

/// Mean cross-entropy and argmax accuracy.
pub fn evaluate(params: &ParamVector, data: &Dataset, spec: &ModelSpec) -> Result<Evaluation, MlError> {
    spec.check_params(params)?;
    check_data(spec, data)?;
    let mut ws = Workspace::new(spec);
    let w = params.as_slice();
    let mut loss = 0.0;
    let mut correct = 0usize;
    for i in 0..data.len() {
        let label = data.labels()[i];
        loss += forward(spec, w, data.row(i), label, &mut ws);
        if super::model::argmax(ws.logits()) == label {
            correct += 1;
        }
    }
    Ok(Evaluation { loss: loss / data.len() as f64, accuracy: correct as f64 / data.len() as f64 })
}

/// Predicted class for every row.
pub fn predict_all(params: &ParamVector, data: &Dataset, spec: &ModelSpec) -> Result<Vec<usize>, MlError> {
    spec.check_params(params)?;
    check_data(spec, data)?;
    let mut ws = Workspace::new(spec);
    Ok((0..data.len()).map(|i| predict(spec, params.as_slice(), data.row(i), &mut ws)).collect())
}

/// Mean loss over the dataset and its exact gradient.
pub fn loss_and_gradient(params: &ParamVector, data: &Dataset, spec: &ModelSpec) -> Result<(f64, Vec<f64>), MlError> {
    spec.check_params(params)?;
    check_data(spec, data)?;
    let mut ws = Workspace::new(spec);
    let mut grad = vec![0.0; params.dim()];
    let mut loss = 0.0;
    for i in 0..data.len() {
        loss += accumulate_grad(spec, params.as_slice(), data.row(i), data.labels()[i], &mut grad, &mut ws);
    }
    let n = data.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((loss / n, grad))
}

fn check_data(spec: &ModelSpec, data: &Dataset) -> Result<(), MlError> {
    if data.dims() != spec.input_dim {
        return Err(MlError::Shape { expected: spec.input_dim, actual: data.dims() });
    }
    if data.num_classes() > spec.num_classes {
        return Err(MlError::Shape { expected: spec.num_classes, actual: data.num_classes() });
    }
    Ok(())
}
