//! Datasets, a small trainable classifier, local SGD, evaluation and the
//! FedAvg aggregation rule that every client executes identically.

mod aggregate;
mod data;
mod model;
mod train;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use aggregate::{aggregate, contribution_weights, WeightRule};
pub use data::{make_partitioned_data, Partition, SyntheticSpec};
pub use model::{ModelKind, ModelSpec};
pub use train::{
    epoch_seed, evaluate, local_train, loss_and_gradient, predict_all, train_epochs, Evaluation, SgdConfig,
};

pub type ClientId = u32;
pub type Digest32 = [u8; 32];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MlError {
    #[error("parameter vector must be non-empty")]
    EmptyParams,
    #[error("parameter {index} is not finite ({value})")]
    NonFinite { index: usize, value: f64 },
    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("invalid partition request: {0}")]
    InvalidPartition(String),
    #[error("training diverged in epoch {epoch} (loss {loss})")]
    Diverged { epoch: u32, loss: f64 },
    #[error("invalid training config: {0}")]
    InvalidTraining(String),
    #[error("cannot aggregate an empty update set")]
    EmptyUpdates,
    #[error("update from client {client} has zero samples")]
    ZeroSamples { client: ClientId },
}

/// Flat model parameters. Values are always finite and the vector non-empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self, MlError> {
        if values.is_empty() {
            return Err(MlError::EmptyParams);
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(MlError::NonFinite { index, value });
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "parameter dimension must be positive");
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn l2_norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Mean squared value over the first `len` coordinates.
    pub fn prefix_power(&self, len: usize) -> f64 {
        let len = len.min(self.0.len());
        if len == 0 {
            return 0.0;
        }
        self.0[..len].iter().map(|v| v * v).sum::<f64>() / len as f64
    }

    pub fn sub(&self, other: &Self) -> Result<Self, MlError> {
        self.check_dim(other)?;
        Self::new(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn add(&self, other: &Self) -> Result<Self, MlError> {
        self.check_dim(other)?;
        Self::new(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn scale(&self, factor: f64) -> Result<Self, MlError> {
        Self::new(self.0.iter().map(|v| v * factor).collect())
    }

    /// SHA-256 over the dimension and little-endian IEEE-754 bytes.
    pub fn digest(&self) -> Digest32 {
        let mut hasher = Sha256::new();
        hasher.update((self.0.len() as u64).to_le_bytes());
        for v in &self.0 {
            hasher.update(v.to_bits().to_le_bytes());
        }
        hasher.finalize().into()
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.0.len() == other.0.len()
            && self.0.iter().zip(&other.0).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    fn check_dim(&self, other: &Self) -> Result<(), MlError> {
        if self.0.len() != other.0.len() {
            return Err(MlError::Shape { expected: self.0.len(), actual: other.0.len() });
        }
        Ok(())
    }
}

impl TryFrom<Vec<f64>> for ParamVector {
    type Error = MlError;
    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl From<ParamVector> for Vec<f64> {
    fn from(p: ParamVector) -> Self {
        p.0
    }
}

/// Row-major feature matrix with one class label per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    features: Vec<f64>,
    dims: usize,
    labels: Vec<usize>,
    num_classes: usize,
    pub client_id: ClientId,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        dims: usize,
        labels: Vec<usize>,
        num_classes: usize,
        client_id: ClientId,
    ) -> Result<Self, MlError> {
        if dims == 0 || labels.is_empty() {
            return Err(MlError::InvalidDataset("dataset must be non-empty".into()));
        }
        if features.len() != dims * labels.len() {
            return Err(MlError::InvalidDataset(format!(
                "{} feature values do not form {} rows of {} dims",
                features.len(),
                labels.len(),
                dims
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(MlError::InvalidDataset(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(MlError::InvalidDataset("non-finite feature value".into()));
        }
        Ok(Self { features, dims, labels, num_classes, client_id })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dims..(i + 1) * self.dims]
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.num_classes];
        for &l in &self.labels {
            hist[l] += 1;
        }
        hist
    }

    /// Concatenates datasets with matching shape; the result takes `client_id`.
    pub fn concat(parts: &[Dataset], client_id: ClientId) -> Result<Self, MlError> {
        let first = parts
            .first()
            .ok_or_else(|| MlError::InvalidDataset("nothing to concatenate".into()))?;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.dims != first.dims || p.num_classes != first.num_classes {
                return Err(MlError::InvalidDataset("shape mismatch in concat".into()));
            }
            features.extend_from_slice(&p.features);
            labels.extend_from_slice(&p.labels);
        }
        Self::new(features, first.dims, labels, first.num_classes, client_id)
    }
}

/// A client's contribution for one round.
///
/// `params` holds the uploaded model delta (local model minus the round's
/// global model), after any privacy noise and watermark have been applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalUpdate {
    pub client_id: ClientId,
    pub round: u64,
    pub params: ParamVector,
    pub samples: u64,
    pub compute_time: f64,
}

impl LocalUpdate {
    pub fn params_digest(&self) -> Digest32 {
        self.params.digest()
    }
}
