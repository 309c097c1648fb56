use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ClientId, Dataset, MlError};
use crate::rng::{derive_rng, SimRng};

/// Gaussian-blob classification task split across clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_clients: usize,
    pub samples_per_client: usize,
    pub dims: usize,
    pub num_classes: usize,
    /// 0 gives IID clients; 1 restricts each client to two classes.
    pub skew: f64,
    pub test_samples: usize,
    /// Standard deviation of each class-centroid coordinate; sample noise has unit variance.
    pub class_sep: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_clients: 20,
            samples_per_client: 200,
            dims: 100,
            num_classes: 10,
            skew: 0.8,
            test_samples: 1000,
            class_sep: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub clients: Vec<Dataset>,
    pub test: Dataset,
}

impl Partition {
    /// Union of every client's training data.
    pub fn train_union(&self) -> Dataset {
        Dataset::concat(&self.clients, u32::MAX).expect("clients share a shape")
    }
}

/// The two classes a client is biased toward.
pub fn shard_classes(client: usize, num_classes: usize) -> (usize, usize) {
    ((2 * client) % num_classes, (2 * client + 1) % num_classes)
}

/// Builds the label-shard non-IID partition.
///
/// Client `i` draws `round(skew * samples)` labels alternately from its two
/// shard classes `(2i mod C, 2i+1 mod C)` and the rest uniformly. Features
/// are the class centroid plus unit Gaussian noise. The test set is balanced
/// and generated from its own stream.
pub fn make_partitioned_data(spec: &SyntheticSpec) -> Result<Partition, MlError> {
    let SyntheticSpec { seed, n_clients, samples_per_client, dims, num_classes, skew, test_samples, class_sep } =
        *spec;
    if n_clients == 0 || samples_per_client == 0 || dims == 0 || test_samples == 0 {
        return Err(MlError::InvalidPartition("counts and dims must be positive".into()));
    }
    if num_classes < 2 {
        return Err(MlError::InvalidPartition("need at least 2 classes".into()));
    }
    if !(0.0..=1.0).contains(&skew) {
        return Err(MlError::InvalidPartition(format!("skew {skew} outside [0, 1]")));
    }
    if skew == 1.0 && samples_per_client < num_classes {
        return Err(MlError::InvalidPartition(format!(
            "samples_per_client {samples_per_client} < num_classes {num_classes} at skew 1"
        )));
    }
    if !(class_sep.is_finite() && class_sep >= 0.0) {
        return Err(MlError::InvalidPartition("class_sep must be finite and non-negative".into()));
    }

    let mut centroid_rng = derive_rng("centroids", &[seed]);
    let centroids: Vec<f64> = (0..num_classes * dims)
        .map(|_| class_sep * centroid_rng.sample::<f64, _>(StandardNormal))
        .collect();

    let mut clients = Vec::with_capacity(n_clients);
    for i in 0..n_clients {
        let mut rng = derive_rng("client-data", &[seed, i as u64]);
        let (a, b) = shard_classes(i, num_classes);
        let n_shard = (skew * samples_per_client as f64).round() as usize;
        let labels: Vec<usize> = (0..samples_per_client)
            .map(|k| {
                if k < n_shard {
                    if k % 2 == 0 { a } else { b }
                } else {
                    rng.random_range(0..num_classes)
                }
            })
            .collect();
        let features = sample_features(&labels, &centroids, dims, &mut rng);
        clients.push(Dataset::new(features, dims, labels, num_classes, i as ClientId)?);
    }

    let mut rng = derive_rng("test-data", &[seed]);
    let labels: Vec<usize> = (0..test_samples).map(|k| k % num_classes).collect();
    let features = sample_features(&labels, &centroids, dims, &mut rng);
    let test = Dataset::new(features, dims, labels, num_classes, u32::MAX)?;
    Ok(Partition { clients, test })
}

fn sample_features(labels: &[usize], centroids: &[f64], dims: usize, rng: &mut SimRng) -> Vec<f64> {
    let mut out = Vec::with_capacity(labels.len() * dims);
    for &y in labels {
        let mu = &centroids[y * dims..(y + 1) * dims];
        out.extend(mu.iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)));
    }
    out
}
