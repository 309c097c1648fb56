use serde::{Deserialize, Serialize};

use super::{ClientId, LocalUpdate, MlError, ParamVector};

/// Aggregation rule identifiers a task can name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum WeightRule {
    #[default]
    BySampleSize,
}

/// Per-client weights `n_i / Σ n_j`, in ascending client-id order.
pub fn contribution_weights(updates: &[&LocalUpdate]) -> Result<Vec<(ClientId, f64)>, MlError> {
    if updates.is_empty() {
        return Err(MlError::EmptyUpdates);
    }
    let mut total: u64 = 0;
    for u in updates {
        if u.samples == 0 {
            return Err(MlError::ZeroSamples { client: u.client_id });
        }
        total += u.samples;
    }
    let mut weights: Vec<(ClientId, f64)> =
        updates.iter().map(|u| (u.client_id, u.samples as f64 / total as f64)).collect();
    weights.sort_by_key(|(id, _)| *id);
    Ok(weights)
}

/// Sample-size weighted mean of the update parameters.
///
/// Summation runs in ascending client id, so the result is bit-identical for
/// any permutation of `updates`.
pub fn aggregate(updates: &[&LocalUpdate], rule: WeightRule) -> Result<ParamVector, MlError> {
    let WeightRule::BySampleSize = rule;
    if updates.is_empty() {
        return Err(MlError::EmptyUpdates);
    }
    let dim = updates[0].params.dim();
    if let Some(bad) = updates.iter().find(|u| u.params.dim() != dim) {
        return Err(MlError::Shape { expected: dim, actual: bad.params.dim() });
    }
    let mut ordered: Vec<&LocalUpdate> = updates.to_vec();
    ordered.sort_by_key(|u| u.client_id);
    let weights = contribution_weights(&ordered)?;
    let mut acc = vec![0.0; dim];
    for (u, (_, w)) in ordered.iter().zip(&weights) {
        for (a, v) in acc.iter_mut().zip(u.params.as_slice()) {
            *a += w * v;
        }
    }
    ParamVector::new(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn upd(id: ClientId, samples: u64, values: Vec<f64>) -> LocalUpdate {
        LocalUpdate { client_id: id, round: 1, params: ParamVector::new(values).unwrap(), samples, compute_time: 0.0 }
    }

    #[test]
    fn single_update_is_identity() {
        let u = upd(3, 7, vec![0.25, -1.5, 3.0]);
        assert!(aggregate(&[&u], WeightRule::BySampleSize).unwrap().bit_eq(&u.params));
    }

    #[test]
    fn symmetric_pair_cancels() {
        let a = upd(0, 5, vec![1.0, -2.0, 0.5]);
        let b = upd(1, 5, vec![-1.0, 2.0, -0.5]);
        let agg = aggregate(&[&a, &b], WeightRule::BySampleSize).unwrap();
        assert!(agg.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weighted_sum_matches_direct_oracle() {
        let ups = [
            upd(0, 1, vec![1.0, 2.0, -3.0]),
            upd(1, 2, vec![0.5, -1.0, 4.0]),
            upd(2, 3, vec![-2.0, 0.25, 1.0]),
        ];
        let refs: Vec<&LocalUpdate> = ups.iter().collect();
        let agg = aggregate(&refs, WeightRule::BySampleSize).unwrap();
        // dot product of each coordinate column with (1,2,3)/6
        let w = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
        for j in 0..3 {
            let col: Vec<f64> = ups.iter().map(|u| u.params.as_slice()[j]).collect();
            let expected: f64 = col.iter().zip(&w).map(|(a, b)| a * b).sum();
            assert!((agg.as_slice()[j] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn errors() {
        assert_eq!(aggregate(&[], WeightRule::BySampleSize), Err(MlError::EmptyUpdates));
        let a = upd(0, 1, vec![1.0]);
        let b = upd(1, 1, vec![1.0, 2.0]);
        assert!(matches!(aggregate(&[&a, &b], WeightRule::BySampleSize), Err(MlError::Shape { .. })));
        let z = upd(2, 0, vec![1.0]);
        assert_eq!(aggregate(&[&a, &z], WeightRule::BySampleSize), Err(MlError::ZeroSamples { client: 2 }));
    }

    proptest! {
        #[test]
        fn permutation_invariant(
            rows in proptest::collection::vec((1u64..50, proptest::collection::vec(-10.0f64..10.0, 4)), 1..8),
            seed in any::<u64>(),
        ) {
            let ups: Vec<LocalUpdate> = rows
                .into_iter()
                .enumerate()
                .map(|(i, (n, v))| upd(i as ClientId, n, v))
                .collect();
            let mut refs: Vec<&LocalUpdate> = ups.iter().collect();
            let base = aggregate(&refs, WeightRule::BySampleSize).unwrap();
            use rand::seq::SliceRandom;
            refs.shuffle(&mut crate::rng::rng_from_seed(seed));
            let shuffled = aggregate(&refs, WeightRule::BySampleSize).unwrap();
            prop_assert!(base.bit_eq(&shuffled));
            let total: f64 = contribution_weights(&refs).unwrap().iter().map(|(_, w)| w).sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
    }
}
