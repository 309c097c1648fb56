//! Per-client behaviour inside a round: the compute budget, honest and lazy
//! uploads, watermark scanning of the pool and accusation checks.

use std::collections::BTreeSet;

use rand::seq::IteratorRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ledger::Pool;
use crate::mlcore::{train_epochs, ClientId, Dataset, LocalUpdate, MlError, ModelSpec, ParamVector};
use crate::privacy::{clip, perturb, Mechanism};
use crate::rng::{derive_seed, SimRng};
use crate::watermark::{detect, embed, Decision, WatermarkError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BudgetError {
    #[error("budget parameter {0} must be positive and finite")]
    NonPositive(&'static str),
    #[error("one round needs {round_time} time units but T_Sum is {t_sum}")]
    Infeasible { round_time: f64, t_sum: f64 },
    #[error("{rounds} rounds of {round_time} time units exceed T_Sum = {t_sum}")]
    Exceeded { rounds: u64, round_time: f64, t_sum: f64 },
}

/// Time allocation between local training and mining.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundBudget {
    /// Time per local epoch.
    pub t_t: f64,
    /// Expected block generation time per round.
    pub t_b: f64,
    pub theta: f64,
    pub tau: u32,
    pub k: u64,
    pub t_sum: f64,
}

impl RoundBudget {
    pub fn round_time(&self) -> f64 {
        self.tau as f64 * self.t_t + self.t_b
    }

    /// Largest K with `K·(τ·t_T + t_B) ≤ T_Sum`.
    pub fn max_rounds(t_t: f64, t_b: f64, tau: u32, t_sum: f64) -> Result<u64, BudgetError> {
        for (name, v) in [("t_T", t_t), ("t_B", t_b), ("T_Sum", t_sum)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(BudgetError::NonPositive(name));
            }
        }
        if tau == 0 {
            return Err(BudgetError::NonPositive("tau"));
        }
        let round_time = tau as f64 * t_t + t_b;
        if round_time > t_sum {
            return Err(BudgetError::Infeasible { round_time, t_sum });
        }
        Ok((t_sum / round_time).floor() as u64)
    }

    /// Budget with the maximal feasible number of rounds.
    pub fn from_times(t_t: f64, t_b: f64, tau: u32, t_sum: f64) -> Result<Self, BudgetError> {
        let k = Self::max_rounds(t_t, t_b, tau, t_sum)?;
        Ok(Self { t_t, t_b, theta: t_t / t_b, tau, k, t_sum })
    }

    /// Budget for an explicit K, which must satisfy the time constraint.
    pub fn with_rounds(t_t: f64, t_b: f64, tau: u32, k: u64, t_sum: f64) -> Result<Self, BudgetError> {
        let max = Self::max_rounds(t_t, t_b, tau, t_sum)?;
        if k == 0 {
            return Err(BudgetError::NonPositive("K"));
        }
        if k > max {
            return Err(BudgetError::Exceeded { rounds: k, round_time: tau as f64 * t_t + t_b, t_sum });
        }
        Ok(Self { t_t, t_b, theta: t_t / t_b, tau, k, t_sum })
    }

    /// Largest τ that still fits `k` rounds into T_Sum.
    pub fn max_tau(t_t: f64, t_b: f64, k: u64, t_sum: f64) -> Result<u32, BudgetError> {
        if k == 0 {
            return Err(BudgetError::NonPositive("K"));
        }
        let per_round = t_sum / k as f64 - t_b;
        let tau = (per_round / t_t).floor();
        if tau < 1.0 {
            return Err(BudgetError::Infeasible { round_time: t_t + t_b, t_sum: t_sum / k as f64 });
        }
        Ok(tau as u32)
    }

    /// Hard check of the time constraint.
    pub fn check(&self) -> Result<(), BudgetError> {
        if self.k as f64 * self.round_time() <= self.t_sum {
            Ok(())
        } else {
            Err(BudgetError::Exceeded { rounds: self.k, round_time: self.round_time(), t_sum: self.t_sum })
        }
    }
}

/// Budget from hardware parameters: `t_B = k·c_B/(N·f)`, `t_T = |D|·c_T/f`.
#[allow(clippy::too_many_arguments)]
pub fn compute_budget(
    k_pow: f64,
    c_b: f64,
    n: usize,
    f: f64,
    data_size: u64,
    c_t: f64,
    tau: u32,
    t_sum: f64,
) -> Result<RoundBudget, BudgetError> {
    for (name, v) in [("k", k_pow), ("c_B", c_b), ("f", f), ("c_T", c_t)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(BudgetError::NonPositive(name));
        }
    }
    if n == 0 {
        return Err(BudgetError::NonPositive("N"));
    }
    if data_size == 0 {
        return Err(BudgetError::NonPositive("|D|"));
    }
    let t_b = k_pow * c_b / (n as f64 * f);
    let t_t = data_size as f64 * c_t / f;
    RoundBudget::from_times(t_t, t_b, tau, t_sum)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Behavior {
    Honest,
    /// Copies a random pool update, adds Gaussian noise with std
    /// `disguise_std` and claims the victim's sample count times `exaggeration`.
    Lazy { disguise_std: f64, exaggeration: f64 },
}

impl Behavior {
    pub fn is_lazy(&self) -> bool {
        matches!(self, Self::Lazy { .. })
    }
}

/// Mining speed relative to an honest node: a lazy node also mines during
/// the time it would have spent training.
pub fn mining_rate_multiplier(behavior: Behavior, budget: &RoundBudget) -> f64 {
    match behavior {
        Behavior::Honest => 1.0,
        Behavior::Lazy { .. } => budget.round_time() / budget.t_b,
    }
}

/// Watermark parameters for one upload.
#[derive(Debug, Clone, Copy)]
pub struct WatermarkStep<'a> {
    pub chips: &'a [i8],
    pub snr_db: f64,
    pub use_len: usize,
}

/// Privacy parameters for one upload; `None` in [`UploadPipeline`] disables
/// both clipping and noise.
#[derive(Debug, Clone, Copy)]
pub struct PrivacyStep {
    pub clip_norm: f64,
    pub scale: f64,
    pub mechanism: Mechanism,
}

#[derive(Debug, Clone, Copy)]
pub struct UploadPipeline<'a> {
    pub privacy: Option<PrivacyStep>,
    pub watermark: Option<WatermarkStep<'a>>,
}

impl UploadPipeline<'_> {
    /// `embed(perturb(clip(delta)))`, each stage optional.
    pub fn apply(&self, delta: &ParamVector, noise_seed: u64) -> Result<ParamVector, WatermarkError> {
        let mut out = match self.privacy {
            Some(p) => perturb(&clip(delta, p.clip_norm), p.scale, p.mechanism, noise_seed),
            None => delta.clone(),
        };
        if let Some(w) = self.watermark {
            out = embed(&out, w.chips, w.snr_db, w.use_len)?.params;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainStep<'a> {
    pub spec: &'a ModelSpec,
    pub lr: f64,
    pub batch_size: usize,
    pub tau: u32,
    /// Reported per-epoch training time.
    pub t_t: f64,
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum NodeError {
    #[error(transparent)]
    Ml(#[from] MlError),
    #[error(transparent)]
    Watermark(#[from] WatermarkError),
}

/// Trains τ epochs from `global` and returns the processed delta with the
/// node's true sample count and compute time.
pub fn round_step_honest(
    client_id: ClientId,
    round: u64,
    data: &Dataset,
    global: &ParamVector,
    train: &TrainStep<'_>,
    pipeline: &UploadPipeline<'_>,
) -> Result<LocalUpdate, NodeError> {
    let seed = derive_seed("local-train", &[train.seed, client_id as u64, round]);
    let trained = train_epochs(global, data, train.spec, train.lr, train.batch_size, seed, 0..train.tau)?;
    let delta = trained.sub(global)?;
    let noise_seed = derive_seed("upload-noise", &[train.seed, client_id as u64, round]);
    let params = pipeline.apply(&delta, noise_seed)?;
    Ok(LocalUpdate {
        client_id,
        round,
        params,
        samples: data.len() as u64,
        compute_time: train.tau as f64 * train.t_t,
    })
}

/// Copies a uniformly chosen update of this round from `pool` (never the
/// node's own). Returns `None` when there is nothing to copy.
pub fn round_step_lazy(
    client_id: ClientId,
    round: u64,
    pool: &Pool,
    disguise_std: f64,
    exaggeration: f64,
    rng: &mut SimRng,
) -> Option<LocalUpdate> {
    let victim = pool.values().filter(|u| u.client_id != client_id && u.round == round).choose(rng)?;
    let params = if disguise_std > 0.0 {
        let noisy = victim.params.as_slice().iter().map(|v| v + disguise_std * rng.sample::<f64, _>(StandardNormal)).collect();
        ParamVector::new(noisy).ok()?
    } else {
        victim.params.clone()
    };
    let samples = ((victim.samples as f64 * exaggeration).round() as u64).max(1);
    Some(LocalUpdate { client_id, round, params, samples, compute_time: victim.compute_time })
}

#[derive(Debug, Clone, Copy)]
pub struct ScanConfig {
    pub use_len: usize,
    pub snr_db: f64,
    pub gamma: f64,
}

/// Clients in `pool` (other than `own_id`) whose update carries `own_chips`.
pub fn pool_scan_for_lazy(own_id: ClientId, own_chips: &[i8], pool: &Pool, cfg: &ScanConfig) -> BTreeSet<ClientId> {
    pool.values()
        .filter(|u| u.client_id != own_id && confirm_copy(own_chips, &u.params, cfg))
        .map(|u| u.client_id)
        .collect()
}

/// Recomputation a third party performs with the accuser's published chips.
pub fn confirm_copy(chips: &[i8], params: &ParamVector, cfg: &ScanConfig) -> bool {
    matches!(detect(params, chips, cfg.use_len, cfg.snr_db, cfg.gamma), Ok(Decision::Detected))
}

/// Confirmations needed out of `n` nodes for a network-wide exclusion.
pub fn exclusion_quorum(n: usize) -> usize {
    n.div_ceil(2)
}
