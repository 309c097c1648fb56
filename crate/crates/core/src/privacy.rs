//! Local differential privacy for uploaded model deltas.
//!
//! A client clips its delta to L2 norm `clip_norm`, then adds i.i.d. noise per
//! coordinate. Gaussian noise is calibrated with the classic
//! `(ε, δ)` mechanism `σ = Δ·sqrt(2 ln(1.25/δ)) / ε`; Laplace noise uses an
//! explicit scale. An optional decay rule shrinks the noise when accuracy
//! plateaus.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mlcore::ParamVector;
use crate::rng::derive_rng;

/// Accuracy gains at or below this are treated as no improvement.
pub const PLATEAU_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PrivacyError {
    #[error("epsilon must be positive, got {0}")]
    Epsilon(f64),
    #[error("delta must lie in (0, 1), got {0}")]
    Delta(f64),
    #[error("sensitivity must be non-negative, got {0}")]
    Sensitivity(f64),
    #[error("invalid privacy config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    #[default]
    Gaussian,
    Laplace,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NoiseDecay {
    #[default]
    None,
    Adaptive { rate: f64, patience: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivacyConfig {
    pub enabled: bool,
    pub epsilon: f64,
    pub delta: f64,
    pub clip_norm: f64,
    pub mechanism: Mechanism,
    /// Laplace scale λ; required when `mechanism = "laplace"`.
    pub laplace_scale: Option<f64>,
    pub decay: NoiseDecay,
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            epsilon: 5.0,
            delta: 1e-5,
            clip_norm: 1.0,
            mechanism: Mechanism::Gaussian,
            laplace_scale: None,
            decay: NoiseDecay::None,
        }
    }
}

impl PrivacyConfig {
    pub fn validate(&self) -> Result<(), PrivacyError> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(PrivacyError::Epsilon(self.epsilon));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(PrivacyError::Delta(self.delta));
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return Err(PrivacyError::Config(format!("clip_norm {} must be positive", self.clip_norm)));
        }
        if self.mechanism == Mechanism::Laplace {
            match self.laplace_scale {
                Some(s) if s > 0.0 && s.is_finite() => {}
                _ => return Err(PrivacyError::Config("laplace mechanism needs laplace_scale > 0".into())),
            }
        }
        if let NoiseDecay::Adaptive { rate, patience } = self.decay {
            if !(rate > 0.0 && rate < 1.0) {
                return Err(PrivacyError::Config(format!("decay rate {rate} outside (0, 1)")));
            }
            if patience == 0 {
                return Err(PrivacyError::Config("decay patience must be at least 1".into()));
            }
        }
        Ok(())
    }

    /// Initial per-coordinate noise scale (σ or λ).
    pub fn initial_scale(&self) -> Result<f64, PrivacyError> {
        self.validate()?;
        match self.mechanism {
            Mechanism::Gaussian => calibrate_sigma(self.epsilon, self.delta, self.clip_norm),
            Mechanism::Laplace => Ok(self.laplace_scale.expect("validated")),
        }
    }
}

/// Scales `params` down to L2 norm `c` when it exceeds it.
pub fn clip(params: &ParamVector, c: f64) -> ParamVector {
    let norm = params.l2_norm();
    if norm <= c {
        return params.clone();
    }
    params.scale(c / norm).expect("scaling a finite vector by a finite factor")
}

/// Gaussian-mechanism noise standard deviation.
pub fn calibrate_sigma(epsilon: f64, delta: f64, sensitivity: f64) -> Result<f64, PrivacyError> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(PrivacyError::Epsilon(epsilon));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(PrivacyError::Delta(delta));
    }
    if !(sensitivity >= 0.0 && sensitivity.is_finite()) {
        return Err(PrivacyError::Sensitivity(sensitivity));
    }
    Ok(sensitivity * (2.0 * (1.25 / delta).ln()).sqrt() / epsilon)
}

/// Adds i.i.d. noise with scale `scale` to every coordinate.
pub fn perturb(params: &ParamVector, scale: f64, mechanism: Mechanism, seed: u64) -> ParamVector {
    assert!(scale >= 0.0 && scale.is_finite(), "noise scale must be finite and non-negative");
    if scale == 0.0 {
        return params.clone();
    }
    let mut rng = derive_rng("ldp-noise", &[seed]);
    let noisy = params
        .as_slice()
        .iter()
        .map(|&v| {
            let noise = match mechanism {
                Mechanism::Gaussian => scale * rng.sample::<f64, _>(StandardNormal),
                Mechanism::Laplace => {
                    // inverse CDF on u in (-1/2, 1/2)
                    let u: f64 = rng.random::<f64>() - 0.5;
                    let tail = (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE);
                    -scale * u.signum() * tail.ln()
                }
            };
            v + noise
        })
        .collect();
    ParamVector::new(noisy).expect("noise is finite")
}

/// Plateau-triggered noise decay.
///
/// An accuracy entry counts as improving only when it beats its predecessor
/// by more than [`PLATEAU_TOLERANCE`]; the first entry has no predecessor and
/// never counts as improving. When the trailing run of non-improving entries
/// reaches `patience`, the scale is multiplied by `rate`.
pub fn adaptive_sigma(history: &[f64], sigma_current: f64, rate: f64, patience: usize) -> f64 {
    assert!(rate > 0.0 && rate < 1.0, "decay rate must lie in (0, 1)");
    let stale = stale_run(history);
    if stale >= patience.max(1) {
        rate * sigma_current
    } else {
        sigma_current
    }
}

fn stale_run(history: &[f64]) -> usize {
    let mut run = 0;
    for i in (0..history.len()).rev() {
        let improving = i > 0 && history[i] > history[i - 1] + PLATEAU_TOLERANCE;
        if improving {
            break;
        }
        run += 1;
    }
    run
}

/// Stateful wrapper used by nodes: after each decay the plateau window
/// restarts, so consecutive decays are at least `patience` rounds apart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub scale: f64,
    history: Vec<f64>,
    window_start: usize,
    pub decays: u32,
}

impl NoiseSchedule {
    pub fn new(scale: f64) -> Self {
        Self { scale, history: Vec::new(), window_start: 0, decays: 0 }
    }

    /// Records one round's accuracy and applies `decay`.
    pub fn observe(&mut self, accuracy: f64, decay: NoiseDecay) {
        self.history.push(accuracy);
        if let NoiseDecay::Adaptive { rate, patience } = decay {
            let next = adaptive_sigma(&self.history[self.window_start..], self.scale, rate, patience);
            if next < self.scale {
                self.scale = next;
                self.decays += 1;
                self.window_start = self.history.len();
            }
        }
    }
}
