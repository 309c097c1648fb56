use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::SimError;
use crate::mlcore::{ModelKind, ModelSpec};
use crate::network::NetConfig;
use crate::node::RoundBudget;
use crate::privacy::PrivacyConfig;
use crate::watermark::WatermarkConfig;

/// A number or the keyword `"auto"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AutoOr<T> {
    Value(T),
    Keyword(Auto),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Auto {
    Auto,
}

impl<T: Copy> AutoOr<T> {
    pub fn value(&self) -> Option<T> {
        match self {
            Self::Value(v) => Some(*v),
            Self::Keyword(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// `"linear"` or `"mlp"`.
    pub kind: String,
    pub hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { kind: "linear".into(), hidden: 32 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub samples_per_client: usize,
    pub dims: usize,
    pub classes: usize,
    /// Fraction of each client's samples drawn from its two shard classes.
    pub skew: f64,
    pub class_sep: f64,
    pub test_samples: usize,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            samples_per_client: 200,
            dims: 100,
            classes: 10,
            skew: 0.8,
            class_sep: 0.3,
            test_samples: 1000,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 0.05, batch_size: 20 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MiningMode {
    /// Block times drawn from exponentials; headers sealed at a low difficulty.
    Sampled,
    /// Block times follow the nonce tries actually needed at `difficulty_bits`.
    Grind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VerifyKind {
    Recompute,
    TestSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainConfig {
    pub mode: MiningMode,
    pub difficulty_bits: u32,
    /// PoW constant k in `t_B = k·c_B/(N·f)`.
    pub k: f64,
    /// Cycles per block hash attempt batch, c_B.
    pub c_b: f64,
    pub verify: VerifyKind,
    pub accuracy_tolerance: f64,
    pub reward_pool: u64,
    pub miner_subsidy: u64,
    pub deposit: u64,
    /// Confiscate deposits of clients excluded by governance.
    pub slash_excluded: bool,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            mode: MiningMode::Sampled,
            difficulty_bits: 4,
            k: 1.0,
            c_b: 40.0,
            verify: VerifyKind::Recompute,
            accuracy_tolerance: 0.02,
            reward_pool: 14_000,
            miner_subsidy: 50,
            deposit: 100,
            slash_excluded: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetSection {
    #[serde(flatten)]
    pub net: NetConfig,
    /// Ticks after local training ends during which updates are pooled.
    pub round_deadline_ticks: u64,
    pub ticks_per_unit: u64,
}

impl Default for NetSection {
    fn default() -> Self {
        Self { net: NetConfig::default(), round_deadline_ticks: 4, ticks_per_unit: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetConfig {
    pub t_sum: f64,
    /// Explicit block time; derived from `chain.k`, `chain.c_b`, N and f when absent.
    pub t_b: Option<f64>,
    /// t_T / t_B, used when neither `t_t` nor `cycles_per_sample` is given.
    pub theta: f64,
    pub t_t: Option<f64>,
    /// c_T; with f and |D| gives `t_T = |D|·c_T/f`.
    pub cycles_per_sample: Option<f64>,
    /// Computing capability f shared by all clients.
    pub capability: f64,
    pub tau: AutoOr<u32>,
    pub rounds: AutoOr<u64>,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            t_sum: 200.0,
            t_b: None,
            theta: 6.0,
            t_t: None,
            cycles_per_sample: None,
            capability: 1.0,
            tau: AutoOr::Value(1),
            rounds: AutoOr::Keyword(Auto::Auto),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BehaviorConfig {
    pub lazy_fraction: f64,
    pub disguise_std: f64,
    pub exaggeration: f64,
    /// Honest clients scan their pools for copies of their watermark.
    pub detection: bool,
}

impl Default for BehaviorConfig {
    fn default() -> Self {
        Self { lazy_fraction: 0.0, disguise_std: 0.0, exaggeration: 1.0, detection: false }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
    pub trace: bool,
    pub chain_dump: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub n_clients: usize,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub privacy: PrivacyConfig,
    pub watermark: WatermarkConfig,
    pub chain: ChainConfig,
    pub net: NetSection,
    pub budget: BudgetConfig,
    pub behavior: BehaviorConfig,
    pub output: OutputConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            n_clients: 20,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            privacy: PrivacyConfig::default(),
            watermark: WatermarkConfig::default(),
            chain: ChainConfig::default(),
            net: NetSection::default(),
            budget: BudgetConfig::default(),
            behavior: BehaviorConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, SimError> {
        let cfg: Self = toml::from_str(text).map_err(|e| SimError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model_spec(&self, input_dim: usize, num_classes: usize) -> Result<ModelSpec, SimError> {
        let kind = match self.model.kind.as_str() {
            "linear" => ModelKind::LinearSoftmax,
            "mlp" => ModelKind::OneHiddenLayerMlp { hidden: self.model.hidden },
            other => return Err(SimError::Config(format!("model.kind {other:?} is not linear or mlp"))),
        };
        Ok(ModelSpec { kind, input_dim, num_classes })
    }

    pub fn lazy_count(&self) -> usize {
        (self.behavior.lazy_fraction * self.n_clients as f64).round() as usize
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        if self.n_clients < 2 {
            return bad(format!("n_clients must be at least 2, got {}", self.n_clients));
        }
        if !(0.0..1.0).contains(&self.behavior.lazy_fraction) {
            return bad(format!("behavior.lazy_fraction {} outside [0, 1)", self.behavior.lazy_fraction));
        }
        if !(self.behavior.disguise_std >= 0.0 && self.behavior.disguise_std.is_finite()) {
            return bad("behavior.disguise_std must be non-negative".into());
        }
        if !(self.behavior.exaggeration > 0.0 && self.behavior.exaggeration.is_finite()) {
            return bad("behavior.exaggeration must be positive".into());
        }
        if self.lazy_count() >= self.n_clients {
            return bad("at least one honest client is required".into());
        }
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) || self.train.batch_size == 0 {
            return bad("train.lr must be positive and train.batch_size at least 1".into());
        }
        self.model_spec(1, 2)?;
        if self.model.kind == "mlp" && self.model.hidden == 0 {
            return bad("model.hidden must be positive".into());
        }
        if self.privacy.enabled {
            self.privacy.validate().map_err(|e| SimError::Config(e.to_string()))?;
        }
        if self.watermark.enabled {
            self.watermark.validate().map_err(SimError::Config)?;
        }
        if self.behavior.detection && !self.watermark.enabled {
            return bad("behavior.detection needs watermark.enabled".into());
        }
        self.net.net.validate().map_err(|e| SimError::Config(e.to_string()))?;
        if self.net.ticks_per_unit == 0 {
            return bad("net.ticks_per_unit must be positive".into());
        }
        let max_delay = self.net.net.delay.max_delay();
        if self.net.round_deadline_ticks <= 2 * max_delay {
            return bad(format!(
                "net.round_deadline_ticks {} must exceed twice the largest delay {max_delay}",
                self.net.round_deadline_ticks
            ));
        }
        let c = &self.chain;
        if !(c.k > 0.0 && c.c_b > 0.0 && c.k.is_finite() && c.c_b.is_finite()) {
            return bad("chain.k and chain.c_b must be positive".into());
        }
        if c.difficulty_bits > 24 {
            return bad(format!("chain.difficulty_bits {} above 24 is not desk-scale", c.difficulty_bits));
        }
        if c.deposit == 0 {
            return bad("chain.deposit must be positive".into());
        }
        let b = &self.budget;
        if b.t_t.is_some() && b.cycles_per_sample.is_some() {
            return bad("set at most one of budget.t_t and budget.cycles_per_sample".into());
        }
        if !(b.capability > 0.0 && b.capability.is_finite()) {
            return bad("budget.capability must be positive".into());
        }
        if !(b.theta > 0.0 && b.theta.is_finite()) {
            return bad("budget.theta must be positive".into());
        }
        if b.tau.value().is_none() && b.rounds.value().is_none() {
            return bad("budget.tau and budget.rounds cannot both be \"auto\"".into());
        }
        let d = &self.data;
        match d.source {
            DataSource::Synthetic => {
                if d.samples_per_client == 0 || d.dims == 0 || d.classes < 2 || d.test_samples == 0 {
                    return bad("data counts must be positive and classes at least 2".into());
                }
            }
            DataSource::Idx => {
                if d.train_images.is_none() || d.train_labels.is_none() || d.test_images.is_none() || d.test_labels.is_none() {
                    return bad("idx data needs train_images, train_labels, test_images and test_labels".into());
                }
            }
        }
        Ok(())
    }

    /// Resolves the time budget for clients holding `data_size` samples.
    pub fn resolve_budget(&self, data_size: u64) -> Result<RoundBudget, SimError> {
        let b = &self.budget;
        let f = b.capability;
        let t_b = b.t_b.unwrap_or(self.chain.k * self.chain.c_b / (self.n_clients as f64 * f));
        let t_t = match (b.t_t, b.cycles_per_sample) {
            (Some(t), _) => t,
            (None, Some(c_t)) => data_size as f64 * c_t / f,
            (None, None) => b.theta * t_b,
        };
        let budget = match (b.tau.value(), b.rounds.value()) {
            (Some(tau), None) => RoundBudget::from_times(t_t, t_b, tau, b.t_sum)?,
            (Some(tau), Some(k)) => RoundBudget::with_rounds(t_t, t_b, tau, k, b.t_sum)?,
            (None, Some(k)) => {
                let tau = RoundBudget::max_tau(t_t, t_b, k, b.t_sum)?;
                RoundBudget::with_rounds(t_t, t_b, tau, k, b.t_sum)?
            }
            (None, None) => unreachable!("rejected by validate"),
        };
        budget.check()?;
        Ok(budget)
    }
}
