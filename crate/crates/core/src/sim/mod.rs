//! Experiment orchestration: configuration, the round engine, metrics,
//! parameter sweeps and dataset ingestion.

mod config;
mod engine;
mod idx;
mod report;
mod sweep;

use thiserror::Error;

use crate::node::BudgetError;

pub use config::{
    Auto, AutoOr, BehaviorConfig, BudgetConfig, ChainConfig, DataConfig, DataSource, MiningMode, ModelConfig, NetSection,
    OutputConfig, SimConfig, TrainConfig, VerifyKind,
};
pub use engine::{RunOutcome, Simulation};
pub use idx::{load_idx, write_idx, IdxError, IMAGES_MAGIC, LABELS_MAGIC};
pub use report::{audit_chain_file, write_outputs, write_roc_csv, ChainAudit, MetricsReport, RoundRecord, RunSummary, CSV_VERSION_LINE};
pub use sweep::{apply_axis, summarize, sweep, sweep_seed, write_sweep_csv, SweepAxis, SweepPoint, SweepRun, SweepTable};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("infeasible budget: {0}")]
    Budget(#[from] BudgetError),
    #[error("every honest client diverged in round {round}")]
    Diverged { round: u64 },
    #[error("io: {0}")]
    Io(String),
    #[error("data: {0}")]
    Data(String),
    #[error("internal: {0}")]
    Internal(String),
}

impl SimError {
    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Budget(_) => 3,
            Self::Diverged { .. } => 4,
            Self::Io(_) | Self::Data(_) => 5,
            Self::Internal(_) => 1,
        }
    }
}

impl From<IdxError> for SimError {
    fn from(e: IdxError) -> Self {
        match e {
            IdxError::Io { .. } => Self::Io(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

/// Runs one configuration end to end and writes its outputs when
/// `output.dir` is set.
pub fn run(cfg: &SimConfig) -> Result<MetricsReport, SimError> {
    let outcome = Simulation::new(cfg.clone())?.run()?;
    if let Some(dir) = &cfg.output.dir {
        write_outputs(&outcome, dir, cfg.output.chain_dump)?;
    }
    Ok(outcome.report)
}
