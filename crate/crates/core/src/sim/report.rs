use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::engine::RunOutcome;
use super::SimError;
use crate::ledger::codec::{chain_to_json, decode_chain, encode_chain};
use crate::ledger::contract::Totals;
use crate::ledger::verify_chain;
use crate::mlcore::ClientId;
use crate::node::RoundBudget;
use crate::watermark::RocRow;

/// First line of every CSV the simulator writes.
pub const CSV_VERSION_LINE: &str = "# blade-sim v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u64,
    pub start_tick: u64,
    pub end_tick: u64,
    /// Loss of the round's global model on the union of client training data.
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub chain_height: u64,
    /// Competing valid blocks at the round's height beyond the first.
    pub forks: usize,
    pub winner: Option<ClientId>,
    pub block_hash: String,
    pub aggregate_digest: String,
    /// Updates listed in the round's canonical block.
    pub included: usize,
    pub accusations: usize,
    /// Clients banned by governance in this round.
    pub exclusions: usize,
    pub banned_total: usize,
    pub lazy_submissions: usize,
    /// Lazy submissions missing from the canonical block.
    pub lazy_excluded: usize,
    pub honest_submissions: usize,
    pub honest_excluded: usize,
    pub rejected_blocks: usize,
    /// Mean noise scale in force among honest clients.
    pub sigma: f64,
    /// All honest clients share the tip and the global model.
    pub consensus: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub n_clients: usize,
    pub lazy_clients: Vec<ClientId>,
    pub budget: RoundBudget,
    pub rounds_executed: u64,
    pub final_accuracy: f64,
    pub final_train_loss: f64,
    pub final_test_loss: f64,
    pub chain_height: u64,
    pub final_model_digest: String,
    pub digests_agree: bool,
    pub consensus_all_rounds: bool,
    pub lazy_submissions: usize,
    pub lazy_excluded: usize,
    pub honest_submissions: usize,
    pub honest_excluded: usize,
    pub detection_tpr: Option<f64>,
    pub detection_fpr: Option<f64>,
    pub banned: Vec<ClientId>,
    pub blocks_by_miner: BTreeMap<ClientId, u64>,
    pub trainer_rewards: BTreeMap<ClientId, u64>,
    pub miner_rewards: BTreeMap<ClientId, u64>,
    pub refunds: BTreeMap<ClientId, u64>,
    pub publisher_refund: u64,
    pub slashed: u64,
    pub totals: Totals,
    pub reputation: BTreeMap<ClientId, i64>,
    pub elapsed_ticks: u64,
    pub wall_clock_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rounds: Vec<RoundRecord>,
    pub summary: RunSummary,
}

impl MetricsReport {
    pub fn metrics_csv(&self) -> Result<String, SimError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rounds {
            w.serialize(r).map_err(|e| SimError::Internal(e.to_string()))?;
        }
        let body = w.into_inner().map_err(|e| SimError::Internal(e.to_string()))?;
        Ok(format!("{CSV_VERSION_LINE}\n{}", String::from_utf8(body).expect("csv is utf-8")))
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> SimError {
    SimError::Io(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), SimError> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// Writes `metrics.csv`, `summary.json` and, when enabled, `trace.jsonl`
/// and `chain.bin` / `chain.json`.
pub fn write_outputs(outcome: &RunOutcome, dir: &Path, chain_dump: bool) -> Result<(), SimError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write_file(&dir.join("metrics.csv"), outcome.report.metrics_csv()?.as_bytes())?;
    let summary = serde_json::to_vec_pretty(&outcome.report.summary).map_err(|e| SimError::Internal(e.to_string()))?;
    write_file(&dir.join("summary.json"), &summary)?;
    if !outcome.trace.is_empty() {
        let path = dir.join("trace.jsonl");
        let mut out = Vec::new();
        for r in &outcome.trace {
            serde_json::to_writer(&mut out, r).map_err(|e| SimError::Internal(e.to_string()))?;
            out.write_all(b"\n").expect("vec write");
        }
        write_file(&path, &out)?;
    }
    if chain_dump {
        write_file(&dir.join("chain.bin"), &encode_chain(&outcome.chain))?;
        let json = serde_json::to_vec_pretty(&chain_to_json(&outcome.chain)).map_err(|e| SimError::Internal(e.to_string()))?;
        write_file(&dir.join("chain.json"), &json)?;
    }
    Ok(())
}

pub fn write_roc_csv(rows: &[RocRow], path: &Path) -> Result<(), SimError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| SimError::Internal(e.to_string()))?;
    }
    let body = w.into_inner().map_err(|e| SimError::Internal(e.to_string()))?;
    let text = format!("{CSV_VERSION_LINE}\n{}", String::from_utf8(body).expect("csv is utf-8"));
    write_file(path, text.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainAudit {
    pub blocks: usize,
    pub height: u64,
    pub tip: String,
    pub valid: bool,
    pub error: Option<String>,
}

/// Decodes a binary chain dump and audits linkage, PoW and digests.
pub fn audit_chain_file(path: &Path, min_difficulty: u32) -> Result<ChainAudit, SimError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let chain = decode_chain(&bytes).map_err(|e| SimError::Data(format!("{}: {e}", path.display())))?;
    let result = verify_chain(&chain, min_difficulty);
    Ok(ChainAudit {
        blocks: chain.blocks().len(),
        height: chain.height(),
        tip: hex::encode(chain.tip().hash()),
        valid: result.is_ok(),
        error: result.err().map(|e| e.to_string()),
    })
}
