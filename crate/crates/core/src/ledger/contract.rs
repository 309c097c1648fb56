//! Task escrow, bidder selection and reward settlement. Amounts are integer
//! token units so that conservation checks are exact.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::block::Block;
use crate::mlcore::ClientId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContractError {
    #[error("invalid task: {0}")]
    InvalidTask(&'static str),
    #[error("invalid bid from client {0}")]
    InvalidBid(ClientId),
    #[error("duplicate bid from client {0}")]
    DuplicateBid(ClientId),
    #[error("{have} bidders, {need} required")]
    InsufficientBidders { have: usize, need: usize },
    #[error("operation not allowed in phase {0:?}")]
    WrongPhase(Phase),
    #[error("round {0} outside the task's rounds")]
    RoundOutOfRange(u64),
    #[error("round {0} already settled")]
    AlreadySettled(u64),
    #[error("client {0} is not a selected trainer")]
    NotSelected(ClientId),
    #[error("payout {requested} exceeds escrow {available}")]
    Overspend { requested: u64, available: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Bidding,
    Training,
    Completed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub required_data_size: u64,
    pub accuracy_target: f64,
    pub latency: f64,
    pub reward_pool: u64,
    pub rounds: u64,
    pub n_required: usize,
    /// Minted per accepted block for its miner.
    pub miner_subsidy: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bid {
    pub client_id: ClientId,
    pub capability: f64,
    pub data_size: u64,
    pub asking_cost: f64,
    pub deposit: u64,
}

impl Bid {
    fn score(&self) -> f64 {
        self.capability / self.asking_cost
    }
}

/// Money-flow totals. `inflow == outflow + held` holds in every state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub inflow: u64,
    pub outflow: u64,
    pub held: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractState {
    task: TaskSpec,
    phase: Phase,
    escrow: u64,
    staked: u64,
    deposits: BTreeMap<ClientId, u64>,
    selected: BTreeSet<ClientId>,
    trainer_rewards: BTreeMap<ClientId, u64>,
    miner_rewards: BTreeMap<ClientId, u64>,
    refunds: BTreeMap<ClientId, u64>,
    reputation: BTreeMap<ClientId, i64>,
    settled: BTreeSet<u64>,
    minted: u64,
    publisher_refund: u64,
    slashed: u64,
}

impl ContractState {
    /// Locks the reward pool in escrow and opens bidding.
    pub fn publish_task(task: TaskSpec) -> Result<Self, ContractError> {
        if task.rounds == 0 {
            return Err(ContractError::InvalidTask("rounds must be positive"));
        }
        if task.n_required == 0 {
            return Err(ContractError::InvalidTask("at least one trainer required"));
        }
        if !(task.latency.is_finite() && task.latency > 0.0) {
            return Err(ContractError::InvalidTask("latency must be positive"));
        }
        if !(0.0..=1.0).contains(&task.accuracy_target) {
            return Err(ContractError::InvalidTask("accuracy target outside [0, 1]"));
        }
        Ok(Self {
            escrow: task.reward_pool,
            task,
            phase: Phase::Bidding,
            staked: 0,
            deposits: BTreeMap::new(),
            selected: BTreeSet::new(),
            trainer_rewards: BTreeMap::new(),
            miner_rewards: BTreeMap::new(),
            refunds: BTreeMap::new(),
            reputation: BTreeMap::new(),
            settled: BTreeSet::new(),
            minted: 0,
            publisher_refund: 0,
            slashed: 0,
        })
    }

    /// Picks the `n_required` bids with the highest capability per unit cost
    /// (ties to the lower id). Every bidder stakes its deposit; losers are
    /// refunded immediately.
    pub fn select_winners(&self, bids: &[Bid]) -> Result<Self, ContractError> {
        self.expect_phase(Phase::Bidding)?;
        let mut seen = BTreeSet::new();
        for b in bids {
            let valid = b.capability.is_finite()
                && b.capability > 0.0
                && b.asking_cost.is_finite()
                && b.asking_cost > 0.0
                && b.deposit > 0
                && b.data_size > 0;
            if !valid {
                return Err(ContractError::InvalidBid(b.client_id));
            }
            if !seen.insert(b.client_id) {
                return Err(ContractError::DuplicateBid(b.client_id));
            }
        }
        let need = self.task.n_required;
        if bids.len() < need {
            return Err(ContractError::InsufficientBidders { have: bids.len(), need });
        }
        let mut ranked: Vec<&Bid> = bids.iter().collect();
        ranked.sort_by(|a, b| b.score().total_cmp(&a.score()).then(a.client_id.cmp(&b.client_id)));

        let mut next = self.clone();
        for (rank, b) in ranked.iter().enumerate() {
            next.staked += b.deposit;
            if rank < need {
                next.selected.insert(b.client_id);
                next.deposits.insert(b.client_id, b.deposit);
                next.reputation.entry(b.client_id).or_insert(0);
            } else {
                *next.refunds.entry(b.client_id).or_insert(0) += b.deposit;
            }
        }
        next.phase = Phase::Training;
        Ok(next)
    }

    /// Escrow share for `round` (1-based): `pool / rounds`, with the remainder
    /// assigned to the last round.
    pub fn round_pool(&self, round: u64) -> u64 {
        let base = self.task.reward_pool / self.task.rounds;
        if round == self.task.rounds {
            base + self.task.reward_pool % self.task.rounds
        } else {
            base
        }
    }

    /// Pays the round pool to the block's contributors in proportion to their
    /// reported samples (largest-remainder rounding, ties to the lower id)
    /// and mints the miner subsidy.
    pub fn settle_rewards(&self, block: &Block) -> Result<Self, ContractError> {
        self.expect_phase(Phase::Training)?;
        let round = block.header.round;
        if round == 0 || round > self.task.rounds {
            return Err(ContractError::RoundOutOfRange(round));
        }
        if self.settled.contains(&round) {
            return Err(ContractError::AlreadySettled(round));
        }
        for r in &block.body.updates {
            if !self.selected.contains(&r.client_id) {
                return Err(ContractError::NotSelected(r.client_id));
            }
        }
        let shares: Vec<(ClientId, u64)> =
            block.body.updates.iter().map(|r| (r.client_id, r.samples)).collect();
        let payouts = split_proportional(self.round_pool(round), &shares);
        let requested: u64 = payouts.iter().map(|(_, v)| v).sum();
        if requested > self.escrow {
            return Err(ContractError::Overspend { requested, available: self.escrow });
        }

        let mut next = self.clone();
        next.escrow -= requested;
        for (id, v) in payouts {
            *next.trainer_rewards.entry(id).or_insert(0) += v;
        }
        *next.miner_rewards.entry(block.header.miner_id).or_insert(0) += self.task.miner_subsidy;
        next.minted += self.task.miner_subsidy;
        next.settled.insert(round);
        Ok(next)
    }

    /// Adjusts a client's reputation by one per verification outcome.
    pub fn record_verification(&mut self, client: ClientId, accepted: bool) {
        *self.reputation.entry(client).or_insert(0) += if accepted { 1 } else { -1 };
    }

    /// Closes the task: deposits go back to their owners except those of
    /// `slashed` clients, which go to the publisher together with the
    /// unspent escrow.
    pub fn finish(&self, slashed: &BTreeSet<ClientId>) -> Result<Self, ContractError> {
        if self.phase == Phase::Completed {
            return Err(ContractError::WrongPhase(self.phase));
        }
        let mut next = self.clone();
        for (id, deposit) in std::mem::take(&mut next.deposits) {
            if slashed.contains(&id) {
                next.slashed += deposit;
                next.publisher_refund += deposit;
            } else {
                *next.refunds.entry(id).or_insert(0) += deposit;
            }
        }
        next.publisher_refund += next.escrow;
        next.escrow = 0;
        next.phase = Phase::Completed;
        Ok(next)
    }

    pub fn totals(&self) -> Totals {
        let sum = |m: &BTreeMap<ClientId, u64>| m.values().sum::<u64>();
        Totals {
            inflow: self.task.reward_pool + self.staked + self.minted,
            outflow: sum(&self.trainer_rewards) + sum(&self.miner_rewards) + sum(&self.refunds) + self.publisher_refund,
            held: self.escrow + sum(&self.deposits),
        }
    }

    fn expect_phase(&self, phase: Phase) -> Result<(), ContractError> {
        if self.phase == phase {
            Ok(())
        } else {
            Err(ContractError::WrongPhase(self.phase))
        }
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }
    pub fn phase(&self) -> Phase {
        self.phase
    }
    pub fn escrow(&self) -> u64 {
        self.escrow
    }
    pub fn selected(&self) -> &BTreeSet<ClientId> {
        &self.selected
    }
    pub fn is_selected(&self, id: ClientId) -> bool {
        self.selected.contains(&id)
    }
    pub fn trainer_rewards(&self) -> &BTreeMap<ClientId, u64> {
        &self.trainer_rewards
    }
    pub fn miner_rewards(&self) -> &BTreeMap<ClientId, u64> {
        &self.miner_rewards
    }
    pub fn refunds(&self) -> &BTreeMap<ClientId, u64> {
        &self.refunds
    }
    pub fn reputation(&self) -> &BTreeMap<ClientId, i64> {
        &self.reputation
    }
    pub fn settled_rounds(&self) -> &BTreeSet<u64> {
        &self.settled
    }
    pub fn publisher_refund(&self) -> u64 {
        self.publisher_refund
    }
    pub fn slashed_total(&self) -> u64 {
        self.slashed
    }
    pub fn minted(&self) -> u64 {
        self.minted
    }
}

/// Splits `amount` by integer weights with the largest-remainder method.
/// Returns an empty vector when all weights are zero.
pub fn split_proportional(amount: u64, weights: &[(ClientId, u64)]) -> Vec<(ClientId, u64)> {
    let total: u128 = weights.iter().map(|&(_, w)| w as u128).sum();
    if total == 0 {
        return Vec::new();
    }
    let mut out: Vec<(ClientId, u64)> = Vec::with_capacity(weights.len());
    let mut rems: Vec<(u128, ClientId, usize)> = Vec::with_capacity(weights.len());
    let mut assigned = 0u64;
    for (i, &(id, w)) in weights.iter().enumerate() {
        let num = amount as u128 * w as u128;
        let q = (num / total) as u64;
        assigned += q;
        out.push((id, q));
        rems.push((num % total, id, i));
    }
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, _, i) in rems.iter().take((amount - assigned) as usize) {
        out[i].1 += 1;
    }
    out
}
