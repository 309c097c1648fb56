//! Blocks, proof-of-work, verification, longest-chain fork choice and the
//! task contract.
//!
//! A block body carries the round's update records (digests plus reported
//! metadata), the sample-size weighted aggregate of the uploaded deltas and
//! each contributor's weight. The header commits to the body through two
//! digests and is sealed with a nonce whose SHA-256 hash has at least
//! `difficulty_bits` leading zero bits.

mod block;
mod chain;
pub mod codec;
pub mod contract;
mod pow;
mod verify;

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use crate::mlcore::{ClientId, LocalUpdate, MlError};

pub use block::{hash_bytes, leading_zero_bits, Block, BlockBody, BlockHeader, UpdateRecord, HEADER_LEN, HEADER_VERSION};
pub use chain::{fork_order, resolve_fork, verify_chain, BlockStore, Chain, ChainAuditError};
pub use contract::{split_proportional, Bid, ContractError, ContractState, Phase, TaskSpec, Totals};
pub use pow::{mine, MineError, Sealed};
pub use verify::{verify_block, RejectReason, VerifyContext, VerifyMode};

pub type Digest = [u8; 32];

/// A node's received updates for one round, keyed by client.
pub type Pool = BTreeMap<ClientId, Arc<LocalUpdate>>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LedgerError {
    #[error("chains do not share a genesis block")]
    DifferentGenesis,
    #[error("block at height {height} does not extend the chain tip")]
    BadLink { height: u64 },
    #[error("parent block {0} unknown")]
    UnknownParent(String),
    #[error(transparent)]
    Ml(#[from] MlError),
}

pub fn short_hex(d: &Digest) -> String {
    hex::encode(&d[..6])
}
