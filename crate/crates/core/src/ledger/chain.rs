use std::cmp::Ordering;
use std::collections::HashMap;
use std::sync::Arc;

use thiserror::Error;

use super::block::Block;
use super::{Digest, LedgerError};
use crate::mlcore::ParamVector;

/// A linear chain from genesis to tip.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    blocks: Vec<Arc<Block>>,
}

impl Chain {
    pub fn new(genesis: Block) -> Self {
        Self { blocks: vec![Arc::new(genesis)] }
    }

    pub fn from_blocks(blocks: Vec<Arc<Block>>) -> Result<Self, LedgerError> {
        let mut it = blocks.into_iter();
        let genesis = it.next().ok_or(LedgerError::BadLink { height: 0 })?;
        let mut chain = Self { blocks: vec![genesis] };
        for b in it {
            chain.push(b)?;
        }
        Ok(chain)
    }

    /// Appends `block` if it links to the current tip.
    pub fn push(&mut self, block: Arc<Block>) -> Result<(), LedgerError> {
        let tip = self.tip();
        if block.header.prev_hash != tip.hash() || block.header.height != tip.header.height + 1 {
            return Err(LedgerError::BadLink { height: block.header.height });
        }
        self.blocks.push(block);
        Ok(())
    }

    pub fn genesis(&self) -> &Block {
        &self.blocks[0]
    }

    pub fn tip(&self) -> &Block {
        self.blocks.last().expect("chain holds genesis")
    }

    pub fn height(&self) -> u64 {
        self.tip().header.height
    }

    pub fn blocks(&self) -> &[Arc<Block>] {
        &self.blocks
    }

    /// Initial model plus every block's aggregate delta.
    pub fn global_model(&self) -> Result<ParamVector, LedgerError> {
        let mut model = self.genesis().body.aggregate.clone();
        for b in &self.blocks[1..] {
            model = model.add(&b.body.aggregate)?;
        }
        Ok(model)
    }
}

/// Longest chain first; among equal heights the lower tip hash wins.
/// `Greater` means `a` is preferred.
pub fn fork_order(a: &Chain, b: &Chain) -> Ordering {
    a.height().cmp(&b.height()).then_with(|| b.tip().hash().cmp(&a.tip().hash()))
}

pub fn resolve_fork<'a>(a: &'a Chain, b: &'a Chain) -> Result<&'a Chain, LedgerError> {
    if a.genesis().hash() != b.genesis().hash() {
        return Err(LedgerError::DifferentGenesis);
    }
    Ok(if fork_order(a, b) == Ordering::Less { b } else { a })
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("block at height {height}: {reason}")]
pub struct ChainAuditError {
    pub height: u64,
    pub reason: &'static str,
}

/// Structural audit: linkage, proof of work at `min_difficulty`, body and
/// aggregate digests. Update provenance needs the pools and is not checked.
pub fn verify_chain(chain: &Chain, min_difficulty: u32) -> Result<(), ChainAuditError> {
    let fail = |height, reason| Err(ChainAuditError { height, reason });
    let g = chain.genesis();
    if g.header.height != 0 || g.header.prev_hash != [0; 32] {
        return fail(0, "malformed genesis");
    }
    for (i, b) in chain.blocks().iter().enumerate() {
        let h = &b.header;
        if h.body_digest != b.body.digest() {
            return fail(h.height, "body digest mismatch");
        }
        if h.aggregate_digest != b.body.aggregate.digest() {
            return fail(h.height, "aggregate digest mismatch");
        }
        if b.body.aggregate.dim() != g.body.aggregate.dim() {
            return fail(h.height, "aggregate dimension mismatch");
        }
        if i == 0 {
            continue;
        }
        let parent = &chain.blocks()[i - 1].header;
        if h.prev_hash != parent.hash() || h.height != parent.height + 1 {
            return fail(h.height, "broken link");
        }
        if h.difficulty_bits < min_difficulty || !h.meets_difficulty() {
            return fail(h.height, "insufficient proof of work");
        }
    }
    Ok(())
}

/// All blocks a node has accepted, with the best tip under [`fork_order`].
#[derive(Debug, Clone)]
pub struct BlockStore {
    blocks: HashMap<Digest, Arc<Block>>,
    models: HashMap<Digest, Arc<ParamVector>>,
    genesis: Digest,
    tip: Digest,
}

impl BlockStore {
    pub fn new(genesis: Block) -> Self {
        let hash = genesis.hash();
        let model = Arc::new(genesis.body.aggregate.clone());
        Self {
            blocks: HashMap::from([(hash, Arc::new(genesis))]),
            models: HashMap::from([(hash, model)]),
            genesis: hash,
            tip: hash,
        }
    }

    pub fn contains(&self, hash: &Digest) -> bool {
        self.blocks.contains_key(hash)
    }

    pub fn get(&self, hash: &Digest) -> Option<&Arc<Block>> {
        self.blocks.get(hash)
    }

    pub fn tip(&self) -> &Arc<Block> {
        &self.blocks[&self.tip]
    }

    pub fn tip_hash(&self) -> Digest {
        self.tip
    }

    pub fn genesis_hash(&self) -> Digest {
        self.genesis
    }

    /// Stores a block whose parent is known and returns whether the tip moved.
    pub fn insert(&mut self, block: Arc<Block>) -> Result<bool, LedgerError> {
        let hash = block.hash();
        if self.blocks.contains_key(&hash) {
            return Ok(false);
        }
        let parent = self
            .blocks
            .get(&block.header.prev_hash)
            .ok_or_else(|| LedgerError::UnknownParent(super::short_hex(&block.header.prev_hash)))?;
        if block.header.height != parent.header.height + 1 {
            return Err(LedgerError::BadLink { height: block.header.height });
        }
        let model = self.models[&block.header.prev_hash].add(&block.body.aggregate)?;
        self.models.insert(hash, Arc::new(model));
        let height = block.header.height;
        self.blocks.insert(hash, block);
        let tip_height = self.tip().header.height;
        let better = height > tip_height || (height == tip_height && hash < self.tip);
        if better {
            self.tip = hash;
        }
        Ok(better)
    }

    /// Global model after applying the block `hash`.
    pub fn model_at(&self, hash: &Digest) -> Option<&Arc<ParamVector>> {
        self.models.get(hash)
    }

    pub fn tip_model(&self) -> &Arc<ParamVector> {
        &self.models[&self.tip]
    }

    /// Chain from genesis to `hash`.
    pub fn chain_to(&self, hash: &Digest) -> Option<Chain> {
        let mut rev = Vec::new();
        let mut cur = *hash;
        loop {
            let b = self.blocks.get(&cur)?;
            rev.push(Arc::clone(b));
            if cur == self.genesis {
                break;
            }
            cur = b.header.prev_hash;
        }
        rev.reverse();
        Some(Chain { blocks: rev })
    }

    pub fn best_chain(&self) -> Chain {
        self.chain_to(&self.tip).expect("tip is reachable from genesis")
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Empty-body placeholder for tests that only need linkage.
#[cfg(test)]
pub(crate) fn empty_body(dim: usize) -> super::block::BlockBody {
    super::block::BlockBody { updates: Vec::new(), aggregate: ParamVector::zeros(dim), contributions: Vec::new() }
}
