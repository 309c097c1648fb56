use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::block::{Block, BlockHeader, UpdateRecord};
use super::contract::ContractState;
use super::Pool;
use crate::mlcore::{aggregate, evaluate, ClientId, Dataset, LocalUpdate, ModelSpec, ParamVector, WeightRule};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum RejectReason {
    BadPow,
    BadLink,
    BadBody,
    NotWinner { client: ClientId },
    UnknownUpdate { client: ClientId },
    ExcludedUpdate { client: ClientId },
    BadAggregate,
    LowAccuracy { block: f64, reference: f64 },
}

/// How the aggregate is checked once the listed updates are accepted.
#[derive(Debug, Clone, Copy)]
pub enum VerifyMode<'a> {
    /// Re-aggregate the listed updates from the local pool and require a
    /// bit-identical result.
    Recompute,
    /// Require the block's model to score within `tolerance` of the model
    /// aggregated from the verifier's own non-excluded pool on a public test
    /// set. Pool membership of the listed updates is not required.
    TestSet { global: &'a ParamVector, test: &'a Dataset, spec: &'a ModelSpec, tolerance: f64 },
}

#[derive(Debug, Clone, Copy)]
pub struct VerifyContext<'a> {
    pub pool: &'a Pool,
    pub contract: &'a ContractState,
    pub excluded: &'a BTreeSet<ClientId>,
    pub min_difficulty: u32,
    pub rule: WeightRule,
    pub mode: VerifyMode<'a>,
}

/// Checks, in order: proof of work, linkage to `parent`, body consistency,
/// that every listed update comes from a selected trainer, is known and is
/// not excluded, and finally the aggregate.
pub fn verify_block(block: &Block, parent: &BlockHeader, ctx: &VerifyContext<'_>) -> Result<(), RejectReason> {
    let h = &block.header;
    if h.difficulty_bits < ctx.min_difficulty || !h.meets_difficulty() {
        return Err(RejectReason::BadPow);
    }
    if h.prev_hash != parent.hash() || h.height != parent.height + 1 {
        return Err(RejectReason::BadLink);
    }
    check_body(block)?;

    let recompute = matches!(ctx.mode, VerifyMode::Recompute);
    let mut listed: Vec<&LocalUpdate> = Vec::with_capacity(block.body.updates.len());
    for r in &block.body.updates {
        if !ctx.contract.is_selected(r.client_id) {
            return Err(RejectReason::NotWinner { client: r.client_id });
        }
        if recompute {
            match ctx.pool.get(&r.client_id) {
                Some(u) if UpdateRecord::of(u) == *r => listed.push(u),
                _ => return Err(RejectReason::UnknownUpdate { client: r.client_id }),
            }
        }
        if ctx.excluded.contains(&r.client_id) {
            return Err(RejectReason::ExcludedUpdate { client: r.client_id });
        }
    }
    if h.aggregate_digest != block.body.aggregate.digest() {
        return Err(RejectReason::BadAggregate);
    }

    match ctx.mode {
        VerifyMode::Recompute => {
            let expected = aggregate(&listed, ctx.rule).map_err(|_| RejectReason::BadAggregate)?;
            if !expected.bit_eq(&block.body.aggregate) {
                return Err(RejectReason::BadAggregate);
            }
        }
        VerifyMode::TestSet { global, test, spec, tolerance } => {
            let accuracy_with = |delta: &ParamVector| -> Option<f64> {
                let model = global.add(delta).ok()?;
                evaluate(&model, test, spec).ok().map(|e| e.accuracy)
            };
            let got = accuracy_with(&block.body.aggregate).ok_or(RejectReason::BadAggregate)?;
            let own: Vec<&LocalUpdate> = ctx
                .pool
                .values()
                .filter(|u| !ctx.excluded.contains(&u.client_id) && u.round == h.round)
                .map(|u| u.as_ref())
                .collect();
            if own.is_empty() {
                return Ok(());
            }
            let reference = aggregate(&own, ctx.rule)
                .ok()
                .and_then(|d| accuracy_with(&d))
                .ok_or(RejectReason::BadAggregate)?;
            if got < reference - tolerance {
                return Err(RejectReason::LowAccuracy { block: got, reference });
            }
        }
    }
    Ok(())
}

fn check_body(block: &Block) -> Result<(), RejectReason> {
    let body = &block.body;
    if block.header.body_digest != body.digest() || body.updates.is_empty() {
        return Err(RejectReason::BadBody);
    }
    let sorted = body.updates.windows(2).all(|w| w[0].client_id < w[1].client_id);
    let same_round = body.updates.iter().all(|r| r.round == block.header.round);
    if !sorted || !same_round {
        return Err(RejectReason::BadBody);
    }
    if body.contributions != weights_from_records(&body.updates).ok_or(RejectReason::BadBody)? {
        return Err(RejectReason::BadBody);
    }
    Ok(())
}

/// Same arithmetic as `contribution_weights`, so the comparison is bitwise.
fn weights_from_records(records: &[UpdateRecord]) -> Option<Vec<(ClientId, f64)>> {
    let total: u64 = records.iter().map(|r| r.samples).sum();
    if records.iter().any(|r| r.samples == 0) {
        return None;
    }
    Some(records.iter().map(|r| (r.client_id, r.samples as f64 / total as f64)).collect())
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::super::block::BlockBody;
    use super::super::contract::{Bid, TaskSpec};
    use super::super::pow::mine;
    use super::*;

    struct Fixture {
        genesis: Block,
        pool: Pool,
        contract: ContractState,
    }

    fn upd(id: ClientId, samples: u64, values: Vec<f64>) -> LocalUpdate {
        LocalUpdate { client_id: id, round: 1, params: ParamVector::new(values).unwrap(), samples, compute_time: 2.0 }
    }

    fn fixture() -> Fixture {
        let genesis = Block::genesis(ParamVector::zeros(2), 0);
        let pool: Pool = [upd(0, 10, vec![1.0, 0.0]), upd(1, 30, vec![0.0, 1.0]), upd(2, 20, vec![0.5, 0.5])]
            .into_iter()
            .map(|u| (u.client_id, Arc::new(u)))
            .collect();
        let task = TaskSpec {
            required_data_size: 1,
            accuracy_target: 0.5,
            latency: 10.0,
            reward_pool: 100,
            rounds: 2,
            n_required: 3,
            miner_subsidy: 1,
        };
        let bids: Vec<Bid> = (0..4)
            .map(|i| Bid { client_id: i, capability: 4.0 - i as f64, data_size: 10, asking_cost: 1.0, deposit: 5 })
            .collect();
        let contract = ContractState::publish_task(task).unwrap().select_winners(&bids).unwrap();
        Fixture { genesis, pool, contract }
    }

    fn seal(parent: &BlockHeader, body: BlockBody) -> Block {
        let t = Block::template(parent, 1, 0, 5, &body);
        Block { header: mine(&t, 4, 0, 1 << 16).unwrap().header, body }
    }

    fn build(f: &Fixture, ids: &[ClientId]) -> Block {
        let ups: Vec<&LocalUpdate> = ids.iter().map(|i| f.pool[i].as_ref()).collect();
        seal(&f.genesis.header, BlockBody::from_updates(&ups, WeightRule::BySampleSize).unwrap())
    }

    fn ctx<'a>(f: &'a Fixture, excluded: &'a BTreeSet<ClientId>) -> VerifyContext<'a> {
        VerifyContext {
            pool: &f.pool,
            contract: &f.contract,
            excluded,
            min_difficulty: 4,
            rule: WeightRule::BySampleSize,
            mode: VerifyMode::Recompute,
        }
    }

    #[test]
    fn honest_block_passes() {
        let f = fixture();
        let none = BTreeSet::new();
        let b = build(&f, &[0, 1, 2]);
        assert_eq!(verify_block(&b, &f.genesis.header, &ctx(&f, &none)), Ok(()));
        // weights 1/6, 1/2, 1/3
        let agg = b.body.aggregate.as_slice();
        assert!((agg[0] - (10.0 + 10.0) / 60.0).abs() < 1e-15);
        assert!((agg[1] - (30.0 + 10.0) / 60.0).abs() < 1e-15);
    }

    #[test]
    fn each_rule_has_its_reason() {
        let f = fixture();
        let none = BTreeSet::new();
        let c = ctx(&f, &none);
        let good = build(&f, &[0, 1]);

        let mut weak = good.clone();
        weak.header.difficulty_bits = 2;
        assert_eq!(verify_block(&weak, &f.genesis.header, &c), Err(RejectReason::BadPow));

        let mut bad_nonce = good.clone();
        while bad_nonce.header.meets_difficulty() {
            bad_nonce.header.nonce += 1;
        }
        assert_eq!(verify_block(&bad_nonce, &f.genesis.header, &c), Err(RejectReason::BadPow));

        let other_parent = Block::genesis(ParamVector::zeros(2), 1);
        assert_eq!(verify_block(&good, &other_parent.header, &c), Err(RejectReason::BadLink));

        let mut body = good.body.clone();
        body.contributions[0].1 += 1e-12;
        let bad = seal(&f.genesis.header, body);
        assert_eq!(verify_block(&bad, &f.genesis.header, &c), Err(RejectReason::BadBody));

        let outsider = upd(3, 10, vec![0.0, 0.0]);
        let body = BlockBody::from_updates(&[&outsider], WeightRule::BySampleSize).unwrap();
        let bad = seal(&f.genesis.header, body);
        assert_eq!(verify_block(&bad, &f.genesis.header, &c), Err(RejectReason::NotWinner { client: 3 }));

        let forged = upd(1, 30, vec![0.0, 1.0 + 1e-9]);
        let body = BlockBody::from_updates(&[&forged], WeightRule::BySampleSize).unwrap();
        let bad = seal(&f.genesis.header, body);
        assert_eq!(verify_block(&bad, &f.genesis.header, &c), Err(RejectReason::UnknownUpdate { client: 1 }));

        let excluded = BTreeSet::from([1]);
        assert_eq!(
            verify_block(&good, &f.genesis.header, &ctx(&f, &excluded)),
            Err(RejectReason::ExcludedUpdate { client: 1 })
        );

        let mut body = good.body.clone();
        let mut v = body.aggregate.clone().into_inner();
        v[0] = f64::from_bits(v[0].to_bits() + 1);
        body.aggregate = ParamVector::new(v).unwrap();
        let bad = seal(&f.genesis.header, body);
        assert_eq!(verify_block(&bad, &f.genesis.header, &c), Err(RejectReason::BadAggregate));
    }

    #[test]
    fn test_set_mode_accepts_good_and_rejects_degraded() {
        let f = fixture();
        let none = BTreeSet::new();
        let spec = ModelSpec::linear(2, 2);
        // class 0 at (1, 0), class 1 at (0, 1) in feature space
        let test = Dataset::new(vec![1.0, 0.0, 0.0, 1.0], 2, vec![0, 1], 2, 0).unwrap();
        let global = ParamVector::zeros(spec.param_count());
        let mut pool = Pool::new();
        let good = LocalUpdate {
            client_id: 0,
            round: 1,
            params: ParamVector::new(vec![1.0, -1.0, -1.0, 1.0, 0.0, 0.0]).unwrap(),
            samples: 10,
            compute_time: 1.0,
        };
        pool.insert(0, Arc::new(good.clone()));
        let c = VerifyContext {
            pool: &pool,
            mode: VerifyMode::TestSet { global: &global, test: &test, spec: &spec, tolerance: 0.0 },
            ..ctx(&f, &none)
        };
        let ok = seal(&f.genesis.header, BlockBody::from_updates(&[&good], WeightRule::BySampleSize).unwrap());
        assert_eq!(verify_block(&ok, &f.genesis.header, &c), Ok(()));

        let flipped = LocalUpdate { params: good.params.scale(-1.0).unwrap(), ..good };
        let bad = seal(&f.genesis.header, BlockBody::from_updates(&[&flipped], WeightRule::BySampleSize).unwrap());
        assert!(matches!(verify_block(&bad, &f.genesis.header, &c), Err(RejectReason::LowAccuracy { .. })));
    }
}
