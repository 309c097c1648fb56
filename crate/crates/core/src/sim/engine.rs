use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::Exp1;

use super::config::{DataSource, MiningMode, SimConfig, VerifyKind};
use super::idx::load_idx;
use super::report::{MetricsReport, RoundRecord, RunSummary};
use super::SimError;
use crate::ledger::{
    mine, short_hex, verify_block, Bid, Block, BlockBody, BlockStore, Chain, ContractState, Digest, Pool, TaskSpec,
    VerifyContext, VerifyMode,
};
use crate::mlcore::{
    evaluate, make_partitioned_data, ClientId, Dataset, LocalUpdate, MlError, ModelSpec, Partition, SyntheticSpec,
    WeightRule,
};
use crate::network::{Network, Tick, TraceRecord};
use crate::node::{
    confirm_copy, exclusion_quorum, mining_rate_multiplier, pool_scan_for_lazy, round_step_honest, round_step_lazy,
    Behavior, NodeError, PrivacyStep, RoundBudget, ScanConfig, TrainStep, UploadPipeline, WatermarkStep,
};
use crate::privacy::NoiseSchedule;
use crate::rng::{derive_rng, derive_seed};
use crate::watermark::default_pn;

#[derive(Debug, Clone)]
enum Msg {
    TrainDone,
    LazyAct,
    /// Fires when the node's sealed block is found.
    Seal(Arc<Block>),
    Update(Arc<LocalUpdate>),
    Block(Arc<Block>),
}

fn label(m: &Msg) -> String {
    match m {
        Msg::TrainDone => "train_done".into(),
        Msg::LazyAct => "lazy_act".into(),
        Msg::Seal(b) => format!("seal:{}", short_hex(&b.hash())),
        Msg::Update(u) => format!("update:c{}:r{}", u.client_id, u.round),
        Msg::Block(b) => format!("block:{}:h{}", short_hex(&b.hash()), b.header.height),
    }
}

struct Node {
    id: ClientId,
    behavior: Behavior,
    store: BlockStore,
    pool: Pool,
    local_excluded: BTreeSet<ClientId>,
    schedule: NoiseSchedule,
    chips: Option<Vec<i8>>,
    seal_timer: Option<u64>,
    has_round_block: bool,
}

impl Node {
    fn honest(&self) -> bool {
        !self.behavior.is_lazy()
    }
}

/// Everything a finished run produces.
pub struct RunOutcome {
    pub report: MetricsReport,
    /// Canonical chain as held by the lowest-id honest client.
    pub chain: Chain,
    /// Submitted updates per round (index 0 is round 1), in submission order.
    pub updates: Vec<Vec<Arc<LocalUpdate>>>,
    pub contract: ContractState,
    pub partition: Partition,
    pub spec: ModelSpec,
    pub trace: Vec<TraceRecord>,
}

pub struct Simulation {
    cfg: SimConfig,
    budget: RoundBudget,
    spec: ModelSpec,
    partition: Partition,
    train_union: Dataset,
    nodes: Vec<Node>,
    net: Network<Msg>,
    contract: ContractState,
    banned: BTreeSet<ClientId>,
    lazy: BTreeSet<ClientId>,
    scan: Option<ScanConfig>,
    use_len: usize,
    reference: usize,
}

/// Per-round scratch counters.
#[derive(Default)]
struct RoundTally {
    accusations: usize,
    new_bans: usize,
    lazy_submitters: BTreeSet<ClientId>,
    honest_submitters: BTreeSet<ClientId>,
    diverged: usize,
    sealed: Vec<Arc<Block>>,
    rejected: usize,
}

impl Simulation {
    pub fn new(cfg: SimConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let n = cfg.n_clients;
        let partition = build_partition(&cfg)?;
        let max_size = partition.clients.iter().map(Dataset::len).max().unwrap_or(0) as u64;
        let budget = cfg.resolve_budget(max_size)?;
        let spec = cfg.model_spec(partition.test.dims(), partition.test.num_classes())?;
        let train_union = partition.train_union();
        let dim = spec.param_count();

        let lazy: BTreeSet<ClientId> = if cfg.lazy_count() > 0 {
            let mut rng = derive_rng("lazy-set", &[cfg.seed]);
            sample(&mut rng, n, cfg.lazy_count()).into_iter().map(|i| i as ClientId).collect()
        } else {
            BTreeSet::new()
        };

        let use_len = if cfg.watermark.enabled {
            cfg.watermark.resolved_use_len(dim).map_err(|e| SimError::Config(e.to_string()))?
        } else {
            0
        };
        let pn = if cfg.watermark.enabled {
            Some(default_pn(cfg.watermark.degree).map_err(|e| SimError::Config(e.to_string()))?)
        } else {
            None
        };
        let scan = cfg.behavior.detection.then_some(ScanConfig {
            use_len,
            snr_db: cfg.watermark.snr_db,
            gamma: cfg.watermark.gamma,
        });

        let initial_scale = if cfg.privacy.enabled {
            cfg.privacy.initial_scale().map_err(|e| SimError::Config(e.to_string()))?
        } else {
            0.0
        };
        let genesis = Block::genesis(spec.init_params(derive_seed("model-init", &[cfg.seed])), cfg.seed);
        let mut nodes = Vec::with_capacity(n);
        for i in 0..n {
            let id = i as ClientId;
            let behavior = if lazy.contains(&id) {
                Behavior::Lazy { disguise_std: cfg.behavior.disguise_std, exaggeration: cfg.behavior.exaggeration }
            } else {
                Behavior::Honest
            };
            let chips = match &pn {
                Some(pn) => Some(pn.client_chips(id, use_len).map_err(|e| SimError::Config(e.to_string()))?),
                None => None,
            };
            nodes.push(Node {
                id,
                behavior,
                store: BlockStore::new(genesis.clone()),
                pool: Pool::new(),
                local_excluded: BTreeSet::new(),
                schedule: NoiseSchedule::new(initial_scale),
                chips,
                seal_timer: None,
                has_round_block: false,
            });
        }
        let reference = nodes.iter().position(Node::honest).expect("validated: one honest client");

        let task = TaskSpec {
            required_data_size: train_union.len() as u64,
            accuracy_target: 0.0,
            latency: budget.t_sum,
            reward_pool: cfg.chain.reward_pool,
            rounds: budget.k,
            n_required: n,
            miner_subsidy: cfg.chain.miner_subsidy,
        };
        let bids: Vec<Bid> = partition
            .clients
            .iter()
            .enumerate()
            .map(|(i, d)| Bid {
                client_id: i as ClientId,
                capability: cfg.budget.capability,
                data_size: d.len() as u64,
                asking_cost: 1.0,
                deposit: cfg.chain.deposit,
            })
            .collect();
        let contract = ContractState::publish_task(task)
            .and_then(|c| c.select_winners(&bids))
            .map_err(|e| SimError::Config(format!("contract setup: {e}")))?;

        let mut net = Network::new(cfg.net.net.clone(), derive_seed("network", &[cfg.seed]))
            .map_err(|e| SimError::Config(e.to_string()))?;
        if cfg.output.trace {
            net.enable_trace(label);
        }

        Ok(Self {
            cfg,
            budget,
            spec,
            partition,
            train_union,
            nodes,
            net,
            contract,
            banned: BTreeSet::new(),
            lazy,
            scan,
            use_len,
            reference,
        })
    }

    pub fn budget(&self) -> &RoundBudget {
        &self.budget
    }

    pub fn lazy_clients(&self) -> &BTreeSet<ClientId> {
        &self.lazy
    }

    pub fn run(mut self) -> Result<RunOutcome, SimError> {
        let started = Instant::now();
        self.budget.check()?;
        let tpu = self.cfg.net.ticks_per_unit as f64;
        let round_ticks = (self.budget.round_time() * tpu).ceil() as Tick;
        let train_ticks = ((self.budget.tau as f64 * self.budget.t_t * tpu).round() as Tick).max(1);

        let mut records = Vec::with_capacity(self.budget.k as usize);
        let mut updates = Vec::with_capacity(self.budget.k as usize);
        let mut start: Tick = 0;
        for round in 1..=self.budget.k {
            let (record, submitted) = self.run_round(round, start, train_ticks)?;
            let end = record.end_tick;
            records.push(record);
            updates.push(submitted);
            start = end.max(start + round_ticks);
            self.net.advance_to(start);
        }

        let chain = self.nodes[self.reference].store.best_chain();
        let contract = self.settle(&chain)?;
        let summary = self.summarize(&records, &chain, &contract, started.elapsed().as_millis() as u64)?;
        Ok(RunOutcome {
            report: MetricsReport { rounds: records, summary },
            chain,
            updates,
            contract,
            partition: self.partition,
            spec: self.spec,
            trace: self.net.trace().to_vec(),
        })
    }

    fn run_round(
        &mut self,
        round: u64,
        start: Tick,
        train_ticks: Tick,
    ) -> Result<(RoundRecord, Vec<Arc<LocalUpdate>>), SimError> {
        let deadline = start + train_ticks + self.cfg.net.round_deadline_ticks;
        let max_delay = self.cfg.net.net.delay.max_delay();
        let base_height = self.nodes[self.reference].store.tip().header.height;
        for node in &mut self.nodes {
            node.pool.clear();
            node.local_excluded.clear();
            node.seal_timer = None;
            node.has_round_block = false;
        }
        for i in 0..self.nodes.len() {
            let id = self.nodes[i].id;
            if self.nodes[i].honest() {
                self.net.schedule_local(start + train_ticks, id, Msg::TrainDone);
            } else {
                self.net.schedule_local(deadline - max_delay, id, Msg::LazyAct);
            }
        }

        let mut tally = RoundTally::default();
        let mut submitted = Vec::new();
        while let Some(ev) = self.net.pop_until(deadline) {
            self.handle(ev.dst as usize, ev.deliver_at, ev.payload, round, deadline, &mut tally, &mut submitted)?;
        }
        if tally.honest_submitters.is_empty() && tally.diverged > 0 {
            return Err(SimError::Diverged { round });
        }
        self.net.advance_to(deadline);
        self.detect_and_govern(&mut tally);
        self.start_mining(round, deadline)?;
        while let Some(ev) = self.net.pop() {
            self.handle(ev.dst as usize, ev.deliver_at, ev.payload, round, deadline, &mut tally, &mut submitted)?;
        }
        let end = self.net.now();
        let record = self.record_round(round, start, end, base_height, &tally)?;
        self.observe_accuracy()?;
        Ok((record, submitted))
    }

    #[allow(clippy::too_many_arguments)]
    fn handle(
        &mut self,
        at: usize,
        tick: Tick,
        msg: Msg,
        round: u64,
        deadline: Tick,
        tally: &mut RoundTally,
        submitted: &mut Vec<Arc<LocalUpdate>>,
    ) -> Result<(), SimError> {
        match msg {
            Msg::TrainDone => {
                let node = &self.nodes[at];
                let global = Arc::clone(node.store.tip_model());
                let train = TrainStep {
                    spec: &self.spec,
                    lr: self.cfg.train.lr,
                    batch_size: self.cfg.train.batch_size,
                    tau: self.budget.tau,
                    t_t: self.budget.t_t,
                    seed: self.cfg.seed,
                };
                let pipeline = UploadPipeline {
                    privacy: self.cfg.privacy.enabled.then_some(PrivacyStep {
                        clip_norm: self.cfg.privacy.clip_norm,
                        scale: node.schedule.scale,
                        mechanism: self.cfg.privacy.mechanism,
                    }),
                    watermark: node.chips.as_deref().map(|chips| WatermarkStep {
                        chips,
                        snr_db: self.cfg.watermark.snr_db,
                        use_len: self.use_len,
                    }),
                };
                let data = &self.partition.clients[at];
                match round_step_honest(node.id, round, data, &global, &train, &pipeline) {
                    Ok(u) => {
                        tally.honest_submitters.insert(u.client_id);
                        self.publish(at, Arc::new(u), submitted);
                    }
                    Err(NodeError::Ml(MlError::Diverged { .. })) => tally.diverged += 1,
                    Err(e) => return Err(SimError::Internal(e.to_string())),
                }
            }
            Msg::LazyAct => {
                let node = &self.nodes[at];
                let Behavior::Lazy { disguise_std, exaggeration } = node.behavior else {
                    return Err(SimError::Internal("lazy timer at an honest node".into()));
                };
                let mut rng = derive_rng("lazy-copy", &[self.cfg.seed, round, node.id as u64]);
                if let Some(u) = round_step_lazy(node.id, round, &node.pool, disguise_std, exaggeration, &mut rng) {
                    tally.lazy_submitters.insert(u.client_id);
                    self.publish(at, Arc::new(u), submitted);
                }
            }
            Msg::Update(u) => {
                let node = &mut self.nodes[at];
                let discarded = node.honest() && self.banned.contains(&u.client_id);
                if u.round == round && tick <= deadline && !discarded {
                    node.pool.insert(u.client_id, u);
                }
            }
            Msg::Seal(block) => {
                let node = &mut self.nodes[at];
                node.seal_timer = None;
                if node.has_round_block {
                    return Ok(());
                }
                node.store.insert(Arc::clone(&block)).map_err(|e| SimError::Internal(e.to_string()))?;
                node.has_round_block = true;
                tally.sealed.push(Arc::clone(&block));
                let id = node.id;
                let everyone: Vec<ClientId> = self.nodes.iter().map(|n| n.id).collect();
                self.net.broadcast(id, everyone, &Msg::Block(block));
            }
            Msg::Block(block) => self.receive_block(at, block, round, tally),
        }
        Ok(())
    }

    fn publish(&mut self, at: usize, update: Arc<LocalUpdate>, submitted: &mut Vec<Arc<LocalUpdate>>) {
        let id = self.nodes[at].id;
        self.nodes[at].pool.insert(id, Arc::clone(&update));
        submitted.push(Arc::clone(&update));
        let everyone: Vec<ClientId> = self.nodes.iter().map(|n| n.id).collect();
        self.net.broadcast(id, everyone, &Msg::Update(update));
    }

    fn receive_block(&mut self, at: usize, block: Arc<Block>, round: u64, tally: &mut RoundTally) {
        let node = &self.nodes[at];
        let hash = block.hash();
        if node.store.contains(&hash) {
            return;
        }
        let Some(parent) = node.store.get(&block.header.prev_hash) else {
            tally.rejected += usize::from(at == self.reference);
            return;
        };
        let empty = BTreeSet::new();
        let excluded = if node.honest() { &self.banned } else { &empty };
        let parent_model = node.store.model_at(&block.header.prev_hash).expect("stored with its block");
        let mode = match self.cfg.chain.verify {
            VerifyKind::Recompute => VerifyMode::Recompute,
            VerifyKind::TestSet => VerifyMode::TestSet {
                global: parent_model,
                test: &self.partition.test,
                spec: &self.spec,
                tolerance: self.cfg.chain.accuracy_tolerance,
            },
        };
        let ctx = VerifyContext {
            pool: &node.pool,
            contract: &self.contract,
            excluded,
            min_difficulty: self.cfg.chain.difficulty_bits,
            rule: WeightRule::BySampleSize,
            mode,
        };
        if block.header.round != round {
            tally.rejected += usize::from(at == self.reference);
            return;
        }
        match verify_block(&block, &parent.header, &ctx) {
            Ok(()) => {
                let node = &mut self.nodes[at];
                if node.store.insert(block).is_err() {
                    tally.rejected += usize::from(at == self.reference);
                    return;
                }
                node.has_round_block = true;
                if let Some(seq) = node.seal_timer.take() {
                    self.net.cancel(seq);
                }
            }
            Err(_) if at == self.reference => {
                tally.rejected += 1;
                self.contract.record_verification(block.header.miner_id, false);
            }
            Err(_) => {}
        }
    }

    fn detect_and_govern(&mut self, tally: &mut RoundTally) {
        let Some(scan) = self.scan else { return };
        let mut accusations: Vec<(ClientId, ClientId)> = Vec::new();
        for node in self.nodes.iter_mut().filter(|n| n.honest()) {
            let Some(chips) = node.chips.as_deref() else { continue };
            if !node.pool.contains_key(&node.id) {
                continue;
            }
            let accused = pool_scan_for_lazy(node.id, chips, &node.pool, &scan);
            for &x in &accused {
                accusations.push((node.id, x));
            }
            node.local_excluded.extend(accused);
        }
        tally.accusations = accusations.len();

        let quorum = exclusion_quorum(self.nodes.len());
        let accused: BTreeSet<ClientId> = accusations.iter().map(|&(_, x)| x).collect();
        for x in accused {
            if self.banned.contains(&x) {
                continue;
            }
            let accuser = accusations.iter().filter(|&&(_, y)| y == x).map(|&(a, _)| a).min().expect("accused by someone");
            let chips = self.nodes[accuser as usize].chips.as_deref().expect("accuser embeds");
            let confirmations = self
                .nodes
                .iter()
                .filter(|n| n.honest())
                .filter(|n| n.pool.get(&x).is_some_and(|u| confirm_copy(chips, &u.params, &scan)))
                .count();
            if confirmations >= quorum {
                self.banned.insert(x);
                tally.new_bans += 1;
            }
        }
        for node in self.nodes.iter_mut().filter(|n| n.honest()) {
            node.local_excluded.extend(self.banned.iter().copied());
        }
    }

    fn start_mining(&mut self, round: u64, deadline: Tick) -> Result<(), SimError> {
        let n = self.nodes.len() as f64;
        let tpu = self.cfg.net.ticks_per_unit as f64;
        let bits = self.cfg.chain.difficulty_bits;
        for i in 0..self.nodes.len() {
            let node = &self.nodes[i];
            let included: Vec<&LocalUpdate> = node
                .pool
                .values()
                .filter(|u| !node.honest() || !node.local_excluded.contains(&u.client_id))
                .map(|u| u.as_ref())
                .collect();
            if included.is_empty() {
                continue;
            }
            let body = BlockBody::from_updates(&included, WeightRule::BySampleSize)
                .map_err(|e| SimError::Internal(e.to_string()))?;
            let template = Block::template(&node.store.tip().header, round, node.id, deadline, &body);
            let nonce_start = derive_seed("nonce", &[self.cfg.seed, round, node.id as u64]);
            let sealed = mine(&template, bits, nonce_start, u64::MAX).map_err(|e| SimError::Internal(e.to_string()))?;
            let speed = mining_rate_multiplier(node.behavior, &self.budget);
            // expected solo block time is N·t_B at unit speed
            let mean_units = n * self.budget.t_b / speed;
            let units = match self.cfg.chain.mode {
                MiningMode::Sampled => {
                    let mut rng = derive_rng("mining", &[self.cfg.seed, round, node.id as u64]);
                    mean_units * rng.sample::<f64, _>(Exp1)
                }
                MiningMode::Grind => mean_units * sealed.tries as f64 / 2f64.powi(bits as i32),
            };
            let ticks = ((units * tpu).ceil() as Tick).max(1);
            let block = Arc::new(Block { header: sealed.header, body });
            let id = node.id;
            let seq = self.net.schedule_local(deadline + ticks, id, Msg::Seal(block));
            self.nodes[i].seal_timer = Some(seq);
        }
        Ok(())
    }

    fn record_round(
        &mut self,
        round: u64,
        start: Tick,
        end: Tick,
        base_height: u64,
        tally: &RoundTally,
    ) -> Result<RoundRecord, SimError> {
        let reference = &self.nodes[self.reference];
        let tip = Arc::clone(reference.store.tip());
        let model = Arc::clone(reference.store.tip_model());
        let train = evaluate(&model, &self.train_union, &self.spec).map_err(|e| SimError::Internal(e.to_string()))?;
        let test = evaluate(&model, &self.partition.test, &self.spec).map_err(|e| SimError::Internal(e.to_string()))?;
        let honest: Vec<&Node> = self.nodes.iter().filter(|n| n.honest()).collect();
        let consensus = honest.iter().all(|n| {
            n.store.tip_hash() == reference.store.tip_hash() && n.store.tip_model().bit_eq(reference.store.tip_model())
        });
        let new_block = tip.header.round == round && tip.header.height > base_height;
        let included: BTreeSet<ClientId> =
            if new_block { tip.body.updates.iter().map(|r| r.client_id).collect() } else { BTreeSet::new() };
        if new_block {
            self.contract.record_verification(tip.header.miner_id, true);
        }
        let accepted_competitors = tally
            .sealed
            .iter()
            .filter(|b| b.header.height == base_height + 1 && reference.store.contains(&b.hash()))
            .count();
        let sigma = if self.cfg.privacy.enabled {
            honest.iter().map(|n| n.schedule.scale).sum::<f64>() / honest.len() as f64
        } else {
            0.0
        };
        Ok(RoundRecord {
            round,
            start_tick: start,
            end_tick: end,
            train_loss: train.loss,
            test_loss: test.loss,
            test_accuracy: test.accuracy,
            chain_height: tip.header.height,
            forks: accepted_competitors.saturating_sub(1),
            winner: new_block.then_some(tip.header.miner_id),
            block_hash: hex::encode(tip.hash()),
            aggregate_digest: hex::encode(tip.header.aggregate_digest),
            included: included.len(),
            accusations: tally.accusations,
            exclusions: tally.new_bans,
            banned_total: self.banned.len(),
            lazy_submissions: tally.lazy_submitters.len(),
            lazy_excluded: tally.lazy_submitters.iter().filter(|id| !included.contains(id)).count(),
            honest_submissions: tally.honest_submitters.len(),
            honest_excluded: tally.honest_submitters.iter().filter(|id| self.banned.contains(id)).count(),
            rejected_blocks: tally.rejected,
            sigma,
            consensus,
        })
    }

    /// Feeds each honest client's noise schedule with its local accuracy.
    fn observe_accuracy(&mut self) -> Result<(), SimError> {
        if !self.cfg.privacy.enabled {
            return Ok(());
        }
        let decay = self.cfg.privacy.decay;
        for (node, data) in self.nodes.iter_mut().zip(&self.partition.clients) {
            if !node.honest() {
                continue;
            }
            let acc = evaluate(node.store.tip_model(), data, &self.spec).map_err(|e| SimError::Internal(e.to_string()))?;
            node.schedule.observe(acc.accuracy, decay);
        }
        Ok(())
    }

    fn settle(&self, chain: &Chain) -> Result<ContractState, SimError> {
        let mut contract = self.contract.clone();
        for block in &chain.blocks()[1..] {
            contract = contract.settle_rewards(block).map_err(|e| SimError::Internal(format!("settlement: {e}")))?;
        }
        let slashed = if self.cfg.chain.slash_excluded { self.banned.clone() } else { BTreeSet::new() };
        contract.finish(&slashed).map_err(|e| SimError::Internal(format!("settlement: {e}")))
    }

    fn summarize(
        &self,
        records: &[RoundRecord],
        chain: &Chain,
        contract: &ContractState,
        wall_clock_ms: u64,
    ) -> Result<RunSummary, SimError> {
        let last = records.last().ok_or_else(|| SimError::Internal("no rounds executed".into()))?;
        let reference = &self.nodes[self.reference];
        let digests: BTreeSet<Digest> =
            self.nodes.iter().filter(|n| n.honest()).map(|n| n.store.tip_model().digest()).collect();
        let sum = |f: fn(&RoundRecord) -> usize| records.iter().map(f).sum::<usize>();
        let lazy_submissions = sum(|r| r.lazy_submissions);
        let honest_submissions = sum(|r| r.honest_submissions);
        let lazy_excluded = sum(|r| r.lazy_excluded);
        let honest_excluded = sum(|r| r.honest_excluded);
        let mut blocks_by_miner = std::collections::BTreeMap::new();
        for b in &chain.blocks()[1..] {
            *blocks_by_miner.entry(b.header.miner_id).or_insert(0u64) += 1;
        }
        Ok(RunSummary {
            seed: self.cfg.seed,
            n_clients: self.nodes.len(),
            lazy_clients: self.lazy.iter().copied().collect(),
            budget: self.budget,
            rounds_executed: records.len() as u64,
            final_accuracy: last.test_accuracy,
            final_train_loss: last.train_loss,
            final_test_loss: last.test_loss,
            chain_height: chain.height(),
            final_model_digest: hex::encode(reference.store.tip_model().digest()),
            digests_agree: digests.len() == 1,
            consensus_all_rounds: records.iter().all(|r| r.consensus),
            lazy_submissions,
            lazy_excluded,
            honest_submissions,
            honest_excluded,
            detection_tpr: (lazy_submissions > 0).then(|| lazy_excluded as f64 / lazy_submissions as f64),
            detection_fpr: (honest_submissions > 0).then(|| honest_excluded as f64 / honest_submissions as f64),
            banned: self.banned.iter().copied().collect(),
            blocks_by_miner,
            trainer_rewards: contract.trainer_rewards().clone(),
            miner_rewards: contract.miner_rewards().clone(),
            refunds: contract.refunds().clone(),
            publisher_refund: contract.publisher_refund(),
            slashed: contract.slashed_total(),
            totals: contract.totals(),
            reputation: contract.reputation().clone(),
            elapsed_ticks: last.end_tick,
            wall_clock_ms,
        })
    }
}

fn build_partition(cfg: &SimConfig) -> Result<Partition, SimError> {
    let d = &cfg.data;
    match d.source {
        DataSource::Synthetic => {
            let spec = SyntheticSpec {
                seed: derive_seed("data", &[cfg.seed]),
                n_clients: cfg.n_clients,
                samples_per_client: d.samples_per_client,
                dims: d.dims,
                num_classes: d.classes,
                skew: d.skew,
                test_samples: d.test_samples,
                class_sep: d.class_sep,
            };
            make_partitioned_data(&spec).map_err(|e| SimError::Config(e.to_string()))
        }
        DataSource::Idx => {
            let path = |p: &Option<std::path::PathBuf>| p.clone().expect("validated");
            let train = load_idx(&path(&d.train_images), &path(&d.train_labels))?;
            let test = load_idx(&path(&d.test_images), &path(&d.test_labels))?;
            if train.dims() != test.dims() {
                return Err(SimError::Data("train and test images differ in size".into()));
            }
            let classes = train.num_classes().max(test.num_classes());
            let test = relabel(&test, classes, 0)?;
            let per_client = d.samples_per_client.min(train.len() / cfg.n_clients);
            if per_client == 0 {
                return Err(SimError::Data(format!("{} training images for {} clients", train.len(), cfg.n_clients)));
            }
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut derive_rng("idx-split", &[cfg.seed]));
            let clients = (0..cfg.n_clients)
                .map(|i| subset(&train, &order[i * per_client..(i + 1) * per_client], classes, i as ClientId))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Partition { clients, test })
        }
    }
}

fn subset(data: &Dataset, rows: &[usize], classes: usize, client: ClientId) -> Result<Dataset, SimError> {
    let mut features = Vec::with_capacity(rows.len() * data.dims());
    let mut labels = Vec::with_capacity(rows.len());
    for &r in rows {
        features.extend_from_slice(data.row(r));
        labels.push(data.labels()[r]);
    }
    Dataset::new(features, data.dims(), labels, classes, client).map_err(|e| SimError::Data(e.to_string()))
}

fn relabel(data: &Dataset, classes: usize, client: ClientId) -> Result<Dataset, SimError> {
    Dataset::new(data.features().to_vec(), data.dims(), data.labels().to_vec(), classes, client)
        .map_err(|e| SimError::Data(e.to_string()))
}
