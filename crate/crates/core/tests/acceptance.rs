//! End-to-end acceptance suite. Each test prints one `PASS`/`FAIL` line to
//! stderr (bypassing output capture) and then asserts the same condition.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::time::Instant;

use sha2::{Digest as _, Sha256};

use blade_core::ledger::{mine, verify_chain, BlockHeader, Phase};
use blade_core::mlcore::{local_train, ClientId, SgdConfig};
use blade_core::network::DelayModel;
use blade_core::node::{compute_budget, RoundBudget};
use blade_core::privacy::NoiseDecay;
use blade_core::rng::derive_seed;
use blade_core::sim::{sweep, AutoOr, MiningMode, RunOutcome, SweepAxis, SweepPoint};
use blade_core::watermark::roc_curve;
use blade_core::{SimConfig, Simulation};

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "acceptance {n} {name}: {verdict} ({detail})");
}

fn run(cfg: &SimConfig) -> RunOutcome {
    Simulation::new(cfg.clone()).expect("config").run().expect("run")
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Standard error of a sweep point's mean.
fn sem(p: &SweepPoint) -> f64 {
    p.std_accuracy / (p.seeds as f64).sqrt()
}

fn law_holds(b: &RoundBudget) -> bool {
    b.k as f64 * (b.tau as f64 * b.t_t + b.t_b) <= b.t_sum
}

fn leading_zeros(bytes: &[u8]) -> u32 {
    let mut n = 0;
    for &b in bytes {
        n += b.leading_zeros();
        if b != 0 {
            break;
        }
    }
    n
}

/// Header re-verification with a hasher independent of the ledger module.
fn header_ok(h: &BlockHeader) -> bool {
    leading_zeros(&Sha256::digest(h.to_bytes())) >= h.difficulty_bits
}

// Task settings shared by the trend criteria.

fn resource_cfg(theta: f64) -> SimConfig {
    let mut c = SimConfig::default();
    c.data.dims = 50;
    c.data.samples_per_client = 100;
    c.data.class_sep = 0.4;
    c.train.lr = 0.2;
    c.privacy.enabled = true;
    c.privacy.epsilon = 20.0;
    c.privacy.clip_norm = 2.0;
    c.budget.theta = theta;
    c.budget.tau = AutoOr::Keyword(blade_core::sim::Auto::Auto);
    c.budget.rounds = AutoOr::Value(2);
    c
}

fn privacy_cfg(decay: NoiseDecay) -> SimConfig {
    let mut c = SimConfig::default();
    c.data.class_sep = 0.2;
    c.privacy.enabled = true;
    c.privacy.clip_norm = 0.5;
    c.privacy.decay = decay;
    c
}

fn lazy_cfg(lazy_fraction: f64, detection: bool) -> SimConfig {
    let mut c = SimConfig::default();
    c.data.skew = 0.8;
    c.data.class_sep = 0.2;
    c.watermark.enabled = true;
    c.watermark.snr_db = 6.0;
    c.behavior.lazy_fraction = lazy_fraction;
    c.behavior.disguise_std = 0.03;
    c.behavior.exaggeration = 20.0;
    c.behavior.detection = detection;
    c
}

#[test]
fn criterion_1_watermark_roc() {
    let start = Instant::now();
    let rows = roc_curve(&[3.0, 6.0, 9.0], &[0.5], 500, 25_400, 15, 7).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let floors = [(3.0, 0.99), (6.0, 0.95), (9.0, 0.90)];
    let mut pass = secs < 30.0;
    let mut detail = Vec::new();
    for (snr, floor) in floors {
        let row = rows.iter().find(|r| r.snr_db == snr).unwrap();
        pass &= row.tpr >= floor && row.fpr <= 0.01;
        detail.push(format!("{snr} dB tpr {:.3} fpr {:.3}", row.tpr, row.fpr));
    }
    detail.push(format!("{secs:.1} s"));
    report(1, "watermark detection", pass, &detail.join(", "));
    assert!(pass);
}

#[test]
fn criterion_2_consensus() {
    let start = Instant::now();
    let mut base = SimConfig::default();
    base.budget.theta = 1.0;
    base.budget.rounds = AutoOr::Value(50);
    base.chain.mode = MiningMode::Sampled;
    base.net.net.delay = DelayModel::Uniform { min: 1, max: 3 };
    base.net.round_deadline_ticks = 8;
    let mut bad_rounds = 0;
    let mut short_chains = 0;
    let mut transient_forks = 0;
    for seed in 1..=20 {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let out = run(&cfg);
        let s = &out.report.summary;
        assert_eq!(s.budget.k, 50);
        assert!(law_holds(&s.budget));
        bad_rounds += out.report.rounds.iter().filter(|r| !r.consensus).count();
        transient_forks += out.report.rounds.iter().map(|r| r.forks).sum::<usize>();
        if !(s.digests_agree && s.chain_height == 50 && out.chain.height() == 50) {
            short_chains += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = bad_rounds == 0 && short_chains == 0 && secs < 120.0;
    report(
        2,
        "consensus agreement",
        pass,
        &format!(
            "20 seeds x 50 rounds, rounds without agreement {bad_rounds}, divergent runs {short_chains}, \
             transient forks resolved {transient_forks}, {secs:.1} s"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_3_oracle_fedavg() {
    let mut mismatched = 0;
    let mut checked = 0;
    for seed in 1..=10 {
        let mut cfg = SimConfig::default();
        cfg.seed = seed;
        let out = run(&cfg);
        let budget = out.report.summary.budget;
        let sgd = SgdConfig { epochs: budget.tau, lr: cfg.train.lr, batch_size: cfg.train.batch_size };

        let init = out.spec.init_params(derive_seed("model-init", &[seed]));
        assert!(init.bit_eq(&out.chain.genesis().body.aggregate));
        let mut global: Vec<f64> = init.into_inner();
        let blocks = out.chain.blocks();
        assert_eq!(blocks.len() as u64, budget.k + 1);

        for (round, block) in (1..=budget.k).zip(&blocks[1..]) {
            let start = blade_core::ParamVector::new(global.clone()).unwrap();
            let total: u64 = out.partition.clients.iter().map(|d| d.len() as u64).sum();
            let mut agg = vec![0.0; global.len()];
            for (id, data) in out.partition.clients.iter().enumerate() {
                let train_seed = derive_seed("local-train", &[seed, id as u64, round]);
                let trained = local_train(&start, data, &out.spec, &sgd, train_seed).unwrap();
                let w = data.len() as f64 / total as f64;
                for ((a, t), g) in agg.iter_mut().zip(trained.as_slice()).zip(&global) {
                    *a += w * (t - g);
                }
            }
            let on_chain = block.body.aggregate.as_slice();
            assert_eq!(block.body.updates.len(), out.partition.clients.len());
            if agg.iter().zip(on_chain).any(|(a, b)| a.to_bits() != b.to_bits()) {
                mismatched += 1;
            }
            checked += 1;
            for (g, a) in global.iter_mut().zip(&agg) {
                *g += a;
            }
        }
        let final_model = out.chain.global_model().unwrap();
        assert!(final_model.as_slice().iter().zip(&global).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    let pass = mismatched == 0;
    report(3, "oracle equivalence", pass, &format!("10 seeds, {checked} rounds, {mismatched} non-identical aggregates"));
    assert!(pass);
}

#[test]
fn criterion_4_budget_law() {
    // t_B = 1·40/(20·1) = 2, t_T = 192·0.0625/1 = 12
    let b = compute_budget(1.0, 40.0, 20, 1.0, 192, 0.0625, 1, 200.0).unwrap();
    let mut pass = b.k == 14 && b.t_b == 2.0 && b.t_t == 12.0 && law_holds(&b);

    let mut configs = vec![SimConfig::default(), lazy_cfg(0.3, true), privacy_cfg(NoiseDecay::None)];
    for theta in [2.0, 6.0, 10.0] {
        let base = resource_cfg(theta);
        let k_max = RoundBudget::max_rounds(theta * 2.0, 2.0, 1, 200.0).unwrap();
        for k in 2..=k_max {
            let mut c = base.clone();
            c.budget.rounds = AutoOr::Value(k);
            configs.push(c);
        }
    }
    let mut violations = 0;
    for c in &configs {
        let sim = Simulation::new(c.clone()).unwrap();
        if !law_holds(sim.budget()) {
            violations += 1;
        }
    }
    pass &= violations == 0;
    report(
        4,
        "budget law",
        pass,
        &format!("compute_budget K = {}, {} configs checked, {violations} violations", b.k, configs.len()),
    );
    assert!(pass);
}

#[test]
fn criterion_5_resource_allocation() {
    let mut interior = 0;
    let mut optima = Vec::new();
    let mut detail = Vec::new();
    let mut law_ok = true;
    for theta in [2.0, 6.0, 10.0] {
        let cfg = resource_cfg(theta);
        let t_t = theta * 2.0;
        let k_max = RoundBudget::max_rounds(t_t, 2.0, 1, 200.0).unwrap();
        let values: Vec<f64> = (2..=k_max).map(|k| k as f64).collect();
        let table = sweep(&cfg, SweepAxis::K, &values, 20).unwrap();
        law_ok &= table.runs.iter().all(|r| r.rounds as f64 * (r.tau as f64 * t_t + 2.0) <= 200.0);
        let (best, point) = table
            .points
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.mean_train_loss.total_cmp(&b.1.mean_train_loss))
            .unwrap();
        let is_interior = best != 0 && best != table.points.len() - 1;
        interior += usize::from(is_interior);
        let se = point.std_train_loss / (point.seeds as f64).sqrt();
        optima.push((point.mean_train_loss, se));
        detail.push(format!(
            "theta {theta}: best K {} of 2..={k_max} loss {:.4}{}",
            point.value,
            point.mean_train_loss,
            if is_interior { "" } else { " (endpoint)" }
        ));
    }
    let distinct = (0..optima.len()).all(|i| {
        (i + 1..optima.len()).all(|j| {
            let (a, sa) = optima[i];
            let (b, sb) = optima[j];
            (a - b).abs() > (sa * sa + sb * sb).sqrt()
        })
    });
    let pass = interior >= 2 && distinct && law_ok;
    detail.push(format!("{interior}/3 interior, optima distinct {distinct}"));
    report(5, "resource allocation", pass, &detail.join("; "));
    assert!(pass);
}

#[test]
fn criterion_6_privacy_trend() {
    let eps = [1.0, 5.0, 50.0];
    let constant = sweep(&privacy_cfg(NoiseDecay::None), SweepAxis::Epsilon, &eps, 20).unwrap();
    let adaptive =
        sweep(&privacy_cfg(NoiseDecay::Adaptive { rate: 0.9, patience: 2 }), SweepAxis::Epsilon, &eps, 20).unwrap();
    let c = &constant.points;
    let a = &adaptive.points;
    let increasing = c.windows(2).all(|w| {
        let gap = w[1].mean_accuracy - w[0].mean_accuracy;
        gap > (sem(&w[0]).powi(2) + sem(&w[1]).powi(2)).sqrt()
    });
    let adaptive_wins = c.iter().zip(a).filter(|(c, a)| a.mean_accuracy >= c.mean_accuracy).count();
    let pass = increasing && adaptive_wins >= 2;
    let detail: Vec<String> = c
        .iter()
        .zip(a)
        .map(|(c, a)| {
            format!("eps {}: constant {:.4}+-{:.4} adaptive {:.4}", c.value, c.mean_accuracy, sem(c), a.mean_accuracy)
        })
        .collect();
    report(
        6,
        "privacy trend",
        pass,
        &format!("{}; strictly increasing {increasing}, adaptive >= constant {adaptive_wins}/3", detail.join(", ")),
    );
    assert!(pass);
}

#[test]
fn criterion_7_lazy_clients() {
    let mut base = Vec::new();
    let mut off = Vec::new();
    let mut on = Vec::new();
    let mut submitted = 0;
    let mut excluded = 0;
    let mut honest_excluded = 0;
    for seed in 1..=20 {
        let with_seed = |mut c: SimConfig| {
            c.seed = seed;
            c
        };
        base.push(run(&with_seed(lazy_cfg(0.0, false))).report.summary.final_accuracy);
        let o = run(&with_seed(lazy_cfg(0.3, false)));
        assert_eq!(o.report.summary.lazy_clients.len(), 6);
        off.push(o.report.summary.final_accuracy);
        let d = run(&with_seed(lazy_cfg(0.3, true)));
        submitted += d.report.summary.lazy_submissions;
        excluded += d.report.summary.lazy_excluded;
        honest_excluded += d.report.summary.honest_excluded;
        on.push(d.report.summary.final_accuracy);
    }
    let (b, o, d) = (mean(&base), mean(&off), mean(&on));
    let gap = b - o;
    let recovery = (d - o) / gap;
    let rate = excluded as f64 / submitted as f64;
    let pass = gap >= 0.05 && recovery >= 0.5 && rate >= 0.95;
    report(
        7,
        "lazy-client impact",
        pass,
        &format!(
            "honest {b:.4}, lazy {o:.4}, lazy+detection {d:.4}, drop {:.2} pp, recovery {recovery:.2}, \
             lazy excluded {excluded}/{submitted} ({rate:.3}), honest excluded {honest_excluded}",
            100.0 * gap
        ),
    );
    assert!(pass);
}

/// Largest-remainder split, ties to the lower id.
fn oracle_split(amount: u64, shares: &[(ClientId, u64)]) -> BTreeMap<ClientId, u64> {
    let total: u128 = shares.iter().map(|s| s.1 as u128).sum();
    let mut out = BTreeMap::new();
    let mut rem = Vec::new();
    let mut paid = 0;
    for &(id, w) in shares {
        let q = (amount as u128 * w as u128 / total) as u64;
        paid += q;
        *out.entry(id).or_insert(0) += q;
        rem.push((amount as u128 * w as u128 % total, id));
    }
    rem.sort_by(|x, y| y.0.cmp(&x.0).then(x.1.cmp(&y.1)));
    for (_, id) in rem.into_iter().take((amount - paid) as usize) {
        *out.get_mut(&id).unwrap() += 1;
    }
    out
}

#[test]
fn criterion_8_conservation() {
    let mut failures = Vec::new();
    for seed in 1..=20u64 {
        let mut cfg = if seed % 2 == 0 { SimConfig::default() } else { lazy_cfg(0.3, true) };
        cfg.chain.slash_excluded = seed % 2 == 1;
        cfg.seed = seed;
        let out = run(&cfg);
        let s = &out.report.summary;
        let c = &out.contract;
        let task = c.task();

        let mut trainer: BTreeMap<ClientId, u64> = BTreeMap::new();
        let mut miner: BTreeMap<ClientId, u64> = BTreeMap::new();
        let mut paid_to_trainers = 0;
        for block in &out.chain.blocks()[1..] {
            let r = block.header.round;
            let mut pool = task.reward_pool / task.rounds;
            if r == task.rounds {
                pool += task.reward_pool % task.rounds;
            }
            let shares: Vec<(ClientId, u64)> = block.body.updates.iter().map(|u| (u.client_id, u.samples)).collect();
            for (id, v) in oracle_split(pool, &shares) {
                *trainer.entry(id).or_insert(0) += v;
                paid_to_trainers += v;
            }
            *miner.entry(block.header.miner_id).or_insert(0) += task.miner_subsidy;
        }
        let minted = task.miner_subsidy * out.chain.height();
        let slashed: BTreeSet<ClientId> =
            if cfg.chain.slash_excluded { s.banned.iter().copied().collect() } else { BTreeSet::new() };
        let staked = cfg.chain.deposit * c.selected().len() as u64;
        let refunds: BTreeMap<ClientId, u64> =
            c.selected().iter().filter(|id| !slashed.contains(id)).map(|&id| (id, cfg.chain.deposit)).collect();
        let publisher = task.reward_pool - paid_to_trainers + cfg.chain.deposit * slashed.len() as u64;

        let rewards: u64 = trainer.values().sum::<u64>() + miner.values().sum::<u64>();
        let refunded: u64 = refunds.values().sum::<u64>() + publisher;
        let escrow_in = task.reward_pool + staked;

        let ok = c.phase() == Phase::Completed
            && &trainer == c.trainer_rewards()
            && &miner == c.miner_rewards()
            && &refunds == c.refunds()
            && publisher == c.publisher_refund()
            && minted == c.minted()
            && rewards + refunded == escrow_in + minted
            && c.totals().inflow == c.totals().outflow
            && c.totals().held == 0;
        if !ok {
            failures.push(seed);
        }
    }
    let pass = failures.is_empty();
    report(8, "economic conservation", pass, &format!("20 seeds replayed, mismatched seeds {failures:?}"));
    assert!(pass);
}

#[test]
fn criterion_9_pow_sanity() {
    let mut tries = Vec::new();
    let mut bad = 0;
    for i in 0..200u64 {
        let mut prev = [0u8; 32];
        prev[..8].copy_from_slice(&derive_seed("pow-acceptance", &[i]).to_le_bytes());
        let template = BlockHeader {
            prev_hash: prev,
            height: i + 1,
            round: i + 1,
            nonce: 0,
            difficulty_bits: 8,
            aggregate_digest: [0; 32],
            body_digest: [0; 32],
            miner_id: (i % 20) as u32,
            timestamp_ticks: 0,
        };
        let sealed = mine(&template, 8, derive_seed("pow-acceptance-nonce", &[i]), u64::MAX).unwrap();
        tries.push(sealed.tries as f64);
        if !header_ok(&sealed.header) {
            bad += 1;
        }
    }
    let mean_tries = mean(&tries);

    let mut chain_blocks = 0;
    for seed in 1..=3 {
        let mut cfg = SimConfig::default();
        cfg.seed = seed;
        cfg.chain.mode = MiningMode::Grind;
        cfg.chain.difficulty_bits = 8;
        let out = run(&cfg);
        verify_chain(&out.chain, 8).unwrap();
        for b in &out.chain.blocks()[1..] {
            chain_blocks += 1;
            if b.header.difficulty_bits != 8 || !header_ok(&b.header) {
                bad += 1;
            }
        }
    }
    let pass = (128.0..=512.0).contains(&mean_tries) && bad == 0;
    report(
        9,
        "proof-of-work sanity",
        pass,
        &format!("mean tries {mean_tries:.1} over 200 blocks, {chain_blocks} grind-mode chain headers, {bad} failed"),
    );
    assert!(pass);
}
