use std::fs;

use blade_core::mlcore::{make_partitioned_data, SyntheticSpec};
use blade_core::sim::{
    apply_axis, audit_chain_file, sweep, sweep_seed, write_idx, write_outputs, AutoOr, DataSource, SweepAxis,
    CSV_VERSION_LINE,
};
use blade_core::{SimConfig, SimError, Simulation};

fn small() -> SimConfig {
    let mut c = SimConfig::default();
    c.data.dims = 20;
    c.data.samples_per_client = 40;
    c.data.test_samples = 200;
    c.budget.theta = 10.0;
    c
}

#[test]
fn same_seed_gives_identical_metrics() {
    let a = Simulation::new(small()).unwrap().run().unwrap();
    let b = Simulation::new(small()).unwrap().run().unwrap();
    assert_eq!(a.report.metrics_csv().unwrap(), b.report.metrics_csv().unwrap());

    let mut other = small();
    other.seed = 2;
    let c = Simulation::new(other).unwrap().run().unwrap();
    assert_ne!(a.report.metrics_csv().unwrap(), c.report.metrics_csv().unwrap());
}

#[test]
fn metrics_csv_is_versioned() {
    let out = Simulation::new(small()).unwrap().run().unwrap();
    let csv = out.report.metrics_csv().unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(CSV_VERSION_LINE));
    assert!(lines.next().unwrap().starts_with("round,"));
    assert_eq!(lines.count() as u64, out.report.summary.rounds_executed);
}

#[test]
fn singleton_sweep_matches_direct_run() {
    let cfg = small();
    let table = sweep(&cfg, SweepAxis::Theta, &[10.0], 1).unwrap();
    let mut direct = apply_axis(&cfg, SweepAxis::Theta, 10.0).unwrap();
    direct.seed = sweep_seed(cfg.seed, SweepAxis::Theta, 10.0, 0);
    let s = Simulation::new(direct).unwrap().run().unwrap().report.summary;
    let r = &table.runs[0];
    assert_eq!(r.seed, s.seed);
    assert_eq!(r.final_accuracy.to_bits(), s.final_accuracy.to_bits());
    assert_eq!(r.final_train_loss.to_bits(), s.final_train_loss.to_bits());
    assert_eq!(table.points[0].std_accuracy, 0.0);
}

#[test]
fn lazy_fraction_rounds_to_client_count() {
    let mut cfg = small();
    cfg.behavior.lazy_fraction = 0.3;
    let sim = Simulation::new(cfg).unwrap();
    assert_eq!(sim.lazy_clients().len(), 6);
}

#[test]
fn lazy_copies_are_undetected_without_watermark_and_caught_with_it() {
    let mut cfg = small();
    cfg.behavior.lazy_fraction = 0.3;
    let off = Simulation::new(cfg.clone()).unwrap().run().unwrap().report.summary;
    assert!(off.lazy_submissions > 0);
    assert_eq!(off.lazy_excluded, 0);

    // detection needs at least ~1000 chips
    cfg.data.dims = 100;
    cfg.watermark.enabled = true;
    cfg.behavior.detection = true;
    let sim = Simulation::new(cfg).unwrap();
    let lazy: Vec<_> = sim.lazy_clients().iter().copied().collect();
    let on = sim.run().unwrap().report.summary;
    assert_eq!(on.lazy_excluded, on.lazy_submissions);
    assert_eq!(on.honest_excluded, 0);
    assert_eq!(on.banned, lazy);
}

#[test]
fn infeasible_budget_is_rejected() {
    let mut cfg = small();
    cfg.budget.rounds = AutoOr::Value(1_000);
    let err = Simulation::new(cfg).err().expect("budget violation");
    assert!(matches!(err, SimError::Budget(_)));
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn outputs_round_trip_and_chain_dump_audits() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.output.trace = true;
    let out = Simulation::new(cfg).unwrap().run().unwrap();
    write_outputs(&out, dir.path(), true).unwrap();

    let summary: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["chain_height"], out.chain.height());
    let trace = fs::read_to_string(dir.path().join("trace.jsonl")).unwrap();
    assert!(trace.lines().count() > 0);
    assert!(trace.lines().all(|l| serde_json::from_str::<serde_json::Value>(l).is_ok()));

    let dump = dir.path().join("chain.bin");
    let audit = audit_chain_file(&dump, 0).unwrap();
    assert!(audit.valid, "{:?}", audit.error);
    assert_eq!(audit.height, out.chain.height());

    // flip one byte of the last block's aggregate
    let mut bytes = fs::read(&dump).unwrap();
    let n = bytes.len();
    bytes[n - 3] ^= 0x40;
    fs::write(&dump, &bytes).unwrap();
    let tampered = audit_chain_file(&dump, 0);
    assert!(!matches!(tampered, Ok(ref a) if a.valid));
}

#[test]
fn toml_round_trip() {
    let mut cfg = small();
    cfg.behavior.lazy_fraction = 0.3;
    cfg.budget.tau = AutoOr::Value(2);
    let text = cfg.to_toml_string();
    assert_eq!(SimConfig::from_toml_str(&text).unwrap(), cfg);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let err = SimConfig::from_toml_str("[train]\nlearning_rate = 0.1\n").err().unwrap();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn idx_source_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec { n_clients: 4, samples_per_client: 50, dims: 16, num_classes: 4, ..Default::default() };
    let part = make_partitioned_data(&spec).unwrap();
    let train = part.train_union();
    let to_bytes = |v: &[f64]| v.iter().map(|x| ((x.tanh() + 1.0) * 127.5) as u8).collect::<Vec<u8>>();
    let paths = ["train-images", "train-labels", "test-images", "test-labels"].map(|n| dir.path().join(n));
    let labels = |d: &blade_core::Dataset| d.labels().iter().map(|&l| l as u8).collect::<Vec<u8>>();
    write_idx(&paths[0], &paths[1], 4, 4, &to_bytes(train.features()), &labels(&train)).unwrap();
    write_idx(&paths[2], &paths[3], 4, 4, &to_bytes(part.test.features()), &labels(&part.test)).unwrap();

    let mut cfg = SimConfig::default();
    cfg.n_clients = 4;
    cfg.data.source = DataSource::Idx;
    cfg.data.train_images = Some(paths[0].clone());
    cfg.data.train_labels = Some(paths[1].clone());
    cfg.data.test_images = Some(paths[2].clone());
    cfg.data.test_labels = Some(paths[3].clone());
    let out = Simulation::new(cfg).unwrap().run().unwrap();
    assert_eq!(out.partition.clients.len(), 4);
    assert_eq!(out.partition.clients.iter().map(|d| d.len()).sum::<usize>(), 200);
    assert!(out.report.summary.consensus_all_rounds);
}
