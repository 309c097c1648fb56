use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::AutoOr;
use super::report::CSV_VERSION_LINE;
use super::{SimConfig, SimError, Simulation};
use crate::rng::derive_seed;

/// Environment variable capping the number of parallel simulations.
pub const THREADS_ENV: &str = "BLADE_SIM_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Epsilon,
    Theta,
    LazyFraction,
    SnrDb,
    K,
}

impl SweepAxis {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Epsilon => "epsilon",
            Self::Theta => "theta",
            Self::LazyFraction => "lazy_fraction",
            Self::SnrDb => "snr_db",
            Self::K => "K",
        }
    }

    fn id(&self) -> u64 {
        match self {
            Self::Epsilon => 1,
            Self::Theta => 2,
            Self::LazyFraction => 3,
            Self::SnrDb => 4,
            Self::K => 5,
        }
    }
}

impl FromStr for SweepAxis {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self, SimError> {
        match s {
            "epsilon" => Ok(Self::Epsilon),
            "theta" => Ok(Self::Theta),
            "lazy_fraction" | "lazy-fraction" => Ok(Self::LazyFraction),
            "snr_db" | "snr-db" | "snr" => Ok(Self::SnrDb),
            "K" | "k" | "rounds" => Ok(Self::K),
            other => Err(SimError::Config(format!("unknown sweep axis {other:?}"))),
        }
    }
}

/// Seed of run `index` at `value` on `axis`.
pub fn sweep_seed(base: u64, axis: SweepAxis, value: f64, index: u64) -> u64 {
    derive_seed("sweep", &[base, axis.id(), value.to_bits(), index])
}

/// Copy of `cfg` with the swept parameter set to `value`.
pub fn apply_axis(cfg: &SimConfig, axis: SweepAxis, value: f64) -> Result<SimConfig, SimError> {
    let mut out = cfg.clone();
    match axis {
        SweepAxis::Epsilon => {
            if !cfg.privacy.enabled {
                return Err(SimError::Config("epsilon sweep needs privacy.enabled".into()));
            }
            out.privacy.epsilon = value;
        }
        SweepAxis::Theta => {
            if cfg.budget.t_t.is_some() || cfg.budget.cycles_per_sample.is_some() {
                return Err(SimError::Config("theta sweep needs t_T derived from theta".into()));
            }
            out.budget.theta = value;
        }
        SweepAxis::LazyFraction => out.behavior.lazy_fraction = value,
        SweepAxis::SnrDb => {
            if !cfg.watermark.enabled {
                return Err(SimError::Config("snr_db sweep needs watermark.enabled".into()));
            }
            out.watermark.snr_db = value;
        }
        SweepAxis::K => {
            if value.fract() != 0.0 || value < 1.0 {
                return Err(SimError::Config(format!("K must be a positive integer, got {value}")));
            }
            out.budget.rounds = AutoOr::Value(value as u64);
        }
    }
    out.output.dir = None;
    out.output.trace = false;
    out.validate()?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub value: f64,
    pub seed_index: u64,
    pub seed: u64,
    pub rounds: u64,
    pub tau: u32,
    pub final_accuracy: f64,
    pub final_train_loss: f64,
    pub final_test_loss: f64,
    pub lazy_submissions: usize,
    pub lazy_excluded: usize,
    pub honest_excluded: usize,
    pub consensus: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub seeds: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_train_loss: f64,
    pub std_train_loss: f64,
    pub mean_test_loss: f64,
    pub std_test_loss: f64,
    /// Fraction of lazy submissions kept out of canonical blocks.
    pub lazy_excluded_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub runs: Vec<SweepRun>,
    pub points: Vec<SweepPoint>,
}

fn thread_count() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.parse().ok().filter(|&n: &usize| n > 0)
}

/// Runs `seeds_per_point` simulations per value and averages them.
pub fn sweep(cfg: &SimConfig, axis: SweepAxis, values: &[f64], seeds_per_point: u64) -> Result<SweepTable, SimError> {
    if values.is_empty() {
        return Err(SimError::Config("sweep needs at least one value".into()));
    }
    if seeds_per_point == 0 {
        return Err(SimError::Config("sweep needs at least one seed per value".into()));
    }
    let mut jobs = Vec::with_capacity(values.len() * seeds_per_point as usize);
    for &value in values {
        let point = apply_axis(cfg, axis, value)?;
        for i in 0..seeds_per_point {
            let mut c = point.clone();
            c.seed = sweep_seed(cfg.seed, axis, value, i);
            jobs.push((value, i, c));
        }
    }
    let run_one = |(value, i, c): &(f64, u64, SimConfig)| -> Result<SweepRun, SimError> {
        let out = Simulation::new(c.clone())?.run()?;
        let s = &out.report.summary;
        Ok(SweepRun {
            value: *value,
            seed_index: *i,
            seed: c.seed,
            rounds: s.budget.k,
            tau: s.budget.tau,
            final_accuracy: s.final_accuracy,
            final_train_loss: s.final_train_loss,
            final_test_loss: s.final_test_loss,
            lazy_submissions: s.lazy_submissions,
            lazy_excluded: s.lazy_excluded,
            honest_excluded: s.honest_excluded,
            consensus: s.consensus_all_rounds,
        })
    };
    let pool = {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = thread_count() {
            b = b.num_threads(n);
        }
        b.build().map_err(|e| SimError::Internal(e.to_string()))?
    };
    let mut runs = pool.install(|| jobs.par_iter().map(run_one).collect::<Result<Vec<_>, _>>())?;
    runs.sort_by(|a, b| a.value.total_cmp(&b.value).then(a.seed_index.cmp(&b.seed_index)));
    let points = summarize(&runs);
    Ok(SweepTable { axis, runs, points })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-value mean and sample standard deviation; a pure function of `runs`.
pub fn summarize(runs: &[SweepRun]) -> Vec<SweepPoint> {
    let mut values: Vec<f64> = runs.iter().map(|r| r.value).collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    values
        .into_iter()
        .map(|v| {
            let group: Vec<&SweepRun> = runs.iter().filter(|r| r.value == v).collect();
            let col = |f: fn(&SweepRun) -> f64| group.iter().map(|r| f(r)).collect::<Vec<_>>();
            let (mean_accuracy, std_accuracy) = mean_std(&col(|r| r.final_accuracy));
            let (mean_train_loss, std_train_loss) = mean_std(&col(|r| r.final_train_loss));
            let (mean_test_loss, std_test_loss) = mean_std(&col(|r| r.final_test_loss));
            let lazy: usize = group.iter().map(|r| r.lazy_submissions).sum();
            let excluded: usize = group.iter().map(|r| r.lazy_excluded).sum();
            SweepPoint {
                value: v,
                seeds: group.len(),
                mean_accuracy,
                std_accuracy,
                mean_train_loss,
                std_train_loss,
                mean_test_loss,
                std_test_loss,
                lazy_excluded_rate: (lazy > 0).then(|| excluded as f64 / lazy as f64),
            }
        })
        .collect()
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<String, SimError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| SimError::Internal(e.to_string()))?;
    }
    let body = w.into_inner().map_err(|e| SimError::Internal(e.to_string()))?;
    Ok(format!("{CSV_VERSION_LINE}\n{}", String::from_utf8(body).expect("csv is utf-8")))
}

/// Writes `sweep.csv` (one row per value) and `sweep_runs.csv` (one row per run).
pub fn write_sweep_csv(table: &SweepTable, dir: &Path) -> Result<(), SimError> {
    std::fs::create_dir_all(dir).map_err(|e| SimError::Io(format!("{}: {e}", dir.display())))?;
    for (name, text) in [("sweep.csv", to_csv(&table.points)?), ("sweep_runs.csv", to_csv(&table.runs)?)] {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| SimError::Io(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}
