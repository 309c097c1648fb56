use std::path::PathBuf;
use std::process::ExitCode;

use blade_core::sim::{self, audit_chain_file, sweep, write_roc_csv, write_sweep_csv, SimConfig, SimError, SweepAxis};
use blade_core::watermark::roc_curve;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "blade-sim", version, about = "Blockchain-assisted decentralized federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write metrics.csv and summary.json.
    Run {
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Output directory; overrides `output.dir`.
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write trace.jsonl.
        #[arg(long)]
        trace: bool,
    },
    /// Sweep one parameter over several seeds and average the results.
    Sweep {
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// epsilon, theta, lazy_fraction, snr_db or K.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(short, long, default_value = "sweep-out")]
        out: PathBuf,
    },
    /// Watermark detection and false-alarm rates on random vectors.
    PnRoc {
        #[arg(long, value_delimiter = ',', default_values_t = [3.0, 6.0, 9.0])]
        snr: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.5])]
        gamma: Vec<f64>,
        #[arg(long, default_value_t = 500)]
        trials: usize,
        #[arg(long, default_value_t = 25_400)]
        use_len: usize,
        #[arg(long, default_value_t = 15)]
        degree: u32,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(short, long, default_value = "pn_roc.csv")]
        out: PathBuf,
    },
    /// Check linkage, proof of work and digests of a chain.bin dump.
    ChainAudit {
        dump: PathBuf,
        #[arg(long, default_value_t = 0)]
        min_difficulty: u32,
    },
    /// Print the default configuration as TOML.
    DefaultConfig,
}

fn load(config: Option<PathBuf>) -> Result<SimConfig, SimError> {
    match config {
        Some(path) => SimConfig::load(&path),
        None => Ok(SimConfig::default()),
    }
}

fn execute(cli: Cli) -> Result<(), SimError> {
    match cli.command {
        Command::Run { config, out, seed, trace } => {
            let mut cfg = load(config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if out.is_some() {
                cfg.output.dir = out;
            }
            cfg.output.dir.get_or_insert_with(|| PathBuf::from("run-out"));
            cfg.output.trace |= trace;
            let report = sim::run(&cfg)?;
            let s = &report.summary;
            println!(
                "rounds={} tau={} final_accuracy={:.4} final_train_loss={:.4} height={} consensus={} lazy_excluded={}/{}",
                s.rounds_executed,
                s.budget.tau,
                s.final_accuracy,
                s.final_train_loss,
                s.chain_height,
                s.consensus_all_rounds,
                s.lazy_excluded,
                s.lazy_submissions
            );
            println!("wrote {}", cfg.output.dir.as_ref().expect("set above").display());
        }
        Command::Sweep { config, axis, values, seeds, out } => {
            let cfg = load(config)?;
            let axis: SweepAxis = axis.parse()?;
            let table = sweep(&cfg, axis, &values, seeds)?;
            write_sweep_csv(&table, &out)?;
            println!("{:>10} {:>6} {:>10} {:>10} {:>12} {:>12}", axis.as_str(), "seeds", "acc", "acc_sd", "train_loss", "loss_sd");
            for p in &table.points {
                println!(
                    "{:>10} {:>6} {:>10.4} {:>10.4} {:>12.4} {:>12.4}",
                    p.value, p.seeds, p.mean_accuracy, p.std_accuracy, p.mean_train_loss, p.std_train_loss
                );
            }
            println!("wrote {}", out.display());
        }
        Command::PnRoc { snr, gamma, trials, use_len, degree, seed, out } => {
            let rows = roc_curve(&snr, &gamma, trials, use_len, degree, seed).map_err(|e| SimError::Config(e.to_string()))?;
            write_roc_csv(&rows, &out)?;
            for r in &rows {
                println!("snr_db={:>5} gamma={:.2} tpr={:.4} fpr={:.4}", r.snr_db, r.gamma, r.tpr, r.fpr);
            }
            println!("wrote {}", out.display());
        }
        Command::ChainAudit { dump, min_difficulty } => {
            let audit = audit_chain_file(&dump, min_difficulty)?;
            println!("{}", serde_json::to_string_pretty(&audit).expect("audit serializes"));
            if !audit.valid {
                return Err(SimError::Data(audit.error.unwrap_or_default()));
            }
        }
        Command::DefaultConfig => print!("{}", SimConfig::default().to_toml_string()),
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
