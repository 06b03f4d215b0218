//! Command-line interface: train, eval, gradcheck, sweep.

use clap::{Parser, Subcommand};
use pegeqat::checkpoint::Checkpoint;
use pegeqat::config::TrainConfig;
use pegeqat::curriculum::lr_at;
use pegeqat::error::Result;
use pegeqat::models::{build_model, ModelSpec};
use pegeqat::train::{self, load_data, load_state, mu_schedule, rate_schedule, TrainOptions};
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "pegeqat", about = "Low-bit quantization-aware training toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override train.seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Single-threaded batch preparation; makes every emitted artifact
        /// bit-reproducible.
        #[arg(long)]
        no_prefetch: bool,
        /// Output directory for metrics.csv, best.ckpt, final.ckpt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset's test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory (overrides data.dir recorded in the checkpoint).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite and estimator identities.
    Gradcheck {
        /// Check a single op (default: all).
        #[arg(long)]
        op: Option<String>,
    },
    /// Emit the schedule curves (t, p_t, mu_t, lr) for a config.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { config, seed, no_prefetch, out } => {
            let cfg = TrainConfig::from_file(&config)?;
            let opts = TrainOptions {
                out_dir: out,
                prefetch: !no_prefetch,
                seed_override: seed,
                verbose: true,
            };
            let outcome = train::train(&cfg, &opts)?;
            println!(
                "done: final test accuracy {:.2}%, best {:.2}%",
                outcome.final_test_acc, outcome.best_test_acc
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { checkpoint, data } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let mut cfg = TrainConfig::parse(&ck.descriptor)?;
            if let Some(dir) = data {
                cfg.data.dir = dir;
            }
            let (_, test_ds) = load_data(&cfg)?;
            let mspec = ModelSpec {
                arch: cfg.model.arch,
                width: cfg.model.width,
                classes: cfg.model.classes,
                input_shape: test_ds.shape,
                quant: cfg.quant.clone(),
                seed: cfg.train.seed,
            };
            let mut model = build_model::<f32>(&mspec)?;
            load_state(&mut model, &ck)?;
            let acc = pegeqat::models::evaluate(&mut model, &test_ds, 256)?;
            println!("top-1 test accuracy: {acc:.2}% ({} samples)", test_ds.len());
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { op } => {
            let reports = pegeqat::gradcheck::run(op.as_deref());
            if reports.is_empty() {
                eprintln!(
                    "unknown op; available: {}",
                    pegeqat::gradcheck::ALL_CHECKS.join(", ")
                );
                return Ok(ExitCode::FAILURE);
            }
            let mut all_ok = true;
            for r in &reports {
                println!(
                    "gradcheck {:<14} {}  (max rel err {:.2e}; {})",
                    r.name,
                    if r.passed { "PASS" } else { "FAIL" },
                    r.max_rel_err,
                    r.detail
                );
                all_ok &= r.passed;
            }
            Ok(if all_ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Sweep { config, out } => {
            let cfg = TrainConfig::from_file(&config)?;
            let n_train = cfg.data.subset_n.unwrap_or(match cfg.data.name {
                pegeqat::config::DataName::Cifar10 => 50_000,
                pegeqat::config::DataName::Mnist => 60_000,
                pegeqat::config::DataName::Synth => 2000,
            });
            let steps_per_epoch = n_train.div_ceil(cfg.data.batch) as u64;
            let total = (cfg.train.epochs as u64 * steps_per_epoch).max(1);
            let rate = rate_schedule(&cfg, total)?;
            let mu = mu_schedule(&cfg, total)?;
            let mut f = std::fs::File::create(&out)?;
            writeln!(f, "t,p_t,mu_t,lr")?;
            for t in 0..=total {
                writeln!(
                    f,
                    "{t},{:.6},{:.6},{:.6}",
                    rate.rate_at(t),
                    mu.mu_at(t),
                    lr_at(cfg.train.lr, t, total)?
                )?;
            }
            println!("wrote {} steps to {}", total + 1, out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}
