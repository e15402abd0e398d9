//! Command-line front end: configuration loading, the subcommands and the
//! gradient-check harness.

pub mod commands;
pub mod config;
pub mod gradcheck;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{parse_seeds, ExperimentConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "dkel", version, about = "Online distillation lab: training, sweeps and the Monte Carlo simulation")]
pub struct Cli {
    /// TOML experiment config; defaults are used for anything missing.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (default: out_dir/run_name from the config).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for independent runs and simulation trials.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Overrides {
    /// Dotted `key=value` overrides, e.g. `train.lr=0.05`.
    #[arg(value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one configuration, a seed sweep or an ablation sweep.
    Train {
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// `0,1,2` or `0..5`.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Terms to ablate, e.g. `dk,ek`.
        #[arg(long)]
        ablation: Option<String>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run the 2D Monte Carlo model of distillation dynamics.
    Mcsim {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Check every primitive and loss against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Contrast a collapsing coupled-teacher run with DKEL defaults.
    CollapseDemo {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn push(set: &mut Vec<String>, key: &str, value: Option<String>) {
    if let Some(v) = value {
        set.push(format!("{key}={v}"));
    }
}

fn quoted_list(items: &str) -> String {
    let parts: Vec<String> = items
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| format!("\"{s}\""))
        .collect();
    format!("[{}]", parts.join(", "))
}

/// Folds command flags into dotted overrides (flags win over positional
/// overrides) and loads the config.
pub fn resolve(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut set = Vec::new();
    match &cli.command {
        Command::Train {
            method,
            seed,
            seeds,
            epochs,
            ablation,
            overrides,
        } => {
            set.extend(overrides.set.iter().cloned());
            push(&mut set, "train.method", method.as_ref().map(|m| format!("\"{m}\"")));
            push(&mut set, "train.seed", seed.map(|s| s.to_string()));
            if let Some(s) = seeds {
                let list = parse_seeds(s)?;
                set.push(format!("sweep.seeds={list:?}"));
            }
            push(&mut set, "train.epochs", epochs.map(|e| e.to_string()));
            push(&mut set, "sweep.ablation", ablation.as_deref().map(quoted_list));
        }
        Command::Mcsim {
            seed,
            trials,
            epochs,
            overrides,
        } => {
            set.extend(overrides.set.iter().cloned());
            push(&mut set, "sim.seed", seed.map(|s| s.to_string()));
            push(&mut set, "sim.trials", trials.map(|s| s.to_string()));
            push(&mut set, "sim.epochs", epochs.map(|s| s.to_string()));
        }
        Command::CollapseDemo { seed, epochs, overrides } => {
            set.extend(overrides.set.iter().cloned());
            push(&mut set, "train.seed", seed.map(|s| s.to_string()));
            push(&mut set, "collapse.epochs", epochs.map(|s| s.to_string()));
        }
        Command::Gradcheck { .. } => {}
    }
    ExperimentConfig::load(cli.config.as_deref(), &set)
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

/// Runs the parsed command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let workers = cli.workers.unwrap_or_else(default_workers);
    if let Command::Gradcheck { points, seed } = cli.command {
        return match gradcheck::run(&gradcheck::standard_cases(), points, seed) {
            Ok(reports) => {
                print!("{}", gradcheck::format_table(&reports));
                if reports.iter().all(|r| r.passed()) {
                    EXIT_OK
                } else {
                    EXIT_FAILURE
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                EXIT_FAILURE
            }
        };
    }

    let cfg = match resolve(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return EXIT_USAGE;
        }
    };
    let dir = cli.out.clone().unwrap_or_else(|| cfg.run_dir());
    let result = match cli.command {
        Command::Train { .. } => commands::cmd_train(&cfg, &dir, workers).map(|r| {
            for a in &r.arms {
                println!(
                    "{:<12} runs {} median final teacher-ensemble acc {:.4} collapsed {}",
                    a.label,
                    a.final_teacher_ensemble.len(),
                    a.median_teacher_ensemble,
                    a.collapsed_runs
                );
            }
        }),
        Command::Mcsim { .. } => commands::cmd_mcsim(&cfg, &dir, workers).map(|curves| {
            for c in &curves {
                println!(
                    "{:<5} final gap {:.6} settles (5%) at epoch {}",
                    c.method.name(),
                    c.mean.last().copied().unwrap_or(f64::NAN),
                    c.settling_epoch(0.05)
                );
            }
        }),
        Command::CollapseDemo { .. } => commands::cmd_collapse_demo(&cfg, &dir, workers).map(|r| {
            for a in &r.arms {
                match a.fired_at {
                    Some(e) => println!("{:<8} collapse flagged at epoch {e}", a.name),
                    None => println!("{:<8} healthy over {} epochs", a.name, a.history.len()),
                }
            }
            println!(
                "stress   zero-gradient run: max per-step ratio error {:.3e}, flagged {}",
                r.stress_max_ratio_error,
                r.stress_fired_at.map_or("never".to_string(), |s| format!("at step {s}"))
            );
        }),
        Command::Gradcheck { .. } => unreachable!(),
    };
    match result {
        Ok(()) => {
            println!("wrote {}", dir.display());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<dkel_core::Error>().is_some_and(|e| matches!(e, dkel_core::Error::Config(_))) {
                EXIT_USAGE
            } else {
                EXIT_FAILURE
            }
        }
    }
}
