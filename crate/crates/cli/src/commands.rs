//! Subcommand bodies. Each writes its artefacts under one output directory
//! and returns a summary for the caller to print or inspect.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use dkel_core::mcsim::{write_gap_csv, GapCurve};
use dkel_core::trainer::{first_collapse, write_metrics_csv, RunOutcome};
use dkel_core::{
    gen_dataset, run_parallel, run_simulation, zero_gradient_run, EpochMetrics, Health, Method, MultiPeerNetwork,
    TermSet, TrainConfig,
};

use crate::config::ExperimentConfig;

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build()?)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn echo_config(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    Ok(())
}

/// Training configurations for every (arm, seed), arm-major.
pub fn train_configs(cfg: &ExperimentConfig) -> Vec<TrainConfig> {
    let seeds = if cfg.sweep.seeds.is_empty() {
        vec![cfg.train.seed]
    } else {
        cfg.sweep.seeds.clone()
    };
    let arms: Vec<TrainConfig> = if cfg.sweep.ablation.is_empty() {
        vec![cfg.train.clone()]
    } else {
        let terms = &cfg.sweep.ablation;
        (0..1u32 << terms.len())
            .map(|mask| {
                let mut set = TermSet::INDEPENDENT;
                for (i, t) in terms.iter().enumerate() {
                    if mask & (1 << i) != 0 {
                        match t.as_str() {
                            "dk" => set.dk = true,
                            "ek" => set.ek = true,
                            _ => unreachable!("validated"),
                        }
                    }
                }
                TrainConfig {
                    method: Method::Baseline,
                    terms: Some(set),
                    ..cfg.train.clone()
                }
            })
            .collect()
    };
    arms.iter()
        .flat_map(|arm| seeds.iter().map(move |&seed| TrainConfig { seed, ..arm.clone() }))
        .collect()
}

#[derive(Clone, Debug)]
pub struct ArmSummary {
    pub label: String,
    pub final_teacher_ensemble: Vec<f64>,
    pub median_teacher_ensemble: f64,
    pub collapsed_runs: usize,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Groups finished runs by label, keeping first-seen order.
pub fn summarize(outcomes: &[RunOutcome]) -> Vec<ArmSummary> {
    let mut arms: Vec<ArmSummary> = Vec::new();
    for o in outcomes {
        let label = o.config.label();
        let acc = o.history.last().map(|m| m.acc_teacher_ensemble).unwrap_or(f64::NAN);
        let collapsed = usize::from(o.health == Health::Collapsing);
        match arms.iter_mut().find(|a| a.label == label) {
            Some(a) => {
                a.final_teacher_ensemble.push(acc);
                a.collapsed_runs += collapsed;
            }
            None => arms.push(ArmSummary {
                label,
                final_teacher_ensemble: vec![acc],
                median_teacher_ensemble: 0.0,
                collapsed_runs: collapsed,
            }),
        }
    }
    for a in &mut arms {
        a.median_teacher_ensemble = median(&a.final_teacher_ensemble);
    }
    arms
}

pub struct TrainReport {
    pub dir: PathBuf,
    pub outcomes: Vec<RunOutcome>,
    pub arms: Vec<ArmSummary>,
}

/// Runs every (arm, seed) and writes `config.toml`, `metrics.csv` and the
/// final student and teacher checkpoints.
pub fn cmd_train(cfg: &ExperimentConfig, dir: &Path, workers: usize) -> Result<TrainReport> {
    echo_config(cfg, dir)?;
    let results = run_parallel(train_configs(cfg), workers)?;
    let mut outcomes = Vec::with_capacity(results.len());
    for r in results {
        outcomes.push(r?);
    }
    let rows: Vec<EpochMetrics> = outcomes.iter().flat_map(|o| o.history.iter().cloned()).collect();
    let mut w = create(&dir.join("metrics.csv"))?;
    write_metrics_csv(&mut w, &rows)?;
    w.flush()?;

    let ckpt = dir.join("checkpoints");
    fs::create_dir_all(&ckpt)?;
    for o in &outcomes {
        let stem = format!("{}_seed{}", o.config.label().replace('+', "_"), o.config.seed);
        o.student.save(ckpt.join(format!("{stem}_student.bin")))?;
        o.teacher.save(ckpt.join(format!("{stem}_teacher.bin")))?;
    }
    let arms = summarize(&outcomes);
    Ok(TrainReport {
        dir: dir.to_path_buf(),
        outcomes,
        arms,
    })
}

/// Runs the Monte Carlo simulation and writes `config.toml` and `gaps.csv`.
pub fn cmd_mcsim(cfg: &ExperimentConfig, dir: &Path, workers: usize) -> Result<Vec<GapCurve>> {
    echo_config(cfg, dir)?;
    let curves = pool(workers)?.install(|| run_simulation(&cfg.sim))?;
    let mut w = create(&dir.join("gaps.csv"))?;
    write_gap_csv(&mut w, &curves)?;
    w.flush()?;
    Ok(curves)
}

#[derive(Clone, Debug)]
pub struct CollapseArm {
    pub name: &'static str,
    pub history: Vec<EpochMetrics>,
    pub fired_at: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct CollapseReport {
    pub arms: Vec<CollapseArm>,
    pub stress_fired_at: Option<usize>,
    pub stress_max_ratio_error: f64,
    pub stress_final_norm: f64,
}

/// The two collapse-demo arms: a coupled teacher pushed toward small losses
/// (tiny init, heavy weight decay) and decoupled DKEL at defaults.
pub fn collapse_arms(cfg: &ExperimentConfig) -> [(&'static str, TrainConfig); 2] {
    let c = &cfg.collapse;
    let mut coupled = TrainConfig {
        method: Method::Pcl,
        terms: None,
        epochs: c.epochs,
        weight_decay: c.weight_decay,
        ..cfg.train.clone()
    };
    coupled.network.init_scale = c.init_scale;
    let dkel = TrainConfig {
        method: Method::Dkel,
        terms: None,
        epochs: c.epochs,
        ..cfg.train.clone()
    };
    [("coupled", coupled), ("dkel", dkel)]
}

/// Writes `metrics.csv` (both arms), `norms.csv` and `stress.csv`.
pub fn cmd_collapse_demo(cfg: &ExperimentConfig, dir: &Path, workers: usize) -> Result<CollapseReport> {
    echo_config(cfg, dir)?;
    let arms = collapse_arms(cfg);
    let results = run_parallel(arms.iter().map(|(_, c)| c.clone()).collect(), workers)?;
    let monitor = &cfg.train.monitor;
    let mut report_arms = Vec::new();
    for ((name, _), r) in arms.iter().zip(results) {
        let o = r?;
        let samples: Vec<_> = o.history.iter().map(|m| m.collapse_sample()).collect();
        report_arms.push(CollapseArm {
            name,
            fired_at: first_collapse(&samples, monitor.window, monitor.threshold)?,
            history: o.history,
        });
    }

    let c = &cfg.collapse;
    let t = &cfg.train;
    let data = gen_dataset(t.data.kind, t.data.n, t.data.classes, t.data.noise, t.seed)?;
    let mut net = MultiPeerNetwork::init(t.network_config(), t.seed, c.stress_init_scale)?;
    let trace = zero_gradient_run(&mut net, &data.val, c.stress_steps, c.stress_lr, c.stress_weight_decay)?;

    let rows: Vec<EpochMetrics> = report_arms.iter().flat_map(|a| a.history.iter().cloned()).collect();
    let mut w = create(&dir.join("metrics.csv"))?;
    write_metrics_csv(&mut w, &rows)?;
    w.flush()?;

    let mut w = create(&dir.join("norms.csv"))?;
    writeln!(w, "arm,epoch,norm_student,norm_teacher,mean_abs_logit")?;
    for a in &report_arms {
        for m in &a.history {
            writeln!(w, "{},{},{},{},{}", a.name, m.epoch, m.norm_student, m.norm_teacher, m.mean_abs_logit)?;
        }
    }
    w.flush()?;

    let mut w = create(&dir.join("stress.csv"))?;
    writeln!(w, "step,param_norm,mean_abs_logit")?;
    for (i, s) in trace.samples.iter().enumerate() {
        writeln!(w, "{i},{},{}", s.param_norm, s.mean_abs_logit)?;
    }
    w.flush()?;

    Ok(CollapseReport {
        arms: report_arms,
        stress_fired_at: first_collapse(&trace.samples, monitor.window, monitor.threshold)?,
        stress_max_ratio_error: trace.max_ratio_error,
        stress_final_norm: trace.final_params.norm(),
    })
}
