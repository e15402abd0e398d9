//! Experiment configuration: one TOML document, dotted-path overrides and the
//! resolved echo written next to every run.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use dkel_core::{SimConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub run_name: String,
    /// Runs are written to `out_dir/run_name` unless `--out` is given.
    pub out_dir: PathBuf,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
    pub sim: SimConfig,
    pub collapse: CollapseConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run_name: "run".into(),
            out_dir: PathBuf::from("runs"),
            train: TrainConfig::default(),
            sweep: SweepConfig::default(),
            sim: SimConfig::default(),
            collapse: CollapseConfig::default(),
        }
    }
}

/// Seeds and ablation terms for multi-run training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Empty means the single seed `train.seed`.
    pub seeds: Vec<u64>,
    /// Distillation terms to ablate (`dk`, `ek`). Every subset becomes one
    /// arm on top of the independent baseline.
    pub ablation: Vec<String>,
}

/// Settings of the collapse demonstrator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollapseConfig {
    pub epochs: usize,
    /// Initial weight scale of the coupled arm.
    pub init_scale: f64,
    /// Weight decay of the coupled arm.
    pub weight_decay: f64,
    pub stress_steps: usize,
    pub stress_lr: f64,
    pub stress_weight_decay: f64,
    pub stress_init_scale: f64,
}

impl Default for CollapseConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            init_scale: 1e-3,
            weight_decay: 0.05,
            stress_steps: 1000,
            stress_lr: 0.1,
            stress_weight_decay: 5e-4,
            stress_init_scale: 1e-4,
        }
    }
}

impl ExperimentConfig {
    /// Reads `path` (or starts from defaults), applies `key=value`
    /// overrides and checks the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                text.parse::<Table>().with_context(|| format!("parsing {}", p.display()))?
            }
            None => Table::new(),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: ExperimentConfig = Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| anyhow!("invalid config: {}", e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.sim.validate()?;
        for term in &self.sweep.ablation {
            if term != "dk" && term != "ek" {
                bail!("sweep.ablation: unknown term `{term}` (dk, ek)");
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.run_name)
    }
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Sets `a.b.c=value` in `doc`, creating intermediate tables.
pub fn apply_override(doc: &mut Table, arg: &str) -> Result<()> {
    let (key, raw) = arg
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{arg}` is not of the form key=value"))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        bail!("override `{arg}` has an empty key segment");
    }
    let (last, parents) = path.split_last().expect("split yields one segment");
    let mut table = doc;
    for (i, seg) in parents.iter().enumerate() {
        let entry = table
            .entry(seg.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("override `{arg}`: `{}` is not a table", path[..=i].join(".")))?;
    }
    table.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

/// `3`, `0,2,5` or `0..5`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse()?, b.trim().parse()?);
        if b <= a {
            bail!("empty seed range `{s}`");
        }
        return Ok((a..b).collect());
    }
    s.split(',')
        .map(|p| p.trim().parse::<u64>().map_err(|e| anyhow!("bad seed `{p}`: {e}")))
        .collect()
}
