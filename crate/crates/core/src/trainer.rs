//! End-to-end online distillation: teacher initialisation, the per-batch
//! student update, the EMA teacher update, evaluation and collapse
//! monitoring.
//!
//! One run is strictly sequential. Independent runs (seeds, ablation arms)
//! can execute in parallel through [`run_parallel`]; each owns its networks,
//! data and RNG streams, so results do not depend on scheduling.

use std::fmt::Write as _;
use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{augment_per_peer, gen_dataset, rng_for, Dataset, DatasetKind, Split};
use crate::error::{Error, Result};
use crate::losses::{ce_loss, objective, DecayFamily, DistillSchedule, LossBreakdown, PeerOutputs, TermSet};
use crate::network::{MultiPeerNetwork, NetworkConfig};
use crate::optim::{ema_update, Sgd};
use crate::tensor::Tensor;

// RNG stream tags
const STREAM_STUDENT: u64 = 1;
const STREAM_TEACHER: u64 = 2;
const STREAM_INIT_BATCH: u64 = 3;
const STREAM_SHUFFLE: u64 = 4;
const STREAM_AUGMENT: u64 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Decoupled teacher with decaying ensemble knowledge.
    Dkel,
    /// Peer collaborative learning: randomly initialised temporal-mean teacher.
    Pcl,
    /// Independent peers trained with cross entropy only.
    Baseline,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Dkel => "dkel",
            Method::Pcl => "pcl",
            Method::Baseline => "baseline",
        }
    }

    pub fn default_terms(self) -> TermSet {
        match self {
            Method::Dkel => TermSet::DKEL,
            Method::Pcl => TermSet::PCL,
            Method::Baseline => TermSet::INDEPENDENT,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dkel" => Ok(Method::Dkel),
            "pcl" => Ok(Method::Pcl),
            "baseline" => Ok(Method::Baseline),
            other => Err(Error::Config(format!("unknown method `{other}` (dkel, pcl, baseline)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub kind: DatasetKind,
    pub n: usize,
    pub classes: usize,
    pub noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Spirals,
            n: 1500,
            classes: 3,
            noise: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub peers: usize,
    /// Multiplier on the initial weights. Values far below 1 start the
    /// network near the all-zero collapsed state.
    pub init_scale: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            feature_dim: 16,
            peers: 3,
            init_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonitorConfig {
    pub window: usize,
    pub threshold: f64,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            window: 5,
            threshold: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    /// Overrides the method's loss terms (ablation arms).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub terms: Option<TermSet>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub milestones: Vec<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub eta: f64,
    pub tau: f64,
    pub decay: DecayFamily,
    pub gamma: f64,
    pub init_iters: usize,
    pub init_lr: f64,
    pub augment_std: f64,
    pub seed: u64,
    pub data: DataConfig,
    pub network: ArchConfig,
    pub monitor: MonitorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Dkel,
            terms: None,
            epochs: 100,
            batch_size: 128,
            lr: 0.1,
            lr_decay: 0.1,
            milestones: vec![50, 75],
            momentum: 0.9,
            weight_decay: 5e-4,
            eta: 0.05,
            tau: 3.0,
            decay: DecayFamily::Exponential,
            gamma: 0.5,
            init_iters: 1,
            init_lr: 0.01,
            augment_std: 0.1,
            seed: 0,
            data: DataConfig::default(),
            network: ArchConfig::default(),
            monitor: MonitorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return bad(format!("train.eta must lie in (0, 1), got {}", self.eta));
        }
        if !(self.lr >= 0.0) || !(self.init_lr >= 0.0) {
            return bad("train.lr and train.init_lr must be non-negative".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("train.weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("train.momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.tau > 0.0) {
            return bad(format!("train.tau must be positive, got {}", self.tau));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("train.epochs and train.batch_size must be positive".into());
        }
        if !(self.augment_std >= 0.0) {
            return bad("train.augment_std must be non-negative".into());
        }
        let terms = self.terms();
        if terms.pm && (terms.dk || terms.ek) {
            return bad("train.terms: pm cannot be combined with dk or ek".into());
        }
        self.schedule()?;
        self.network_config().validate()
    }

    pub fn terms(&self) -> TermSet {
        self.terms.unwrap_or_else(|| self.method.default_terms())
    }

    /// CSV label: the method name, or the active terms for an ablation arm.
    pub fn label(&self) -> String {
        let terms = self.terms();
        if terms == self.method.default_terms() {
            return self.method.name().to_string();
        }
        let mut label = String::from("ce");
        for (on, name) in [(terms.pe, "pe"), (terms.pm, "pm"), (terms.dk, "dk"), (terms.ek, "ek")] {
            if on {
                label.push('+');
                label.push_str(name);
            }
        }
        label
    }

    pub fn schedule(&self) -> Result<DistillSchedule> {
        DistillSchedule::new(self.decay, self.gamma, self.epochs.saturating_sub(1).max(1))
    }

    pub fn network_config(&self) -> NetworkConfig {
        NetworkConfig {
            input_dim: 2,
            hidden_dim: self.network.hidden_dim,
            feature_dim: self.network.feature_dim,
            classes: self.data.classes,
            peers: self.network.peers,
        }
    }

    /// Step-decayed learning rate for `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.lr_decay.powi(drops as i32)
    }
}

/// Per-epoch record.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub method: String,
    pub seed: u64,
    pub omega: f64,
    pub loss_ce: f64,
    pub loss_pe: Option<f64>,
    pub loss_dk: Option<f64>,
    pub loss_ek: Option<f64>,
    pub loss_ce_ensemble: f64,
    pub loss_total: f64,
    pub acc_student: Vec<f64>,
    pub acc_student_ensemble: f64,
    pub acc_teacher: Vec<f64>,
    pub acc_teacher_ensemble: f64,
    pub norm_student: f64,
    pub norm_teacher: f64,
    /// Mean absolute student peer logit on the validation split.
    pub mean_abs_logit: f64,
}

pub const METRICS_COLUMNS: [&str; 15] = [
    "epoch",
    "method",
    "seed",
    "omega",
    "loss_ce",
    "loss_pe",
    "loss_dk",
    "loss_ek",
    "loss_ceE",
    "loss_total",
    "acc_student_mean",
    "acc_teacher_mean",
    "acc_teacher_ensemble",
    "norm_student",
    "norm_teacher",
];

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

impl EpochMetrics {
    pub fn acc_student_mean(&self) -> f64 {
        mean(&self.acc_student)
    }

    pub fn acc_teacher_mean(&self) -> f64 {
        mean(&self.acc_teacher)
    }

    pub fn collapse_sample(&self) -> CollapseSample {
        CollapseSample {
            param_norm: self.norm_student,
            mean_abs_logit: self.mean_abs_logit,
        }
    }

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut row = String::new();
        write!(
            row,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.method,
            self.seed,
            self.omega,
            self.loss_ce,
            opt(self.loss_pe),
            opt(self.loss_dk),
            opt(self.loss_ek),
            self.loss_ce_ensemble,
            self.loss_total,
            self.acc_student_mean(),
            self.acc_teacher_mean(),
            self.acc_teacher_ensemble,
            self.norm_student,
            self.norm_teacher,
        )
        .expect("write to String");
        row
    }
}

pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[EpochMetrics]) -> Result<()> {
    writeln!(w, "{}", METRICS_COLUMNS.join(","))?;
    for r in rows {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Per-peer and ensemble accuracy.
#[derive(Clone, Debug, PartialEq)]
pub struct Accuracy {
    pub per_peer: Vec<f64>,
    pub ensemble: f64,
    pub mean_abs_logit: f64,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy_of(logits: &Tensor, labels: &[usize]) -> f64 {
    let hits = (0..logits.rows()).filter(|&i| argmax(logits.row(i)) == labels[i]).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Argmax accuracy of every peer and of the ensemble head on clean inputs.
pub fn evaluate(net: &MultiPeerNetwork, data: &Dataset) -> Result<Accuracy> {
    let views = vec![&data.x; net.peers()];
    let (logits, ensemble) = net.predict(&views)?;
    let per_peer = logits.iter().map(|l| accuracy_of(l, &data.y)).collect();
    let abs_sum: f64 = logits.iter().flat_map(|l| l.data().iter()).map(|v| v.abs()).sum();
    let count: usize = logits.iter().map(|l| l.len()).sum();
    Ok(Accuracy {
        per_peer,
        ensemble: accuracy_of(&ensemble, &data.y),
        mean_abs_logit: abs_sum / count.max(1) as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CollapseSample {
    pub param_norm: f64,
    pub mean_abs_logit: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Health {
    Healthy,
    Collapsing,
}

/// Flags collapse when the parameter norm fell at every step of the trailing
/// `window` samples and the latest mean |logit| is below `threshold`.
pub fn collapse_monitor(history: &[CollapseSample], window: usize, threshold: f64) -> Result<Health> {
    if window < 2 {
        return Err(Error::Parameter(format!("collapse window must be >= 2, got {window}")));
    }
    if history.len() < window {
        return Ok(Health::Healthy);
    }
    let tail = &history[history.len() - window..];
    let shrinking = tail.windows(2).all(|w| w[1].param_norm < w[0].param_norm);
    let tiny = tail[window - 1].mean_abs_logit < threshold;
    Ok(if shrinking && tiny { Health::Collapsing } else { Health::Healthy })
}

/// First sample index at which the monitor fires, if any.
pub fn first_collapse(history: &[CollapseSample], window: usize, threshold: f64) -> Result<Option<usize>> {
    for end in window..=history.len() {
        if collapse_monitor(&history[..end], window, threshold)? == Health::Collapsing {
            return Ok(Some(end - 1));
        }
    }
    Ok(None)
}

/// Trace of a weight-decay-only run.
#[derive(Clone, Debug, PartialEq)]
pub struct ZeroGradTrace {
    /// Samples before the first step and after every step.
    pub samples: Vec<CollapseSample>,
    /// Largest `|w_new / w_old − (1 − lr·λ)|` over steps and non-zero weights.
    pub max_ratio_error: f64,
    pub final_params: crate::network::ParameterVector,
}

/// SGD with a zero loss gradient, so only the L2 penalty acts. Momentum is
/// off; every parameter should shrink by `1 − lr·λ` per step.
pub fn zero_gradient_run(
    net: &mut MultiPeerNetwork,
    probe: &Dataset,
    steps: usize,
    lr: f64,
    weight_decay: f64,
) -> Result<ZeroGradTrace> {
    let mut opt = Sgd::new(lr, 0.0, weight_decay)?;
    let zeros: Vec<Tensor> = net.parameters().iter().map(|p| Tensor::zeros(p.shape())).collect();
    let factor = 1.0 - lr * weight_decay;
    let sample = |net: &MultiPeerNetwork| -> Result<CollapseSample> {
        Ok(CollapseSample {
            param_norm: net.param_norm(),
            mean_abs_logit: evaluate(net, probe)?.mean_abs_logit,
        })
    };
    let mut samples = vec![sample(net)?];
    let mut worst = 0.0f64;
    for _ in 0..steps {
        let before = net.parameter_vector();
        opt.step(net.parameters_mut(), &zeros)?;
        let after = net.parameter_vector();
        for (a, b) in after.0.iter().zip(&before.0) {
            if *b != 0.0 {
                worst = worst.max((a / b - factor).abs());
            }
        }
        samples.push(sample(net)?);
    }
    Ok(ZeroGradTrace {
        samples,
        max_ratio_error: worst,
        final_params: net.parameter_vector(),
    })
}

/// Copies `student` into `teacher`, then takes `init_iters` plain SGD steps
/// at `init_lr` on `Σₚ L_ce` over `batch` (every teacher peer sees the same
/// clean batch).
pub fn init_decoupled_teacher(
    student: &MultiPeerNetwork,
    teacher: &mut MultiPeerNetwork,
    batch: &Dataset,
    init_iters: usize,
    init_lr: f64,
) -> Result<()> {
    teacher.copy_parameters_from(student)?;
    let mut opt = Sgd::new(init_lr, 0.0, 0.0)?;
    for _ in 0..init_iters {
        let mut tape = Tape::new();
        let bound = teacher.bind(&mut tape, true);
        let x = tape.constant(batch.x.clone());
        let mut total = None;
        for p in 0..teacher.peers() {
            let (_, logits) = teacher.forward_peer(&mut tape, &bound, x, p)?;
            let ce = ce_loss(&mut tape, logits, &batch.y)?;
            total = Some(match total {
                Some(t) => tape.add(t, ce)?,
                None => ce,
            });
        }
        let total = total.expect("at least two peers");
        tape.backward(total)?;
        let grads = collect_grads(&tape, bound.vars(), teacher);
        opt.step(teacher.parameters_mut(), &grads)?;
    }
    Ok(())
}

/// Sum of per-peer cross entropy of `net` on `batch`.
pub fn peer_ce(net: &MultiPeerNetwork, batch: &Dataset) -> Result<f64> {
    let views = vec![&batch.x; net.peers()];
    let (logits, _) = net.predict(&views)?;
    let mut total = 0.0;
    for l in logits {
        let mut tape = Tape::new();
        let v = tape.constant(l);
        let ce = ce_loss(&mut tape, v, &batch.y)?;
        total += tape.value(ce).item();
    }
    Ok(total)
}

fn collect_grads(tape: &Tape, vars: &[crate::autodiff::Var], net: &MultiPeerNetwork) -> Vec<Tensor> {
    vars.iter()
        .zip(net.parameters())
        .map(|(v, p)| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect()
}

#[derive(Default)]
struct EpochAccumulator {
    batches: usize,
    ce: f64,
    pe: f64,
    dk: f64,
    ek: f64,
    ce_e: f64,
    total: f64,
}

impl EpochAccumulator {
    fn add(&mut self, bd: &LossBreakdown) {
        self.batches += 1;
        self.ce += mean(&bd.ce_per_peer);
        self.pe += mean(&bd.pe_per_peer);
        self.dk += mean(&bd.dk_per_peer);
        self.ek += mean(&bd.ek_per_peer);
        self.ce_e += bd.ce_ensemble;
        self.total += bd.total;
    }

    fn avg(&self, v: f64) -> f64 {
        v / self.batches.max(1) as f64
    }
}

/// One training run: student, decoupled (or, for PCL, randomly initialised)
/// teacher, optimiser state and history.
pub struct Trainer {
    cfg: TrainConfig,
    terms: TermSet,
    schedule: DistillSchedule,
    data: Split,
    student: MultiPeerNetwork,
    teacher: MultiPeerNetwork,
    opt: Sgd,
    history: Vec<EpochMetrics>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let d = &cfg.data;
        let data = gen_dataset(d.kind, d.n, d.classes, d.noise, cfg.seed)?;
        let net_cfg = cfg.network_config();
        let scale = cfg.network.init_scale;
        let student = MultiPeerNetwork::init(net_cfg, crate::data::derive_seed(cfg.seed, &[STREAM_STUDENT]), scale)?;
        let mut teacher = MultiPeerNetwork::init(net_cfg, crate::data::derive_seed(cfg.seed, &[STREAM_TEACHER]), scale)?;
        if cfg.method != Method::Pcl {
            let batch = Self::init_batch(&data.train, cfg.batch_size, cfg.seed);
            init_decoupled_teacher(&student, &mut teacher, &batch, cfg.init_iters, cfg.init_lr)?;
        }
        let opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay)?;
        Ok(Self {
            terms: cfg.terms(),
            schedule: cfg.schedule()?,
            cfg,
            data,
            student,
            teacher,
            opt,
            history: Vec::new(),
        })
    }

    fn init_batch(train: &Dataset, batch_size: usize, seed: u64) -> Dataset {
        let mut idx: Vec<usize> = (0..train.len()).collect();
        idx.shuffle(&mut rng_for(seed, &[STREAM_INIT_BATCH]));
        idx.truncate(batch_size.min(train.len()));
        train.subset(&idx)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn data(&self) -> &Split {
        &self.data
    }

    pub fn student(&self) -> &MultiPeerNetwork {
        &self.student
    }

    pub fn teacher(&self) -> &MultiPeerNetwork {
        &self.teacher
    }

    pub fn history(&self) -> &[EpochMetrics] {
        &self.history
    }

    pub fn into_parts(self) -> (Vec<EpochMetrics>, MultiPeerNetwork, MultiPeerNetwork) {
        (self.history, self.student, self.teacher)
    }

    /// Shuffled mini-batch index lists for `epoch`.
    pub fn batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.data.train.len()).collect();
        idx.shuffle(&mut rng_for(self.cfg.seed, &[STREAM_SHUFFLE, epoch as u64]));
        idx.chunks(self.cfg.batch_size).map(|c| c.to_vec()).collect()
    }

    /// Forward, loss, backward and SGD update of the student for one batch.
    /// The teacher is only read.
    pub fn student_step(&mut self, epoch: usize, batch: usize, idx: &[usize]) -> Result<LossBreakdown> {
        let xb = self.data.train.x.gather_rows(idx);
        let yb: Vec<usize> = idx.iter().map(|&i| self.data.train.y[i]).collect();
        let m = self.student.peers();
        let views: Vec<Tensor> = (0..m)
            .map(|p| {
                let mut rng = rng_for(self.cfg.seed, &[STREAM_AUGMENT, epoch as u64, batch as u64, p as u64]);
                augment_per_peer(&xb, self.cfg.augment_std, &mut rng)
            })
            .collect();

        let mut tape = Tape::new();
        let bound = self.student.bind(&mut tape, true);
        let mut features = Vec::with_capacity(m);
        let mut peers = Vec::with_capacity(m);
        for (p, view) in views.iter().enumerate() {
            let x = tape.constant(view.clone());
            let (f, l) = self.student.forward_peer(&mut tape, &bound, x, p)?;
            features.push(f);
            peers.push(l);
        }
        let ensemble = self.student.forward_ensemble(&mut tape, &bound, &features)?;
        let outputs = PeerOutputs { peers, ensemble };

        // teacher peer j runs on view j
        let teacher_logits = if self.terms.uses_teacher() {
            let refs: Vec<&Tensor> = views.iter().collect();
            self.teacher.predict(&refs)?.0
        } else {
            Vec::new()
        };

        let omega = self.schedule.weight(epoch.min(self.schedule.epoch_max))?;
        let (total, bd) = objective(&mut tape, &outputs, &teacher_logits, &yb, self.terms, omega, self.cfg.tau)?;
        if !bd.total.is_finite() {
            return Err(self.non_finite(epoch, batch));
        }
        tape.backward(total)?;
        let grads = collect_grads(&tape, bound.vars(), &self.student);
        self.opt.lr = self.cfg.lr_at(epoch);
        self.opt.step(self.student.parameters_mut(), &grads)?;
        if !self.student.parameters().iter().all(|t| t.is_finite()) {
            return Err(self.non_finite(epoch, batch));
        }
        Ok(bd)
    }

    fn non_finite(&self, epoch: usize, batch: usize) -> Error {
        Error::NonFinite {
            epoch,
            batch,
            student_norm: self.student.param_norm(),
            teacher_norm: self.teacher.param_norm(),
        }
    }

    /// EMA update of the teacher from the current student.
    pub fn teacher_step(&mut self) -> Result<()> {
        ema_update(&mut self.teacher, &self.student, self.cfg.eta)
    }

    pub fn train_epoch(&mut self, epoch: usize) -> Result<EpochMetrics> {
        if epoch >= self.cfg.epochs {
            return Err(Error::Parameter(format!("epoch {epoch} beyond configured {}", self.cfg.epochs)));
        }
        let mut acc = EpochAccumulator::default();
        for (b, idx) in self.batches(epoch).into_iter().enumerate() {
            let bd = self.student_step(epoch, b, &idx)?;
            self.teacher_step()?;
            acc.add(&bd);
        }
        let s_acc = evaluate(&self.student, &self.data.val)?;
        let t_acc = evaluate(&self.teacher, &self.data.val)?;
        let t = self.terms;
        let metrics = EpochMetrics {
            epoch,
            method: self.cfg.label(),
            seed: self.cfg.seed,
            omega: self.schedule.weight(epoch.min(self.schedule.epoch_max))?,
            loss_ce: acc.avg(acc.ce),
            loss_pe: t.pe.then(|| acc.avg(acc.pe)),
            loss_dk: (t.dk || t.pm).then(|| acc.avg(acc.dk)),
            loss_ek: t.ek.then(|| acc.avg(acc.ek)),
            loss_ce_ensemble: acc.avg(acc.ce_e),
            loss_total: acc.avg(acc.total),
            acc_student: s_acc.per_peer,
            acc_student_ensemble: s_acc.ensemble,
            acc_teacher: t_acc.per_peer,
            acc_teacher_ensemble: t_acc.ensemble,
            norm_student: self.student.param_norm(),
            norm_teacher: self.teacher.param_norm(),
            mean_abs_logit: s_acc.mean_abs_logit,
        };
        self.history.push(metrics.clone());
        Ok(metrics)
    }

    pub fn run(&mut self) -> Result<&[EpochMetrics]> {
        for e in self.history.len()..self.cfg.epochs {
            self.train_epoch(e)?;
        }
        Ok(&self.history)
    }

    pub fn collapse_status(&self) -> Result<Health> {
        let samples: Vec<CollapseSample> = self.history.iter().map(|m| m.collapse_sample()).collect();
        let fired = first_collapse(&samples, self.cfg.monitor.window, self.cfg.monitor.threshold)?;
        Ok(if fired.is_some() { Health::Collapsing } else { Health::Healthy })
    }
}

/// Finished run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub config: TrainConfig,
    pub history: Vec<EpochMetrics>,
    pub student: MultiPeerNetwork,
    pub teacher: MultiPeerNetwork,
    pub health: Health,
}

pub fn run_one(cfg: TrainConfig) -> Result<RunOutcome> {
    let mut trainer = Trainer::new(cfg.clone())?;
    trainer.run()?;
    let health = trainer.collapse_status()?;
    let (history, student, teacher) = trainer.into_parts();
    Ok(RunOutcome {
        config: cfg,
        history,
        student,
        teacher,
        health,
    })
}

/// Runs independent configurations on a pool of `workers` threads.
/// Results come back in input order.
pub fn run_parallel(cfgs: Vec<TrainConfig>, workers: usize) -> Result<Vec<Result<RunOutcome>>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| cfgs.into_par_iter().map(run_one).collect()))
}
