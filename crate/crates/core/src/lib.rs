//! Online knowledge distillation with a decoupled EMA teacher and decaying
//! ensemble knowledge, on a small reverse-mode autodiff core.
//!
//! Modules, bottom up: [`tensor`] and [`autodiff`] for differentiable f64
//! tensors, [`losses`] for the distillation objectives, [`network`] for the
//! multi-peer classifier, [`optim`] for SGD and the EMA update, [`data`] for
//! the synthetic tasks, [`trainer`] for the training loop and [`mcsim`] for
//! the 2D Monte Carlo model of distillation dynamics.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod error;
pub mod losses;
pub mod mcsim;
pub mod network;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use autodiff::{grad_check, log_softmax_rows, softmax_rows, Tape, Var};
pub use data::{derive_seed, gen_dataset, Dataset, DatasetKind, Split};
pub use error::{Error, Result};
pub use losses::{
    ce_loss, decay_weight, dk_loss, dkel_total, ek_loss, kd_loss, objective, pcl_total, pe_loss, pm_loss,
    teacher_ensemble, DecayFamily, DistillSchedule, LossBreakdown, PeerOutputs, TermSet,
};
pub use mcsim::{run_simulation, GapCurve, SimConfig, SimMethod};
pub use network::{MultiPeerNetwork, NetworkConfig, ParameterVector};
pub use optim::{ema_update, sgd_step, Sgd};
pub use tensor::Tensor;
pub use trainer::{
    collapse_monitor, evaluate, init_decoupled_teacher, run_parallel, zero_gradient_run, CollapseSample, EpochMetrics, Health, Method,
    TrainConfig, Trainer,
};
