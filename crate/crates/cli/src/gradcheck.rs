//! Finite-difference audit of every tape primitive and every loss.

use std::fmt::Write as _;

use dkel_core::data::rng_for;
use dkel_core::losses::{ce_loss, dk_loss, ek_loss, kd_loss, objective, pe_loss, pm_loss, PeerOutputs, TermSet};
use dkel_core::{MultiPeerNetwork, NetworkConfig, Result, Tape, Tensor, Var};
use rand::Rng;

pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const LOSS_TOL: f64 = 1e-3;
pub const EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Primitive,
    Loss,
}

impl Group {
    pub fn tolerance(self) -> f64 {
        match self {
            Group::Primitive => PRIMITIVE_TOL,
            Group::Loss => LOSS_TOL,
        }
    }
}

type CaseFn = Box<dyn Fn(&mut Tape, Var) -> Result<Var> + Send + Sync>;

pub struct GradCase {
    pub name: &'static str,
    pub group: Group,
    pub shape: [usize; 2],
    pub f: CaseFn,
}

impl GradCase {
    fn new(
        name: &'static str,
        group: Group,
        shape: [usize; 2],
        f: impl Fn(&mut Tape, Var) -> Result<Var> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name,
            group,
            shape,
            f: Box::new(f),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseReport {
    pub name: &'static str,
    pub group: Group,
    pub max_error: f64,
    pub tolerance: f64,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }
}

const N: usize = 4;
const C: usize = 3;
const LABELS: [usize; N] = [0, 2, 1, 2];

fn fixed(rows: usize, cols: usize, key: u64) -> Tensor {
    let mut rng = rng_for(0x9c, &[key]);
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect())
        .expect("consistent shape")
}

/// Σ W∘y with a fixed W, so non-scalar outputs get a non-trivial gradient.
fn reduce(tape: &mut Tape, y: Var, key: u64) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let (r, c) = (shape[0], shape.get(1).copied().unwrap_or(1));
    let w = tape.constant(fixed(r, c, key));
    let prod = tape.mul(y, w)?;
    Ok(tape.sum(prod))
}

/// Three peer logits affine in `x` and a constant ensemble. The ensemble is
/// a stop-gradient target inside the peer-ensemble term, so it must not move
/// with the probe.
fn peer_outputs(tape: &mut Tape, x: Var) -> Result<PeerOutputs> {
    let mut peers = Vec::new();
    for p in 0..3 {
        let s = tape.scale(x, 1.0 + 0.3 * p as f64);
        let off = tape.constant(fixed(N, C, 100 + p as u64));
        peers.push(tape.add(s, off)?);
    }
    let ensemble = tape.constant(fixed(N, C, 110));
    Ok(PeerOutputs { peers, ensemble })
}

fn teachers() -> Vec<Tensor> {
    (0..3).map(|j| fixed(N, C, 200 + j)).collect()
}

/// Every tape primitive and every loss term.
pub fn standard_cases() -> Vec<GradCase> {
    use Group::{Loss, Primitive};
    let tau = 2.0;
    vec![
        GradCase::new("matmul_left", Primitive, [N, C], |t, x| {
            let b = t.constant(fixed(C, 2, 1));
            let y = t.matmul(x, b)?;
            reduce(t, y, 2)
        }),
        GradCase::new("matmul_right", Primitive, [C, 2], |t, x| {
            let a = t.constant(fixed(N, C, 3));
            let y = t.matmul(a, x)?;
            reduce(t, y, 4)
        }),
        GradCase::new("add_bias_input", Primitive, [N, C], |t, x| {
            let b = t.constant(fixed(1, C, 5));
            let y = t.add_bias(x, b)?;
            reduce(t, y, 6)
        }),
        GradCase::new("add_bias_bias", Primitive, [1, C], |t, x| {
            let a = t.constant(fixed(N, C, 7));
            let y = t.add_bias(a, x)?;
            reduce(t, y, 8)
        }),
        GradCase::new("add", Primitive, [N, C], |t, x| {
            let a = t.constant(fixed(N, C, 9));
            let y = t.add(x, a)?;
            let y = t.add(y, x)?;
            reduce(t, y, 10)
        }),
        GradCase::new("sub", Primitive, [N, C], |t, x| {
            let a = t.constant(fixed(N, C, 11));
            let y = t.sub(a, x)?;
            reduce(t, y, 12)
        }),
        GradCase::new("mul", Primitive, [N, C], |t, x| {
            let y = t.mul(x, x)?;
            reduce(t, y, 13)
        }),
        GradCase::new("scale", Primitive, [N, C], |t, x| {
            let y = t.scale(x, -2.5);
            reduce(t, y, 14)
        }),
        GradCase::new("relu", Primitive, [N, C], |t, x| {
            let y = t.relu(x);
            reduce(t, y, 15)
        }),
        GradCase::new("softmax_t", Primitive, [N, C], move |t, x| {
            let y = t.softmax_t(x, tau)?;
            reduce(t, y, 16)
        }),
        GradCase::new("log_softmax_t", Primitive, [N, C], move |t, x| {
            let y = t.log_softmax_t(x, tau)?;
            reduce(t, y, 17)
        }),
        GradCase::new("sum", Primitive, [N, C], |t, x| {
            let y = t.mul(x, x)?;
            Ok(t.sum(y))
        }),
        GradCase::new("mean", Primitive, [N, C], |t, x| {
            let y = t.mul(x, x)?;
            Ok(t.mean(y))
        }),
        GradCase::new("concat_cols", Primitive, [N, C], |t, x| {
            let d = t.scale(x, 3.0);
            let y = t.concat_cols(&[x, d, x])?;
            reduce(t, y, 18)
        }),
        GradCase::new("map_tanh", Primitive, [N, C], |t, x| {
            let y = t.map(x, f64::tanh, |v| 1.0 - v.tanh().powi(2));
            reduce(t, y, 19)
        }),
        GradCase::new("ce", Loss, [N, C], |t, x| ce_loss(t, x, &LABELS)),
        GradCase::new("kd", Loss, [N, C], move |t, x| kd_loss(t, x, &fixed(N, C, 20), tau)),
        GradCase::new("pe", Loss, [N, C], move |t, x| {
            let out = peer_outputs(t, x)?;
            let parts = pe_loss(t, &out.peers, out.ensemble, tau)?;
            let y = t.add(parts[0], parts[1])?;
            t.add(y, parts[2])
        }),
        GradCase::new("pm", Loss, [N, C], move |t, x| {
            let teach = teachers();
            pm_loss(t, x, &[&teach[1], &teach[2]], tau)
        }),
        GradCase::new("dk", Loss, [N, C], move |t, x| {
            let teach = teachers();
            dk_loss(t, x, &[&teach[0], &teach[2]], tau)
        }),
        GradCase::new("ek", Loss, [N, C], move |t, x| ek_loss(t, x, &teachers(), 1, tau)),
        GradCase::new("pcl_total", Loss, [N, C], move |t, x| {
            let out = peer_outputs(t, x)?;
            Ok(objective(t, &out, &teachers(), &LABELS, TermSet::PCL, 0.0, tau)?.0)
        }),
        GradCase::new("dkel_total", Loss, [N, C], move |t, x| {
            let out = peer_outputs(t, x)?;
            Ok(objective(t, &out, &teachers(), &LABELS, TermSet::DKEL, 0.6, tau)?.0)
        }),
        GradCase::new("ce_ensemble", Loss, [N, C], |t, x| {
            let w = t.constant(fixed(C, C, 22));
            let e = t.matmul(x, w)?;
            ce_loss(t, e, &LABELS)
        }),
        // peer-ensemble term left out: its target depends on the input here
        GradCase::new("dk_ek_network", Loss, [N, 2], move |t, x| {
            let cfg = NetworkConfig {
                input_dim: 2,
                hidden_dim: 6,
                feature_dim: 4,
                classes: C,
                peers: 3,
            };
            let net = MultiPeerNetwork::init(cfg, 5, 1.0)?;
            let bound = net.bind(t, false);
            let mut features = Vec::new();
            let mut peers = Vec::new();
            for p in 0..3 {
                let (f, l) = net.forward_peer(t, &bound, x, p)?;
                features.push(f);
                peers.push(l);
            }
            let ensemble = net.forward_ensemble(t, &bound, &features)?;
            let out = PeerOutputs { peers, ensemble };
            let terms = TermSet {
                dk: true,
                ek: true,
                ..TermSet::INDEPENDENT
            };
            Ok(objective(t, &out, &teachers(), &LABELS, terms, 0.6, tau)?.0)
        }),
    ]
}

/// A primitive whose backward rule is wrong on purpose (negative control).
pub fn corrupted_case() -> GradCase {
    GradCase::new("corrupted_map", Group::Primitive, [N, C], |t, x| {
        let y = t.map(x, |v| v * v, |v| 2.0 * v + 0.01);
        reduce(t, y, 21)
    })
}

/// Max relative error of each case over `points` random inputs.
pub fn run(cases: &[GradCase], points: usize, seed: u64) -> Result<Vec<CaseReport>> {
    let mut reports = Vec::with_capacity(cases.len());
    for (ci, case) in cases.iter().enumerate() {
        let mut worst = 0.0f64;
        for k in 0..points {
            let mut rng = rng_for(seed, &[ci as u64, k as u64]);
            let [r, c] = case.shape;
            let x = Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-2.0..2.0)).collect())?;
            worst = worst.max(dkel_core::grad_check(&case.f, &x, EPS)?);
        }
        reports.push(CaseReport {
            name: case.name,
            group: case.group,
            max_error: worst,
            tolerance: case.group.tolerance(),
        });
    }
    Ok(reports)
}

pub fn format_table(reports: &[CaseReport]) -> String {
    let mut out = String::new();
    writeln!(out, "{:<16} {:<10} {:>12} {:>8}  status", "case", "group", "max_rel_err", "tol").unwrap();
    for r in reports {
        let group = match r.group {
            Group::Primitive => "primitive",
            Group::Loss => "loss",
        };
        let status = if r.passed() { "ok" } else { "FAIL" };
        writeln!(out, "{:<16} {:<10} {:>12.3e} {:>8.0e}  {status}", r.name, group, r.max_error, r.tolerance).unwrap();
    }
    out
}
