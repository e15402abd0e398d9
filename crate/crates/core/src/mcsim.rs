//! Geometric Monte Carlo model of online distillation.
//!
//! Distributions are 2D points, a supervision is a linear pull of size
//! `lr·(target − point)`, the student ensemble is the centroid of the
//! student points and the teacher follows the students by EMA. Each trial
//! draws a fresh world; curves report the mean teacher-to-`P*` distance per
//! epoch.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::rng_for;
use crate::error::{Error, Result};

/// Number of peers in the geometric model.
pub const SIM_PEERS: usize = 3;

const TRIAL_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

#[allow(clippy::should_implement_trait)]
impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn add(self, o: Point2) -> Point2 {
        Point2::new(self.x + o.x, self.y + o.y)
    }

    pub fn sub(self, o: Point2) -> Point2 {
        Point2::new(self.x - o.x, self.y - o.y)
    }

    pub fn scale(self, k: f64) -> Point2 {
        Point2::new(k * self.x, k * self.y)
    }

    pub fn dist(self, o: Point2) -> f64 {
        (self.x - o.x).hypot(self.y - o.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn centroid(points: &[Point2]) -> Point2 {
        let sum = points.iter().fold(Point2::default(), |a, &p| a.add(p));
        sum.scale(1.0 / points.len() as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimMethod {
    Pcl,
    Dk,
    Dkel,
}

impl SimMethod {
    pub const ALL: [SimMethod; 3] = [SimMethod::Pcl, SimMethod::Dk, SimMethod::Dkel];

    pub fn name(self) -> &'static str {
        match self {
            SimMethod::Pcl => "pcl",
            SimMethod::Dk => "dk",
            SimMethod::Dkel => "dkel",
        }
    }

    /// PCL starts from random teachers; DK and DKEL from the decoupled
    /// one-step init.
    pub fn init_scheme(self) -> InitScheme {
        match self {
            SimMethod::Pcl => InitScheme::Random,
            SimMethod::Dk | SimMethod::Dkel => InitScheme::Decoupled,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitScheme {
    Random,
    Decoupled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapReport {
    /// Teacher peer 0 only.
    Peer0,
    /// Mean over all teacher peers.
    AllPeers,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub trials: usize,
    pub epochs: usize,
    pub lr: f64,
    pub eta: f64,
    /// Exponential decay rate of ω over the simulation epoch index.
    pub gamma: f64,
    pub methods: Vec<SimMethod>,
    pub seed: u64,
    /// x offset of the `P*` sampling square from the unit square holding the
    /// initial network points.
    pub init_offset: f64,
    /// GT is drawn uniformly from the disk of this radius around `P*`.
    pub gt_radius: f64,
    pub report: GapReport,
    /// Fixed ω for every epoch instead of the exponential schedule.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub omega_override: Option<f64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            trials: 10_000,
            epochs: 90,
            lr: 0.1,
            eta: 0.5,
            gamma: 0.05,
            methods: SimMethod::ALL.to_vec(),
            seed: 0,
            init_offset: 4.0,
            gt_radius: 0.05,
            report: GapReport::Peer0,
            omega_override: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.trials == 0 || self.epochs == 0 {
            return bad("sim.trials and sim.epochs must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.lr) {
            return bad(format!("sim.lr must lie in [0, 1], got {}", self.lr));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return bad(format!("sim.eta must lie in (0, 1), got {}", self.eta));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("sim.gamma must be non-negative, got {}", self.gamma));
        }
        if !(self.gt_radius >= 0.0) || !self.init_offset.is_finite() {
            return bad("sim.gt_radius must be non-negative and sim.init_offset finite".into());
        }
        if let Some(w) = self.omega_override {
            if !(0.0..=1.0).contains(&w) {
                return bad(format!("sim.omega_override must lie in [0, 1], got {w}"));
            }
        }
        if self.methods.is_empty() {
            return bad("sim.methods is empty".into());
        }
        Ok(())
    }

    pub fn omega(&self, epoch: usize) -> f64 {
        self.omega_override.unwrap_or_else(|| (-self.gamma * epoch as f64).exp())
    }
}

/// State of one trial.
#[derive(Clone, Debug, PartialEq)]
pub struct SimWorld {
    pub p_star: Point2,
    pub gt: Point2,
    pub s: [Point2; SIM_PEERS],
    pub t: [Point2; SIM_PEERS],
    pub lr: f64,
    pub eta: f64,
    pub epoch: usize,
}

impl SimWorld {
    pub fn teacher_gap(&self, report: GapReport) -> f64 {
        match report {
            GapReport::Peer0 => self.t[0].dist(self.p_star),
            GapReport::AllPeers => self.t.iter().map(|t| t.dist(self.p_star)).sum::<f64>() / SIM_PEERS as f64,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.p_star.is_finite() && self.gt.is_finite() && self.s.iter().chain(&self.t).all(|p| p.is_finite())
    }
}

/// One supervision's pull on `from`.
pub fn displacement(from: Point2, toward: Point2, lr: f64) -> Point2 {
    toward.sub(from).scale(lr)
}

/// Vector-summed update of student peer `p`, from the current world.
pub fn step_student_peer(world: &SimWorld, p: usize, method: SimMethod, omega: f64) -> Point2 {
    let s = world.s[p];
    let lr = world.lr;
    let ensemble = Point2::centroid(&world.s);
    let mut d = displacement(s, world.gt, lr).add(displacement(s, ensemble, lr));

    let others: Vec<Point2> = (0..SIM_PEERS).filter(|&j| j != p).map(|j| world.t[j]).collect();
    let each = others.iter().fold(Point2::default(), |a, &t| a.add(displacement(s, t, lr)));
    let teacher_pull = match method {
        SimMethod::Pcl | SimMethod::Dk => each,
        SimMethod::Dkel => {
            let mean = displacement(s, Point2::centroid(&others), lr);
            mean.scale(omega).add(each.scale(1.0 - omega))
        }
    };
    d = d.add(teacher_pull);
    s.add(d)
}

/// EMA move of teacher peer `p` toward the updated student point.
pub fn step_teacher_peer(world: &SimWorld, p: usize, s_prime: Point2) -> Point2 {
    s_prime.scale(world.eta).add(world.t[p].scale(1.0 - world.eta))
}

/// One synchronous epoch: every student moves from the same snapshot, then
/// every teacher follows its student.
pub fn step_world(world: &mut SimWorld, method: SimMethod, omega: f64) {
    let next: [Point2; SIM_PEERS] = std::array::from_fn(|p| step_student_peer(world, p, method, omega));
    for (p, &s) in next.iter().enumerate() {
        world.t[p] = step_teacher_peer(world, p, s);
    }
    world.s = next;
    world.epoch += 1;
}

fn unit_square(rng: &mut impl Rng) -> Point2 {
    Point2::new(rng.random::<f64>(), rng.random::<f64>())
}

/// Samples one world. The shared points are drawn first so that every method
/// sees the same `P*`, GT and students for a given RNG state.
pub fn init_trial(cfg: &SimConfig, scheme: InitScheme, rng: &mut impl Rng) -> SimWorld {
    let p_star = unit_square(rng).add(Point2::new(cfg.init_offset, 0.0));
    let radius = cfg.gt_radius * rng.random::<f64>().sqrt();
    let angle = std::f64::consts::TAU * rng.random::<f64>();
    let gt = p_star.add(Point2::new(radius * angle.cos(), radius * angle.sin()));
    let s: [Point2; SIM_PEERS] = std::array::from_fn(|_| unit_square(rng));
    let random_t: [Point2; SIM_PEERS] = std::array::from_fn(|_| unit_square(rng));
    let t = match scheme {
        InitScheme::Random => random_t,
        InitScheme::Decoupled => std::array::from_fn(|p| s[p].add(displacement(s[p], gt, cfg.lr))),
    };
    SimWorld {
        p_star,
        gt,
        s,
        t,
        lr: cfg.lr,
        eta: cfg.eta,
        epoch: 0,
    }
}

/// Teacher gaps of one trial after each epoch.
pub fn run_trial(cfg: &SimConfig, method: SimMethod, trial: u64) -> Vec<f64> {
    let mut rng = rng_for(cfg.seed, &[trial]);
    let mut world = init_trial(cfg, method.init_scheme(), &mut rng);
    (0..cfg.epochs)
        .map(|e| {
            step_world(&mut world, method, cfg.omega(e));
            world.teacher_gap(cfg.report)
        })
        .collect()
}

/// Per-epoch mean teacher gap over trials.
#[derive(Clone, Debug, PartialEq)]
pub struct GapCurve {
    pub method: SimMethod,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
}

impl GapCurve {
    /// First epoch (1-based) after which the curve stays within `tol`
    /// (relative) of its final value.
    pub fn settling_epoch(&self, tol: f64) -> usize {
        let last = *self.mean.last().expect("non-empty curve");
        let band = tol * last.abs();
        let mut settle = self.mean.len();
        for (i, &v) in self.mean.iter().enumerate().rev() {
            if (v - last).abs() > band {
                break;
            }
            settle = i + 1;
        }
        settle
    }
}

/// Runs every configured method. Trials are processed in fixed-size chunks
/// on the current rayon pool and reduced in trial order, so the result is
/// bit-identical for any number of workers.
pub fn run_simulation(cfg: &SimConfig) -> Result<Vec<GapCurve>> {
    cfg.validate()?;
    let mut curves = Vec::with_capacity(cfg.methods.len());
    for &method in &cfg.methods {
        let chunks: Vec<(Vec<f64>, Vec<f64>)> = (0..cfg.trials.div_ceil(TRIAL_CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut sum = vec![0.0; cfg.epochs];
                let mut sq = vec![0.0; cfg.epochs];
                for trial in c * TRIAL_CHUNK..((c + 1) * TRIAL_CHUNK).min(cfg.trials) {
                    for (e, g) in run_trial(cfg, method, trial as u64).into_iter().enumerate() {
                        sum[e] += g;
                        sq[e] += g * g;
                    }
                }
                (sum, sq)
            })
            .collect();
        let mut sum = vec![0.0; cfg.epochs];
        let mut sq = vec![0.0; cfg.epochs];
        for (cs, cq) in &chunks {
            for e in 0..cfg.epochs {
                sum[e] += cs[e];
                sq[e] += cq[e];
            }
        }
        let n = cfg.trials as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let stderr = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                if cfg.trials < 2 {
                    return 0.0;
                }
                let var = ((q - n * m * m) / (n - 1.0)).max(0.0);
                (var / n).sqrt()
            })
            .collect();
        curves.push(GapCurve { method, mean, stderr });
    }
    Ok(curves)
}

pub const GAP_COLUMNS: [&str; 4] = ["epoch", "method", "mean_gap", "stderr"];

pub fn write_gap_csv<W: Write>(mut w: W, curves: &[GapCurve]) -> Result<()> {
    writeln!(w, "{}", GAP_COLUMNS.join(","))?;
    for c in curves {
        for (e, (m, s)) in c.mean.iter().zip(&c.stderr).enumerate() {
            writeln!(w, "{},{},{},{}", e + 1, c.method.name(), m, s)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world(lr: f64) -> SimWorld {
        SimWorld {
            p_star: Point2::new(1.0, 0.0),
            gt: Point2::new(1.0, 0.0),
            s: [Point2::new(0.0, 0.0), Point2::new(0.3, 0.0), Point2::new(0.6, 0.0)],
            t: [Point2::new(0.0, 0.0), Point2::new(0.6, 0.0), Point2::new(0.9, 0.0)],
            lr,
            eta: 0.5,
            epoch: 0,
        }
    }

    fn quick(trials: usize) -> SimConfig {
        SimConfig {
            trials,
            epochs: 30,
            ..Default::default()
        }
    }

    #[test]
    fn displacement_cases() {
        let a = Point2::new(0.2, 0.7);
        assert_eq!(displacement(a, a, 0.1), Point2::default());
        let b = Point2::new(3.0, -1.0);
        assert_eq!(a.add(displacement(a, b, 1.0)), b);
        assert_eq!(displacement(Point2::default(), Point2::new(1.0, 0.0), 0.1), Point2::new(0.1, 0.0));
    }

    #[test]
    fn collinear_hand_layout() {
        // peer 0 at 0: GT pull 0.1, E = 0.3 pull 0.03, teachers 0.6 and 0.9 pull 0.06 + 0.09
        let w = world(0.1);
        let dk = step_student_peer(&w, 0, SimMethod::Dk, 0.0);
        assert!((dk.x - 0.28).abs() < 1e-15 && dk.y == 0.0);
        // ω=1: single pull toward teacher centroid 0.75 → 0.075
        let dkel = step_student_peer(&w, 0, SimMethod::Dkel, 1.0);
        assert!((dkel.x - 0.205).abs() < 1e-15);
        let half = step_student_peer(&w, 0, SimMethod::Dkel, 0.5);
        assert!((half.x - (0.13 + 0.5 * 0.075 + 0.5 * 0.15)).abs() < 1e-15);
    }

    #[test]
    fn dkel_at_zero_omega_is_dk() {
        let w = world(0.1);
        for p in 0..SIM_PEERS {
            assert_eq!(
                step_student_peer(&w, p, SimMethod::Dkel, 0.0),
                step_student_peer(&w, p, SimMethod::Dk, 0.0)
            );
        }
    }

    #[test]
    fn global_fixed_point() {
        let c = Point2::new(0.4, 0.4);
        let w = SimWorld {
            p_star: c,
            gt: c,
            s: [c; 3],
            t: [c; 3],
            lr: 0.1,
            eta: 0.5,
            epoch: 0,
        };
        for m in SimMethod::ALL {
            assert_eq!(step_student_peer(&w, 1, m, 0.3), c);
        }
    }

    #[test]
    fn teacher_step_cases() {
        let mut w = world(0.1);
        w.t[0] = Point2::default();
        assert_eq!(step_teacher_peer(&w, 0, Point2::new(2.0, 0.0)), Point2::new(1.0, 0.0));
        assert_eq!(step_teacher_peer(&w, 1, w.t[1]), w.t[1]);
        // frozen target: distance shrinks by (1−η) each step
        let target = Point2::new(2.0, 1.0);
        let d0 = w.t[0].dist(target);
        for k in 1..=10 {
            w.t[0] = step_teacher_peer(&w, 0, target);
            assert!((w.t[0].dist(target) - d0 * 0.5f64.powi(k)).abs() < 1e-14);
        }
    }

    #[test]
    fn decoupled_init_with_zero_lr_copies_students() {
        let cfg = SimConfig { lr: 0.0, ..Default::default() };
        let w = init_trial(&cfg, InitScheme::Decoupled, &mut rng_for(1, &[0]));
        assert_eq!(w.s, w.t);
        let again = init_trial(&cfg, InitScheme::Decoupled, &mut rng_for(1, &[0]));
        assert_eq!(w, again);
    }

    #[test]
    fn zero_lr_decoupled_curves_are_flat() {
        let cfg = SimConfig {
            lr: 0.0,
            methods: vec![SimMethod::Dk, SimMethod::Dkel],
            ..quick(200)
        };
        for c in run_simulation(&cfg).unwrap() {
            assert!(c.mean.iter().all(|&m| m == c.mean[0]), "{:?}", c.method);
        }
    }

    #[test]
    fn gt_equal_p_star_converges() {
        let cfg = SimConfig {
            gt_radius: 0.0,
            epochs: 400,
            trials: 50,
            ..Default::default()
        };
        for c in run_simulation(&cfg).unwrap() {
            assert!(*c.mean.last().unwrap() < 1e-6, "{:?} {}", c.method, c.mean.last().unwrap());
        }
    }

    #[test]
    fn dkel_with_zero_omega_reproduces_dk_exactly() {
        let base = SimConfig {
            omega_override: Some(0.0),
            ..quick(300)
        };
        let dk = run_simulation(&SimConfig { methods: vec![SimMethod::Dk], ..base.clone() }).unwrap();
        let dkel = run_simulation(&SimConfig { methods: vec![SimMethod::Dkel], ..base }).unwrap();
        assert_eq!(dk[0].mean, dkel[0].mean);
        assert_eq!(dk[0].stderr, dkel[0].stderr);
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let cfg = quick(1000);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let many = rayon::ThreadPoolBuilder::new().num_threads(8).build().unwrap();
        let a = one.install(|| run_simulation(&cfg)).unwrap();
        let b = many.install(|| run_simulation(&cfg)).unwrap();
        assert_eq!(a, b);
    }

    fn angle_at(s: Point2, a: Point2, b: Point2) -> Option<f64> {
        let (u, v) = (a.sub(s), b.sub(s));
        let nu = u.x.hypot(u.y);
        let nv = v.x.hypot(v.y);
        if nu == 0.0 || nv == 0.0 {
            return None;
        }
        Some(((u.x * v.x + u.y * v.y) / (nu * nv)).clamp(-1.0, 1.0).acos())
    }

    #[test]
    fn decoupled_init_reduces_teacher_angle() {
        let cfg = SimConfig::default();
        let n = 10_000;
        let stats = |scheme: InitScheme| {
            let mut v = Vec::with_capacity(n);
            for trial in 0..n as u64 {
                let w = init_trial(&cfg, scheme, &mut rng_for(7, &[trial]));
                if let Some(a) = angle_at(w.s[0], w.t[1], w.p_star) {
                    v.push(a);
                }
            }
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
            (m, (var / v.len() as f64).sqrt())
        };
        let (md, sd) = stats(InitScheme::Decoupled);
        let (mr, sr) = stats(InitScheme::Random);
        // 99.9% one-sided bound on the difference
        assert!(mr - md > 3.1 * (sd * sd + sr * sr).sqrt(), "random {mr}±{sr} decoupled {md}±{sd}");
    }

    #[test]
    fn settling_epoch_definition() {
        let c = GapCurve {
            method: SimMethod::Pcl,
            mean: vec![10.0, 5.0, 1.2, 1.04, 1.0, 1.0],
            stderr: vec![0.0; 6],
        };
        assert_eq!(c.settling_epoch(0.05), 4);
        assert_eq!(c.settling_epoch(0.0), 5);
    }

    #[test]
    fn csv_layout() {
        let c = GapCurve {
            method: SimMethod::Dkel,
            mean: vec![1.5, 0.25],
            stderr: vec![0.1, 0.0],
        };
        let mut buf = Vec::new();
        write_gap_csv(&mut buf, &[c]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,method,mean_gap,stderr\n1,dkel,1.5,0.1\n2,dkel,0.25,0\n"
        );
    }

    #[test]
    fn invalid_configs() {
        assert!(SimConfig { eta: 1.0, ..Default::default() }.validate().is_err());
        assert!(SimConfig { trials: 0, ..Default::default() }.validate().is_err());
        assert!(SimConfig { omega_override: Some(2.0), ..Default::default() }.validate().is_err());
    }
}
