//! Distillation objectives for PCL and DKEL, and the decay schedules that
//! weight the ensemble-knowledge term.
//!
//! Student logits are tape variables. Every distillation target (teacher
//! peers, the teacher ensemble, the student's own peer ensemble) enters as a
//! plain [`Tensor`], so no gradient can reach it.

use serde::{Deserialize, Serialize};

use crate::autodiff::{log_softmax_rows, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Shape of the decay applied to the ensemble-knowledge weight ω(e).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayFamily {
    Exponential,
    Cosine,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillSchedule {
    pub family: DecayFamily,
    /// Decay rate, used by the exponential family only.
    pub gamma: f64,
    pub epoch_max: usize,
}

impl DistillSchedule {
    pub fn new(family: DecayFamily, gamma: f64, epoch_max: usize) -> Result<Self> {
        if family == DecayFamily::Exponential && !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::Parameter(format!("gamma must be positive, got {gamma}")));
        }
        if epoch_max == 0 {
            return Err(Error::Parameter("epoch_max must be positive".into()));
        }
        Ok(Self {
            family,
            gamma,
            epoch_max,
        })
    }

    pub fn exponential(gamma: f64, epoch_max: usize) -> Result<Self> {
        Self::new(DecayFamily::Exponential, gamma, epoch_max)
    }

    /// ω(e) for `0 ≤ e ≤ epoch_max`.
    pub fn weight(&self, epoch: usize) -> Result<f64> {
        decay_weight(self, epoch)
    }
}

pub fn decay_weight(schedule: &DistillSchedule, epoch: usize) -> Result<f64> {
    if epoch > schedule.epoch_max {
        return Err(Error::Parameter(format!(
            "epoch {epoch} is outside [0, {}]",
            schedule.epoch_max
        )));
    }
    let e = epoch as f64;
    let max = schedule.epoch_max as f64;
    Ok(match schedule.family {
        DecayFamily::Exponential => (-schedule.gamma * e).exp(),
        DecayFamily::Cosine => 0.5 * (std::f64::consts::PI * e / max).cos() + 0.5,
        DecayFamily::Linear => 1.0 - e / max,
    })
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// Temperature-scaled distillation loss `τ²/N · Σᵢ KL(σ(tᵢ/τ) ‖ σ(sᵢ/τ))`.
///
/// `teacher` is the reference distribution and is held constant.
pub fn kd_loss(tape: &mut Tape, student: Var, teacher: &Tensor, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let s_shape = tape.value(student).shape();
    if s_shape != teacher.shape() {
        return Err(Error::shape("kd_loss", s_shape, teacher.shape()));
    }
    let n = tape.value(student).rows() as f64;
    // log p and log q go through the same routine so kd_loss(x, x) is exactly 0
    let log_p = log_softmax_rows(teacher, tau);
    let p = log_p.map(f64::exp);
    let log_q = tape.log_softmax_t(student, tau)?;
    let log_p = tape.constant(log_p);
    let p = tape.constant(p);
    let diff = tape.sub(log_p, log_q)?;
    let weighted = tape.mul(p, diff)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, tau * tau / n))
}

/// Mean cross entropy `−1/N Σᵢ log σ(xᵢ)[yᵢ]`.
pub fn ce_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, c) = (tape.value(logits).rows(), tape.value(logits).cols());
    if labels.len() != n {
        return Err(Error::Data(format!("{} labels for {n} rows", labels.len())));
    }
    let mut onehot = Tensor::zeros(tape.value(logits).shape());
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Data(format!("label {y} out of range for {c} classes")));
        }
        onehot.data_mut()[i * c + y] = 1.0;
    }
    let log_q = tape.log_softmax_t(logits, 1.0)?;
    let mask = tape.constant(onehot);
    let picked = tape.mul(mask, log_q)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0 / n as f64))
}

/// Peer-ensemble loss: each peer distils from the (detached) ensemble logits.
pub fn pe_loss(tape: &mut Tape, peers: &[Var], ensemble: Var, tau: f64) -> Result<Vec<Var>> {
    let target = tape.value(ensemble).clone();
    peers.iter().map(|&p| kd_loss(tape, p, &target, tau)).collect()
}

fn mean_kd(tape: &mut Tape, student: Var, teachers: &[&Tensor], tau: f64) -> Result<Var> {
    if teachers.is_empty() {
        return Err(Error::Config(
            "peer distillation needs at least one other teacher peer (m >= 2)".into(),
        ));
    }
    let mut acc: Option<Var> = None;
    for t in teachers {
        let term = kd_loss(tape, student, t, tau)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    let sum = acc.expect("non-empty");
    Ok(tape.scale(sum, 1.0 / teachers.len() as f64))
}

/// PCL's peer-mean-teacher loss: mean distillation from each of the other
/// teacher peers of the coupled temporal-mean teacher.
pub fn pm_loss(tape: &mut Tape, student: Var, others: &[&Tensor], tau: f64) -> Result<Var> {
    mean_kd(tape, student, others, tau)
}

/// Decoupled-knowledge loss. Same map as [`pm_loss`]; `others` come from the
/// decoupled teacher network.
pub fn dk_loss(tape: &mut Tape, student: Var, others: &[&Tensor], tau: f64) -> Result<Var> {
    mean_kd(tape, student, others, tau)
}

/// Mean of the teacher logits over every peer except `exclude`.
pub fn teacher_ensemble(teachers: &[Tensor], exclude: usize) -> Result<Tensor> {
    let m = teachers.len();
    if m < 2 {
        return Err(Error::Config(format!("teacher ensemble needs m >= 2 peers, got {m}")));
    }
    if exclude >= m {
        return Err(Error::Parameter(format!("peer index {exclude} out of range for {m} peers")));
    }
    let shape = teachers[0].shape();
    let mut acc = Tensor::zeros(shape);
    for (j, t) in teachers.iter().enumerate() {
        if t.shape() != shape {
            return Err(Error::shape("teacher_ensemble", shape, t.shape()));
        }
        if j != exclude {
            acc.add_assign(t);
        }
    }
    Ok(acc.scale(1.0 / (m - 1) as f64))
}

/// Ensemble-knowledge loss against the j≠p teacher mean.
pub fn ek_loss(tape: &mut Tape, student: Var, teachers: &[Tensor], p: usize, tau: f64) -> Result<Var> {
    let target = teacher_ensemble(teachers, p)?;
    kd_loss(tape, student, &target, tau)
}

/// Student-side outputs for one batch: logits of every peer plus the
/// ensemble head.
#[derive(Clone, Debug)]
pub struct PeerOutputs {
    pub peers: Vec<Var>,
    pub ensemble: Var,
}

/// Which distillation terms enter the objective, on top of the cross-entropy
/// terms that are always present.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermSet {
    #[serde(default)]
    pub pe: bool,
    #[serde(default)]
    pub pm: bool,
    #[serde(default)]
    pub dk: bool,
    #[serde(default)]
    pub ek: bool,
}

impl TermSet {
    pub const DKEL: TermSet = TermSet { pe: true, pm: false, dk: true, ek: true };
    pub const PCL: TermSet = TermSet { pe: true, pm: true, dk: false, ek: false };
    pub const INDEPENDENT: TermSet = TermSet { pe: false, pm: false, dk: false, ek: false };

    pub fn uses_teacher(&self) -> bool {
        self.pm || self.dk || self.ek
    }

    /// Weights `(dk, ek)` at decay value `omega`. Alone, L_dk takes full
    /// weight and L_ek takes ω; together they split as (1−ω, ω).
    pub fn distill_weights(&self, omega: f64) -> (f64, f64) {
        match (self.dk, self.ek) {
            (true, true) => (1.0 - omega, omega),
            (true, false) => (1.0, 0.0),
            (false, true) => (0.0, omega),
            (false, false) => (0.0, 0.0),
        }
    }
}

/// Scalar values of every loss term for one batch.
///
/// Terms that are not part of the objective are left empty. For PCL the
/// peer-mean-teacher values are stored in `dk_per_peer`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub ce_per_peer: Vec<f64>,
    pub pe_per_peer: Vec<f64>,
    pub dk_per_peer: Vec<f64>,
    pub ek_per_peer: Vec<f64>,
    pub ce_ensemble: f64,
    pub omega: f64,
    pub dk_weight: f64,
    pub ek_weight: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Recomputes the objective from the stored parts.
    pub fn recombine(&self) -> f64 {
        let at = |v: &[f64], p: usize| v.get(p).copied().unwrap_or(0.0);
        let mut total = 0.0;
        for p in 0..self.ce_per_peer.len() {
            total += at(&self.ce_per_peer, p)
                + at(&self.pe_per_peer, p)
                + self.ek_weight * at(&self.ek_per_peer, p)
                + self.dk_weight * at(&self.dk_per_peer, p);
        }
        total + self.ce_ensemble
    }
}

/// Builds the student objective for one batch.
///
/// `teacher_logits[j]` are the teacher's peer-`j` logits on view `j`. Each
/// student peer `p` is distilled from the teacher peers `j ≠ p`.
pub fn objective(
    tape: &mut Tape,
    outputs: &PeerOutputs,
    teacher_logits: &[Tensor],
    labels: &[usize],
    terms: TermSet,
    omega: f64,
    tau: f64,
) -> Result<(Var, LossBreakdown)> {
    let m = outputs.peers.len();
    if m < 2 {
        return Err(Error::Config(format!("need at least 2 peers, got {m}")));
    }
    if terms.uses_teacher() && teacher_logits.len() != m {
        return Err(Error::Config(format!(
            "{m} student peers but {} teacher peers",
            teacher_logits.len()
        )));
    }
    if terms.pm && (terms.dk || terms.ek) {
        return Err(Error::Config("pm (coupled) and dk/ek (decoupled) terms are exclusive".into()));
    }
    if !(0.0..=1.0).contains(&omega) {
        return Err(Error::Parameter(format!("omega must lie in [0, 1], got {omega}")));
    }
    let (dk_w, ek_w) = if terms.pm { (1.0, 0.0) } else { terms.distill_weights(omega) };

    let mut bd = LossBreakdown {
        omega,
        dk_weight: dk_w,
        ek_weight: ek_w,
        ..Default::default()
    };
    let mut parts: Vec<Var> = Vec::new();

    let pe = if terms.pe {
        pe_loss(tape, &outputs.peers, outputs.ensemble, tau)?
    } else {
        Vec::new()
    };

    for (p, &s) in outputs.peers.iter().enumerate() {
        let ce = ce_loss(tape, s, labels)?;
        bd.ce_per_peer.push(tape.value(ce).item());
        parts.push(ce);

        if let Some(&pe_p) = pe.get(p) {
            bd.pe_per_peer.push(tape.value(pe_p).item());
            parts.push(pe_p);
        }

        if terms.pm || terms.dk {
            let others: Vec<&Tensor> = teacher_logits
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != p)
                .map(|(_, t)| t)
                .collect();
            let dk = if terms.pm {
                pm_loss(tape, s, &others, tau)?
            } else {
                dk_loss(tape, s, &others, tau)?
            };
            bd.dk_per_peer.push(tape.value(dk).item());
            parts.push(tape.scale(dk, dk_w));
        }

        if terms.ek {
            let ek = ek_loss(tape, s, teacher_logits, p, tau)?;
            bd.ek_per_peer.push(tape.value(ek).item());
            parts.push(tape.scale(ek, ek_w));
        }
    }

    let ce_e = ce_loss(tape, outputs.ensemble, labels)?;
    bd.ce_ensemble = tape.value(ce_e).item();
    parts.push(ce_e);

    let mut total = parts[0];
    for &part in &parts[1..] {
        total = tape.add(total, part)?;
    }
    bd.total = tape.value(total).item();
    Ok((total, bd))
}

/// `Σₚ[L_ce + L_pe + ω·L_ek + (1−ω)·L_dk] + L_ce^E` with ω = ω(e).
#[allow(clippy::too_many_arguments)]
pub fn dkel_total(
    tape: &mut Tape,
    outputs: &PeerOutputs,
    teacher_logits: &[Tensor],
    labels: &[usize],
    schedule: &DistillSchedule,
    epoch: usize,
    tau: f64,
) -> Result<(Var, LossBreakdown)> {
    let omega = decay_weight(schedule, epoch)?;
    objective(tape, outputs, teacher_logits, labels, TermSet::DKEL, omega, tau)
}

/// `Σₚ(L_ce + L_pe + L_pm) + L_ce^E`.
pub fn pcl_total(
    tape: &mut Tape,
    outputs: &PeerOutputs,
    coupled_teacher_logits: &[Tensor],
    labels: &[usize],
    tau: f64,
) -> Result<(Var, LossBreakdown)> {
    objective(tape, outputs, coupled_teacher_logits, labels, TermSet::PCL, 0.0, tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
    }

    /// Scalar-loop KL(p‖q) averaged over rows, with softmax at temperature τ.
    fn kl_oracle(s: &Tensor, t: &Tensor, tau: f64) -> f64 {
        let soft = |row: &[f64]| -> Vec<f64> {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| ((v - m) / tau).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect()
        };
        let mut total = 0.0;
        for i in 0..s.rows() {
            let p = soft(t.row(i));
            let q = soft(s.row(i));
            for k in 0..p.len() {
                total += p[k] * (p[k] / q[k]).ln();
            }
        }
        total / s.rows() as f64
    }

    fn ce_oracle(x: &Tensor, labels: &[usize]) -> f64 {
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = x.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            total += -(row[y] - m - z.ln());
        }
        total / labels.len() as f64
    }

    fn kd_value(s: &Tensor, t: &Tensor, tau: f64) -> f64 {
        let mut tape = Tape::new();
        let sv = tape.param(s.clone());
        let l = kd_loss(&mut tape, sv, t, tau).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn kd_loss_is_zero_on_identical_logits() {
        let x = Tensor::from_rows(&[[0.3, -1.2, 4.0]]).unwrap();
        assert_eq!(kd_value(&x, &x, 3.0), 0.0);
    }

    #[test]
    fn kd_loss_hand_example() {
        // KL(σ([1,0]) ‖ σ([0,1])) = (2σ(1) − 1)·1 = tanh(1/2) = 0.46211715726000974
        let s = Tensor::from_rows(&[[0.0, 1.0]]).unwrap();
        let t = Tensor::from_rows(&[[1.0, 0.0]]).unwrap();
        assert!((kd_value(&s, &t, 1.0) - 0.462_117_157_260_009_7).abs() < 1e-14);
    }

    #[test]
    fn kd_loss_tau_squared_scaling_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random(&[4, 5], &mut rng, 3.0);
        let t = random(&[4, 5], &mut rng, 3.0);
        let loss = kd_value(&s, &t, 2.0);
        assert!((loss - 4.0 * kl_oracle(&s, &t, 2.0)).abs() < 1e-12);
    }

    #[test]
    fn kd_loss_errors() {
        let mut tape = Tape::new();
        let s = tape.param(Tensor::zeros(&[2, 3]));
        assert!(matches!(kd_loss(&mut tape, s, &Tensor::zeros(&[2, 2]), 1.0), Err(Error::Shape { .. })));
        assert!(matches!(kd_loss(&mut tape, s, &Tensor::zeros(&[2, 3]), 0.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn ce_loss_cases() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_rows(&[[0.0, 0.0]]).unwrap());
        let l = ce_loss(&mut tape, x, &[0]).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);

        let x = tape.param(Tensor::from_rows(&[[1000.0, 0.0]]).unwrap());
        let l = ce_loss(&mut tape, x, &[0]).unwrap();
        assert!(tape.value(l).item().abs() < 1e-300 || tape.value(l).item() == 0.0);
        assert!(tape.value(l).is_finite());

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[6, 4], &mut rng, 5.0);
        let labels = [0, 3, 1, 2, 2, 0];
        let xv = tape.param(x.clone());
        let l = ce_loss(&mut tape, xv, &labels).unwrap();
        assert!((tape.value(l).item() - ce_oracle(&x, &labels)).abs() < 1e-10);

        assert!(matches!(ce_loss(&mut tape, xv, &[0, 3, 1, 2, 2, 4]), Err(Error::Data(_))));
    }

    #[test]
    fn pe_loss_terms_and_stop_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = random(&[3, 4], &mut rng, 2.0);
        let b = random(&[3, 4], &mut rng, 2.0);
        let e = random(&[3, 4], &mut rng, 2.0);

        let mut tape = Tape::new();
        let (va, vb, ve) = (tape.param(a.clone()), tape.param(b.clone()), tape.param(e.clone()));
        let terms = pe_loss(&mut tape, &[va, vb], ve, 3.0).unwrap();
        assert!((tape.value(terms[0]).item() - kd_value(&a, &e, 3.0)).abs() < 1e-15);
        assert!((tape.value(terms[1]).item() - kd_value(&b, &e, 3.0)).abs() < 1e-15);

        let sum = tape.add(terms[0], terms[1]).unwrap();
        tape.backward(sum).unwrap();
        assert!(tape.grad(va).is_some());
        assert!(tape.grad(ve).is_none());

        let mut tape = Tape::new();
        let ve = tape.param(e.clone());
        let vs = tape.param(e.clone());
        let terms = pe_loss(&mut tape, &[vs, vs], ve, 3.0).unwrap();
        assert!(terms.iter().all(|&t| tape.value(t).item() == 0.0));
    }

    #[test]
    fn pm_loss_means_pairwise_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let s = random(&[2, 3], &mut rng, 2.0);
        let t1 = random(&[2, 3], &mut rng, 2.0);
        let t2 = random(&[2, 3], &mut rng, 2.0);
        let mut tape = Tape::new();
        let sv = tape.param(s.clone());

        let l = pm_loss(&mut tape, sv, &[&t1, &t2], 3.0).unwrap();
        let expected = 0.5 * (kd_value(&s, &t1, 3.0) + kd_value(&s, &t2, 3.0));
        assert!((tape.value(l).item() - expected).abs() < 1e-14);

        let l = dk_loss(&mut tape, sv, &[&t1], 3.0).unwrap();
        assert_eq!(tape.value(l).item(), kd_value(&s, &t1, 3.0));

        let l = pm_loss(&mut tape, sv, &[&s, &s], 3.0).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        assert!(matches!(pm_loss(&mut tape, sv, &[], 3.0), Err(Error::Config(_))));
    }

    #[test]
    fn teacher_ensemble_cases() {
        let t0 = Tensor::vector(vec![9.0, 9.0]);
        let t1 = Tensor::vector(vec![1.0, 0.0]);
        let t2 = Tensor::vector(vec![3.0, 2.0]);
        let e = teacher_ensemble(&[t0.clone(), t1.clone(), t2.clone()], 0).unwrap();
        assert_eq!(e.data(), &[2.0, 1.0]);

        let same = teacher_ensemble(&[t1.clone(), t1.clone(), t1.clone()], 2).unwrap();
        assert_eq!(same, t1);

        assert_eq!(teacher_ensemble(&[t0.clone(), t2.clone()], 0).unwrap(), t2);
        assert!(matches!(teacher_ensemble(std::slice::from_ref(&t0), 0), Err(Error::Config(_))));
        assert!(matches!(teacher_ensemble(&[t0, t1], 2), Err(Error::Parameter(_))));
    }

    #[test]
    fn ek_loss_against_hand_mean() {
        let s = Tensor::from_rows(&[[0.5, -0.5, 1.0]]).unwrap();
        let t = vec![
            Tensor::from_rows(&[[5.0, 5.0, 5.0]]).unwrap(),
            Tensor::from_rows(&[[1.0, 0.0, 2.0]]).unwrap(),
            Tensor::from_rows(&[[0.0, -1.0, 0.0]]).unwrap(),
        ];
        let mean = Tensor::from_rows(&[[0.5, -0.5, 1.0]]).unwrap();
        let mut tape = Tape::new();
        let sv = tape.param(s.clone());
        let l = ek_loss(&mut tape, sv, &t, 0, 3.0).unwrap();
        assert_eq!(tape.value(l).item(), kd_value(&s, &mean, 3.0));
        assert_eq!(tape.value(l).item(), 0.0);

        let l1 = ek_loss(&mut tape, sv, &t, 1, 3.0).unwrap();
        let swapped = vec![t[2].clone(), t[1].clone(), t[0].clone()];
        let l2 = ek_loss(&mut tape, sv, &swapped, 1, 3.0).unwrap();
        assert_eq!(tape.value(l1).item(), tape.value(l2).item());
    }

    #[test]
    fn decay_weight_values() {
        let exp = DistillSchedule::exponential(0.5, 100).unwrap();
        assert_eq!(exp.weight(0).unwrap(), 1.0);
        // exp(-1) = 0.36787944117144233
        assert!((exp.weight(2).unwrap() - 0.367_879_441_171_442_33).abs() < 1e-16);

        let cos = DistillSchedule::new(DecayFamily::Cosine, 0.0, 100).unwrap();
        assert_eq!(cos.weight(0).unwrap(), 1.0);
        assert!((cos.weight(50).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(cos.weight(100).unwrap(), 0.0);

        let lin = DistillSchedule::new(DecayFamily::Linear, 0.0, 100).unwrap();
        assert_eq!(lin.weight(0).unwrap(), 1.0);
        assert_eq!(lin.weight(100).unwrap(), 0.0);

        assert!(matches!(lin.weight(101), Err(Error::Parameter(_))));
        assert!(DistillSchedule::exponential(0.0, 10).is_err());
    }

    fn toy_outputs(tape: &mut Tape, rng: &mut ChaCha8Rng, m: usize, n: usize, c: usize) -> PeerOutputs {
        let peers = (0..m).map(|_| tape.param(random(&[n, c], rng, 2.0))).collect();
        let ensemble = tape.param(random(&[n, c], rng, 2.0));
        PeerOutputs { peers, ensemble }
    }

    #[test]
    fn dkel_total_recombines_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut tape = Tape::new();
        let out = toy_outputs(&mut tape, &mut rng, 2, 3, 2);
        let teachers: Vec<Tensor> = (0..2).map(|_| random(&[3, 2], &mut rng, 2.0)).collect();
        let sched = DistillSchedule::exponential(0.5, 10).unwrap();
        let (_, bd) = dkel_total(&mut tape, &out, &teachers, &[0, 1, 1], &sched, 3, 3.0).unwrap();
        assert!((bd.recombine() - bd.total).abs() < 1e-10);

        // independent scalar-loop evaluation of every part
        let omega = (-1.5f64).exp();
        let mut hand = 0.0;
        let labels = [0usize, 1, 1];
        let ens = tape.value(out.ensemble).clone();
        for p in 0..2 {
            let s = tape.value(out.peers[p]).clone();
            let other = &teachers[1 - p];
            hand += ce_oracle(&s, &labels)
                + 9.0 * kl_oracle(&s, &ens, 3.0)
                + omega * 9.0 * kl_oracle(&s, other, 3.0)
                + (1.0 - omega) * 9.0 * kl_oracle(&s, other, 3.0);
        }
        hand += ce_oracle(&ens, &labels);
        assert!((bd.total - hand).abs() < 1e-10, "{} vs {hand}", bd.total);
    }

    #[test]
    fn dkel_total_ignores_dk_at_epoch_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let sched = DistillSchedule::exponential(0.5, 10).unwrap();
        let teachers: Vec<Tensor> = (0..3).map(|_| random(&[4, 3], &mut rng, 2.0)).collect();
        let mut tape = Tape::new();
        let out = toy_outputs(&mut tape, &mut rng, 3, 4, 3);
        let (_, bd) = dkel_total(&mut tape, &out, &teachers, &[0, 1, 2, 0], &sched, 0, 3.0).unwrap();
        assert_eq!(bd.omega, 1.0);
        assert_eq!(bd.dk_weight, 0.0);
        let mut perturbed = bd.clone();
        perturbed.dk_per_peer.iter_mut().for_each(|v| *v += 100.0);
        assert_eq!(perturbed.recombine(), bd.recombine());

        let late = decay_weight(&DistillSchedule::exponential(0.5, 100).unwrap(), 40).unwrap();
        assert!(late < 1e-8);
    }

    #[test]
    fn pcl_total_on_uniform_logits() {
        for m in [2usize, 3] {
            for c in [2usize, 5] {
                let mut tape = Tape::new();
                let peers = (0..m).map(|_| tape.param(Tensor::zeros(&[4, c]))).collect();
                let ensemble = tape.param(Tensor::zeros(&[4, c]));
                let out = PeerOutputs { peers, ensemble };
                let teachers = vec![Tensor::zeros(&[4, c]); m];
                let (_, bd) = pcl_total(&mut tape, &out, &teachers, &[0, 1, 0, 1], 3.0).unwrap();
                let expected = (m as f64 + 1.0) * (c as f64).ln();
                assert!((bd.total - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pcl_total_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut tape = Tape::new();
        let out = toy_outputs(&mut tape, &mut rng, 3, 2, 4);
        let teachers: Vec<Tensor> = (0..3).map(|_| random(&[2, 4], &mut rng, 2.0)).collect();
        let labels = [3usize, 1];
        let (_, bd) = pcl_total(&mut tape, &out, &teachers, &labels, 2.0).unwrap();
        let ens = tape.value(out.ensemble).clone();
        let mut hand = ce_oracle(&ens, &labels);
        for p in 0..3 {
            let s = tape.value(out.peers[p]).clone();
            let pm: f64 = (0..3).filter(|&j| j != p).map(|j| 4.0 * kl_oracle(&s, &teachers[j], 2.0)).sum::<f64>() / 2.0;
            hand += ce_oracle(&s, &labels) + 4.0 * kl_oracle(&s, &ens, 2.0) + pm;
        }
        assert!((bd.total - hand).abs() < 1e-10);
    }

    #[test]
    fn objective_rejects_inconsistent_peer_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut tape = Tape::new();
        let out = toy_outputs(&mut tape, &mut rng, 3, 2, 2);
        let teachers: Vec<Tensor> = (0..2).map(|_| random(&[2, 2], &mut rng, 1.0)).collect();
        let sched = DistillSchedule::exponential(0.5, 10).unwrap();
        let err = dkel_total(&mut tape, &out, &teachers, &[0, 1], &sched, 0, 3.0);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn kd_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let t = random(&[3, 4], &mut rng, 2.0);
        let x = random(&[3, 4], &mut rng, 2.0);
        let err = grad_check(|tape, s| kd_loss(tape, s, &t, 3.0), &x, 1e-5).unwrap();
        assert!(err < 1e-4);
    }
}
