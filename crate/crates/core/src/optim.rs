//! SGD with Nesterov momentum and the EMA teacher update.

use crate::error::{Error, Result};
use crate::network::MultiPeerNetwork;
use crate::tensor::Tensor;

/// Nesterov SGD with the L2 penalty folded into the gradient:
///
/// ```text
/// g ← g + λ·w
/// v ← μ·v + g
/// w ← w − lr·(g + μ·v)
/// ```
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr >= 0.0) || !(weight_decay >= 0.0) || !(0.0..1.0).contains(&momentum) {
            return Err(Error::Parameter(format!(
                "bad optimizer settings lr={lr} momentum={momentum} weight_decay={weight_decay}"
            )));
        }
        Ok(Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        })
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Parameter(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::Parameter("parameter count changed between steps".into()));
        }
        for ((w, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            if w.shape() != g.shape() || w.shape() != v.shape() {
                return Err(Error::shape("sgd_step", w.shape(), g.shape()));
            }
            let (lr, mu, wd) = (self.lr, self.momentum, self.weight_decay);
            for ((wi, &gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                let g = gi + wd * *wi;
                *vi = mu * *vi + g;
                *wi -= lr * (g + mu * *vi);
            }
        }
        Ok(())
    }
}

/// One SGD update of every parameter of `net`.
pub fn sgd_step(opt: &mut Sgd, net: &mut MultiPeerNetwork, grads: &[Tensor]) -> Result<()> {
    opt.step(net.parameters_mut(), grads)
}

/// `t ← η·s + (1−η)·t` over every parameter, including the ensemble head,
/// evaluated as `t + η·(s − t)` so that `t == s` is an exact fixed point.
pub fn ema_update(teacher: &mut MultiPeerNetwork, student: &MultiPeerNetwork, eta: f64) -> Result<()> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::Parameter(format!("eta must lie in (0, 1), got {eta}")));
    }
    if teacher.config() != student.config() {
        return Err(Error::Config("teacher and student layouts differ".into()));
    }
    for (t, s) in teacher.parameters_mut().into_iter().zip(student.parameters()) {
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv += eta * (sv - *tv);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkConfig;

    fn cfg() -> NetworkConfig {
        NetworkConfig {
            input_dim: 2,
            hidden_dim: 3,
            feature_dim: 2,
            classes: 2,
            peers: 2,
        }
    }

    #[test]
    fn zero_grad_without_decay_is_a_fixed_point() {
        let mut w = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let before = w.clone();
        let mut opt = Sgd::new(0.1, 0.9, 0.0).unwrap();
        for _ in 0..5 {
            opt.step(vec![&mut w], &[Tensor::zeros(&[3])]).unwrap();
        }
        assert_eq!(w, before);
    }

    #[test]
    fn weight_decay_alone_shrinks_geometrically() {
        let mut w = Tensor::vector(vec![1.0, -3.0]);
        let mut opt = Sgd::new(0.1, 0.0, 5e-4).unwrap();
        opt.step(vec![&mut w], &[Tensor::zeros(&[2])]).unwrap();
        assert!((w.data()[0] - 0.99995).abs() < 1e-15);
        assert!((w.data()[1] + 3.0 * 0.99995).abs() < 1e-15);
    }

    #[test]
    fn quadratic_step() {
        // f(w) = w², grad 2w
        let mut w = Tensor::scalar(1.0);
        let g = Tensor::scalar(2.0);
        let mut opt = Sgd::new(0.1, 0.0, 0.0).unwrap();
        opt.step(vec![&mut w], &[g]).unwrap();
        assert!((w.item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn nesterov_two_steps_by_hand() {
        // g=1 constant, mu=0.5, lr=0.1: v1=1, w1=1-0.1*(1+0.5)=0.85; v2=1.5, w2=0.85-0.1*(1+0.75)=0.675
        let mut w = Tensor::scalar(1.0);
        let mut opt = Sgd::new(0.1, 0.5, 0.0).unwrap();
        opt.step(vec![&mut w], &[Tensor::scalar(1.0)]).unwrap();
        assert!((w.item() - 0.85).abs() < 1e-15);
        opt.step(vec![&mut w], &[Tensor::scalar(1.0)]).unwrap();
        assert!((w.item() - 0.675).abs() < 1e-15);
    }

    #[test]
    fn step_rejects_shape_mismatch() {
        let mut w = Tensor::vector(vec![1.0, 2.0]);
        let mut opt = Sgd::new(0.1, 0.0, 0.0).unwrap();
        assert!(opt.step(vec![&mut w], &[Tensor::zeros(&[3])]).is_err());
        assert!(opt.step(vec![&mut w], &[]).is_err());
    }

    #[test]
    fn ema_cases() {
        let student = MultiPeerNetwork::init(cfg(), 1, 1.0).unwrap();
        let mut teacher = student.clone();
        ema_update(&mut teacher, &student, 0.3).unwrap();
        assert_eq!(teacher.parameter_vector(), student.parameter_vector());

        let mut s = MultiPeerNetwork::zeros(cfg()).unwrap();
        s.ensemble.bias.data_mut()[0] = 2.0;
        let mut t = MultiPeerNetwork::zeros(cfg()).unwrap();
        ema_update(&mut t, &s, 0.5).unwrap();
        assert_eq!(t.ensemble.bias.data()[0], 1.0);

        assert!(ema_update(&mut t, &s, 1.0).is_err());
        assert!(ema_update(&mut t, &s, 0.0).is_err());
    }

    #[test]
    fn ema_with_frozen_student_decays_geometrically() {
        let student = MultiPeerNetwork::init(cfg(), 1, 1.0).unwrap();
        let mut teacher = MultiPeerNetwork::init(cfg(), 2, 1.0).unwrap();
        let eta = 0.2;
        let dist = |t: &MultiPeerNetwork| {
            let (a, b) = (t.parameter_vector(), student.parameter_vector());
            a.0.iter().zip(&b.0).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
        };
        let d0 = dist(&teacher);
        for k in 1..=20 {
            ema_update(&mut teacher, &student, eta).unwrap();
            let expected = d0 * (1.0 - eta).powi(k);
            assert!((dist(&teacher) - expected).abs() < 1e-12 * d0.max(1.0));
        }
    }
}
