//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node to a [`Tape`] and returns a [`Var`] handle.
//! Inputs always precede their consumers on the tape, so walking the nodes in
//! reverse index order is a reverse topological order and [`Tape::backward`]
//! visits each node once.
//!
//! ```
//! use dkel_core::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::vector(vec![1.0, -2.0]));
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -4.0]);
//! ```

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var, f64),
    LogSoftmax(Var, f64),
    Sum(Var),
    ConcatCols(Vec<Var>),
    /// Elementwise map with its pointwise derivative captured at forward time.
    Map(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Records differentiable computations for one backward pass.
///
/// A tape and its nodes belong to a single worker.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let out = matmul_raw(ta, tb);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::MatMul(a, b)))
    }

    /// Adds a `1×M` row vector to every row of an `N×M` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.rows() != 1 || tb.cols() != tx.cols() {
            return Err(Error::shape("add_bias", tx.shape(), tb.shape()));
        }
        let mut out = tx.clone();
        let c = tx.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += tb.data()[i % c];
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, rg, Op::AddBias(x, bias)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x).scale(k);
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::Scale(x, k))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::Relu(x))
    }

    /// Row-wise `softmax(x / tau)`.
    pub fn softmax_t(&mut self, x: Var, tau: f64) -> Result<Var> {
        check_tau(tau)?;
        let out = softmax_rows(self.value(x), tau);
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, Op::Softmax(x, tau)))
    }

    /// Row-wise `log softmax(x / tau)`.
    pub fn log_softmax_t(&mut self, x: Var, tau: f64) -> Result<Var> {
        check_tau(tau)?;
        let out = log_softmax_rows(self.value(x), tau);
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, Op::LogSoftmax(x, tau)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Concatenates `N×Fᵢ` matrices along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Parameter("concat_cols needs at least one input".into()))?;
        let n = self.value(*first).rows();
        for p in parts {
            let t = self.value(*p);
            if t.shape().len() != 2 || t.rows() != n {
                return Err(Error::shape("concat_cols", self.value(*first).shape(), t.shape()));
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        let out = Tensor::new(vec![n, total], data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, rg, Op::ConcatCols(parts.to_vec())))
    }

    /// Elementwise `f` with user-supplied derivative `df`.
    ///
    /// The derivative is trusted as given; `grad_check` is how to verify it.
    pub fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64) -> Var {
        let tx = self.value(x);
        let out = tx.map(&f);
        let deriv = tx.data().iter().map(|&v| df(v)).collect();
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::Map(x, deriv))
    }

    /// Back-propagates from a scalar root.
    ///
    /// Gradients are added to whatever each node already holds, so calling
    /// this twice without [`Tape::zero_grad`] doubles them.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            match &mut self.nodes[i].grad {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.acc(grads, *a, matmul_nt(g, tb));
                }
                if self.requires_grad(*b) {
                    self.acc(grads, *b, matmul_tn(ta, g));
                }
            }
            Op::AddBias(x, b) => {
                if self.requires_grad(*x) {
                    self.acc(grads, *x, g.clone());
                }
                if self.requires_grad(*b) {
                    let c = g.cols();
                    let mut gb = Tensor::zeros(self.value(*b).shape());
                    for (k, v) in g.data().iter().enumerate() {
                        gb.data_mut()[k % c] += v;
                    }
                    self.acc(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, zip_map(g, tb, |x, y| x * y));
                self.acc(grads, *b, zip_map(g, ta, |x, y| x * y));
            }
            Op::Scale(x, k) => self.acc(grads, *x, g.scale(*k)),
            Op::Relu(x) => {
                let tx = self.value(*x);
                self.acc(grads, *x, zip_map(g, tx, |gv, xv| if xv > 0.0 { gv } else { 0.0 }));
            }
            Op::Softmax(x, tau) => {
                let y = &node.value;
                let c = y.cols();
                let mut gx = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &g.data()[r * c..(r + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for k in 0..c {
                        gx.data_mut()[r * c + k] = yr[k] * (gr[k] - dot) / tau;
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::LogSoftmax(x, tau) => {
                let y = &node.value;
                let c = y.cols();
                let mut gx = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &g.data()[r * c..(r + 1) * c];
                    let gsum: f64 = gr.iter().sum();
                    for k in 0..c {
                        gx.data_mut()[r * c + k] = (gr[k] - yr[k].exp() * gsum) / tau;
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Sum(x) => {
                let gx = Tensor::full(self.value(*x).shape(), g.item());
                self.acc(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for p in parts {
                    let tp = self.value(*p);
                    let w = tp.cols();
                    if self.requires_grad(*p) {
                        let mut gp = Tensor::zeros(tp.shape());
                        for r in 0..tp.rows() {
                            let src = &g.data()[r * total + offset..r * total + offset + w];
                            gp.data_mut()[r * w..(r + 1) * w].copy_from_slice(src);
                        }
                        self.acc(grads, *p, gp);
                    }
                    offset += w;
                }
            }
            Op::Map(x, deriv) => {
                let mut gx = g.clone();
                for (v, d) in gx.data_mut().iter_mut().zip(deriv) {
                    *v *= d;
                }
                self.acc(grads, *x, gx);
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_map preserves shape")
}

fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a.data()[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b.data()[p * m..(p + 1) * m]) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![n, m], out).expect("matmul shape")
}

/// `g · bᵀ`
fn matmul_nt(g: &Tensor, b: &Tensor) -> Tensor {
    let (n, m) = (g.shape()[0], g.shape()[1]);
    let k = b.shape()[0];
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let gr = &g.data()[i * m..(i + 1) * m];
        for p in 0..k {
            let br = &b.data()[p * m..(p + 1) * m];
            out[i * k + p] = gr.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::new(vec![n, k], out).expect("matmul_nt shape")
}

/// `aᵀ · g`
fn matmul_tn(a: &Tensor, g: &Tensor) -> Tensor {
    let (n, k) = (a.shape()[0], a.shape()[1]);
    let m = g.shape()[1];
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let gr = &g.data()[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a.data()[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, gv) in out[p * m..(p + 1) * m].iter_mut().zip(gr) {
                *o += av * gv;
            }
        }
    }
    Tensor::new(vec![k, m], out).expect("matmul_tn shape")
}

/// Row-wise softmax of `x / tau` with max subtraction.
pub fn softmax_rows(x: &Tensor, tau: f64) -> Tensor {
    let mut out = log_softmax_rows(x, tau);
    for v in out.data_mut() {
        *v = v.exp();
    }
    out
}

/// Row-wise log-softmax of `x / tau` with max subtraction.
pub fn log_softmax_rows(x: &Tensor, tau: f64) -> Tensor {
    let c = x.cols();
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = &mut out.data_mut()[r * c..(r + 1) * c];
        for v in row.iter_mut() {
            *v /= tau;
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences. Returns `max |analytic − numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Parameter(format!("eps must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let root = f(&mut tape, xv)?;
    tape.backward(root)?;
    let analytic = tape
        .grad(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |probe: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.param(probe);
        let r = f(&mut t, v)?;
        Ok(t.value(r).item())
    };

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
