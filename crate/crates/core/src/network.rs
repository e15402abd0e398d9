//! The multi-peer dense network used for both student and teacher.
//!
//! Layout: a shared two-layer ReLU backbone, `m` peer heads (dense+ReLU
//! feature layer followed by a linear logits layer) and an ensemble head that
//! maps the concatenated peer features to logits.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub classes: usize,
    pub peers: usize,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.peers < 2 {
            return Err(Error::Config(format!("need at least 2 peers, got {}", self.peers)));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.input_dim == 0 || self.hidden_dim == 0 || self.feature_dim == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    /// Stable 64-bit FNV-1a digest of the layout, stored in checkpoints.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in [self.input_dim, self.hidden_dim, self.feature_dim, self.classes, self.peers] {
            for b in (v as u64).to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn glorot(fan_in: usize, fan_out: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| scale * rng.random_range(-limit..limit))
            .collect();
        Linear {
            weight: Tensor::new(vec![fan_in, fan_out], data).expect("glorot shape"),
            bias: Tensor::zeros(&[1, fan_out]),
        }
    }

    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[1, fan_out]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PeerHead {
    pub feature: Linear,
    pub logits: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiPeerNetwork {
    config: NetworkConfig,
    pub backbone: Vec<Linear>,
    pub heads: Vec<PeerHead>,
    pub ensemble: Linear,
}

/// Flat snapshot of every parameter in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterVector(pub Vec<f64>);

impl ParameterVector {
    pub fn max_abs_diff(&self, other: &ParameterVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn bitwise_eq(&self, other: &ParameterVector) -> bool {
        self.0.len() == other.0.len()
            && self.0.iter().zip(&other.0).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Tape handles for every parameter of one network, in canonical order.
#[derive(Clone, Debug)]
pub struct BoundNetwork {
    vars: Vec<Var>,
    peers: usize,
}

impl BoundNetwork {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn backbone(&self, layer: usize) -> (Var, Var) {
        (self.vars[2 * layer], self.vars[2 * layer + 1])
    }

    fn head(&self, p: usize) -> [Var; 4] {
        let o = 4 + 4 * p;
        [self.vars[o], self.vars[o + 1], self.vars[o + 2], self.vars[o + 3]]
    }

    fn ensemble(&self) -> (Var, Var) {
        let o = 4 + 4 * self.peers;
        (self.vars[o], self.vars[o + 1])
    }
}

const MAGIC: &[u8; 8] = b"DKELNET1";

impl MultiPeerNetwork {
    /// Glorot-uniform weights, zero biases, every weight scaled by
    /// `init_scale` (1.0 for the standard initialisation).
    pub fn init(config: NetworkConfig, seed: u64, init_scale: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config;
        let backbone = vec![
            Linear::glorot(c.input_dim, c.hidden_dim, init_scale, &mut rng),
            Linear::glorot(c.hidden_dim, c.hidden_dim, init_scale, &mut rng),
        ];
        let heads = (0..c.peers)
            .map(|_| PeerHead {
                feature: Linear::glorot(c.hidden_dim, c.feature_dim, init_scale, &mut rng),
                logits: Linear::glorot(c.feature_dim, c.classes, init_scale, &mut rng),
            })
            .collect();
        let ensemble = Linear::glorot(c.peers * c.feature_dim, c.classes, init_scale, &mut rng);
        Ok(Self {
            config,
            backbone,
            heads,
            ensemble,
        })
    }

    pub fn zeros(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let c = config;
        Ok(Self {
            config,
            backbone: vec![Linear::zeros(c.input_dim, c.hidden_dim), Linear::zeros(c.hidden_dim, c.hidden_dim)],
            heads: (0..c.peers)
                .map(|_| PeerHead {
                    feature: Linear::zeros(c.hidden_dim, c.feature_dim),
                    logits: Linear::zeros(c.feature_dim, c.classes),
                })
                .collect(),
            ensemble: Linear::zeros(c.peers * c.feature_dim, c.classes),
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn peers(&self) -> usize {
        self.config.peers
    }

    /// Parameters in canonical order: backbone layers, then each head
    /// (feature weight/bias, logits weight/bias), then the ensemble head.
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(6 + 4 * self.heads.len());
        for l in &self.backbone {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        for h in &self.heads {
            out.extend([&h.feature.weight, &h.feature.bias, &h.logits.weight, &h.logits.bias]);
        }
        out.push(&self.ensemble.weight);
        out.push(&self.ensemble.bias);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(6 + 4 * self.heads.len());
        for l in &mut self.backbone {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        for h in &mut self.heads {
            out.push(&mut h.feature.weight);
            out.push(&mut h.feature.bias);
            out.push(&mut h.logits.weight);
            out.push(&mut h.logits.bias);
        }
        out.push(&mut self.ensemble.weight);
        out.push(&mut self.ensemble.bias);
        out
    }

    pub fn parameter_vector(&self) -> ParameterVector {
        ParameterVector(self.parameters().into_iter().flat_map(|t| t.data().iter().copied()).collect())
    }

    pub fn param_norm(&self) -> f64 {
        self.parameters().iter().map(|t| t.sum_sq()).sum::<f64>().sqrt()
    }

    /// Registers every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BoundNetwork {
        let vars = self
            .parameters()
            .into_iter()
            .map(|t| tape.leaf(t.clone(), requires_grad))
            .collect();
        BoundNetwork {
            vars,
            peers: self.config.peers,
        }
    }

    fn check_peer(&self, p: usize) -> Result<()> {
        if p >= self.config.peers {
            return Err(Error::Parameter(format!(
                "peer index {p} out of range for {} peers",
                self.config.peers
            )));
        }
        Ok(())
    }

    /// Runs peer `p` on its own view. Returns `(feature, logits)`.
    pub fn forward_peer(&self, tape: &mut Tape, bound: &BoundNetwork, x: Var, p: usize) -> Result<(Var, Var)> {
        self.check_peer(p)?;
        let mut h = x;
        for layer in 0..2 {
            let (w, b) = bound.backbone(layer);
            let z = tape.matmul(h, w)?;
            let z = tape.add_bias(z, b)?;
            h = tape.relu(z);
        }
        let [fw, fb, lw, lb] = bound.head(p);
        let z = tape.matmul(h, fw)?;
        let z = tape.add_bias(z, fb)?;
        let feature = tape.relu(z);
        let z = tape.matmul(feature, lw)?;
        let logits = tape.add_bias(z, lb)?;
        Ok((feature, logits))
    }

    /// Stacks the peer features column-wise and applies the ensemble head.
    pub fn forward_ensemble(&self, tape: &mut Tape, bound: &BoundNetwork, features: &[Var]) -> Result<Var> {
        if features.len() != self.config.peers {
            return Err(Error::Config(format!(
                "ensemble expects {} peer features, got {}",
                self.config.peers,
                features.len()
            )));
        }
        for f in features {
            let cols = tape.value(*f).cols();
            if cols != self.config.feature_dim {
                return Err(Error::Config(format!(
                    "peer feature width {cols} does not match feature_dim {}",
                    self.config.feature_dim
                )));
            }
        }
        let stacked = tape.concat_cols(features)?;
        let (w, b) = bound.ensemble();
        let z = tape.matmul(stacked, w)?;
        tape.add_bias(z, b)
    }

    /// Gradient-free logits of every peer (peer `p` on `views[p]`) plus the
    /// ensemble logits.
    pub fn predict(&self, views: &[&Tensor]) -> Result<(Vec<Tensor>, Tensor)> {
        if views.len() != self.config.peers {
            return Err(Error::Config(format!(
                "{} views for {} peers",
                views.len(),
                self.config.peers
            )));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let mut features = Vec::with_capacity(views.len());
        let mut logits = Vec::with_capacity(views.len());
        for (p, x) in views.iter().enumerate() {
            let xv = tape.constant((*x).clone());
            let (f, l) = self.forward_peer(&mut tape, &bound, xv, p)?;
            features.push(f);
            logits.push(tape.value(l).clone());
        }
        let e = self.forward_ensemble(&mut tape, &bound, &features)?;
        Ok((logits, tape.value(e).clone()))
    }

    /// Overwrites `self` with `src`'s parameters.
    pub fn copy_parameters_from(&mut self, src: &MultiPeerNetwork) -> Result<()> {
        if self.config != src.config {
            return Err(Error::Config(format!(
                "cannot copy parameters between {:?} and {:?}",
                src.config, self.config
            )));
        }
        for (dst, s) in self.parameters_mut().into_iter().zip(src.parameters()) {
            dst.data_mut().copy_from_slice(s.data());
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let c = &self.config;
        let params = self.parameter_vector();
        w.write_all(MAGIC)?;
        w.write_all(&c.digest().to_le_bytes())?;
        for v in [c.input_dim, c.hidden_dim, c.feature_dim, c.classes, c.peers] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&(params.0.len() as u64).to_le_bytes())?;
        for v in &params.0 {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut b8 = [0u8; 8];
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b8)?;
        let digest = u64::from_le_bytes(b8);
        let mut dims = [0usize; 5];
        for d in &mut dims {
            r.read_exact(&mut b4)?;
            *d = u32::from_le_bytes(b4) as usize;
        }
        let config = NetworkConfig {
            input_dim: dims[0],
            hidden_dim: dims[1],
            feature_dim: dims[2],
            classes: dims[3],
            peers: dims[4],
        };
        if config.digest() != digest {
            return Err(Error::Checkpoint("header digest does not match dimensions".into()));
        }
        let mut net = Self::zeros(config)?;
        r.read_exact(&mut b8)?;
        let count = u64::from_le_bytes(b8) as usize;
        let expected: usize = net.parameters().iter().map(|t| t.len()).sum();
        if count != expected {
            return Err(Error::Checkpoint(format!("{count} values stored, layout needs {expected}")));
        }
        for t in net.parameters_mut() {
            for v in t.data_mut() {
                r.read_exact(&mut b8)?;
                *v = f64::from_le_bytes(b8);
            }
        }
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

/// L2 norm over all parameters.
pub fn param_norm(net: &MultiPeerNetwork) -> f64 {
    net.param_norm()
}
