//! Synthetic classification data and per-peer augmentation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Spirals,
    Blobs,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.gather_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            classes: self.classes,
        }
    }

    pub fn class_frequency(&self, class: usize) -> f64 {
        self.y.iter().filter(|&&y| y == class).count() as f64 / self.len().max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub val: Dataset,
}

/// SplitMix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from a base seed and a key tuple.
pub fn derive_seed(seed: u64, key: &[u64]) -> u64 {
    key.iter().fold(mix(seed), |h, &k| mix(h ^ mix(k)))
}

pub fn rng_for(seed: u64, key: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, key))
}

/// Number of turns each spiral arm makes from the centre to radius 1.
pub const SPIRAL_TURNS: f64 = 1.0;

/// Noise-free position of a point on spiral arm `class` at radius `r ∈ [0,1]`.
pub fn spiral_point(class: usize, classes: usize, r: f64) -> [f64; 2] {
    let theta = 2.0 * std::f64::consts::PI * (class as f64 / classes as f64 + SPIRAL_TURNS * r);
    [r * theta.cos(), r * theta.sin()]
}

/// Generates `n` labelled points and splits them 80/20 per class.
///
/// Spirals: `classes` interleaved arms with Gaussian jitter of std `noise`.
/// Blobs: isotropic Gaussians of std `noise` centred on a circle of radius 3.
pub fn gen_dataset(kind: DatasetKind, n: usize, classes: usize, noise: f64, seed: u64) -> Result<Split> {
    if classes < 2 {
        return Err(Error::Data(format!("need at least 2 classes, got {classes}")));
    }
    if n < classes {
        return Err(Error::Data(format!("{n} samples cannot cover {classes} classes")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Data(format!("noise must be non-negative, got {noise}")));
    }
    let mut rng = rng_for(seed, &[0xda7a]);
    let jitter = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("finite std");
    let mut xs = Vec::with_capacity(2 * n);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        let k = i / classes;
        let per_class = n.div_ceil(classes);
        let [px, py] = match kind {
            DatasetKind::Spirals => {
                let r = 0.05 + 0.95 * (k as f64 + 0.5) / per_class as f64;
                spiral_point(class, classes, r)
            }
            DatasetKind::Blobs => {
                let a = 2.0 * std::f64::consts::PI * class as f64 / classes as f64;
                [3.0 * a.cos(), 3.0 * a.sin()]
            }
        };
        let (dx, dy) = if noise > 0.0 {
            (jitter.sample(&mut rng), jitter.sample(&mut rng))
        } else {
            (0.0, 0.0)
        };
        xs.extend([px + dx, py + dy]);
        ys.push(class);
    }
    let all = Dataset {
        x: Tensor::new(vec![n, 2], xs)?,
        y: ys,
        classes,
    };

    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for c in 0..classes {
        let mut members: Vec<usize> = (0..n).filter(|&i| all.y[i] == c).collect();
        members.shuffle(&mut rng);
        let n_train = (members.len() * 4).div_ceil(5);
        train_idx.extend_from_slice(&members[..n_train]);
        val_idx.extend_from_slice(&members[n_train..]);
    }
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    Ok(Split {
        train: all.subset(&train_idx),
        val: all.subset(&val_idx),
    })
}

/// Gaussian jitter of standard deviation `std`, drawn from `rng`.
///
/// Callers seed `rng` per (epoch, batch, peer) so every peer sees its own
/// view of the batch.
pub fn augment_per_peer(x: &Tensor, std: f64, rng: &mut impl Rng) -> Tensor {
    if std == 0.0 {
        return x.clone();
    }
    let normal = Normal::new(0.0, std).expect("finite std");
    let mut out = x.clone();
    for v in out.data_mut() {
        *v += normal.sample(rng);
    }
    out
}
