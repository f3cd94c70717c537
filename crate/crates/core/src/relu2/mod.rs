//! Two-layer scalar-output ReLU networks `f(x) = W2 · ReLU(W1 x + b)`.
//!
//! Parameters are flattened in the order `(W2, W1 row-major, b)`, so a
//! network with input dimension `d` and `d2` hidden units has
//! `d2 + d2·d + d2` parameters. Per-sample gradients, Gauss–Newton
//! curvature and training all use that layout.

mod construct;
mod metrics;
mod train;

pub use construct::{
    build_cr_solution, build_memorizing_solution, generate_dataset, perturb_net, random_init_net,
    Dataset, DEFAULT_INIT_NOISE_STD,
};
pub use metrics::{
    cluster_sizes, effective_rank, gauss_newton_family, hidden_features, interpolation_residual,
    is_memorizing, snapshot_metrics, SnapshotMetrics, EFFECTIVE_RANK_THRESHOLD,
};
pub use train::{
    mse_gradient, mse_loss, sam_gradient, train, EpochRecord, Optimizer, TrainConfig, TrainLog,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoLayerNet {
    d: usize,
    d2: usize,
    /// `d2 × d`, row-major.
    w1: Vec<f64>,
    w2: Vec<f64>,
    b: Vec<f64>,
}

impl TwoLayerNet {
    pub fn zeros(d: usize, d2: usize) -> Self {
        Self {
            d,
            d2,
            w1: vec![0.0; d2 * d],
            w2: vec![0.0; d2],
            b: vec![0.0; d2],
        }
    }

    pub fn new(d: usize, d2: usize, w1: Vec<f64>, w2: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if w1.len() != d2 * d {
            return Err(Error::DimensionMismatch {
                expected: d2 * d,
                got: w1.len(),
            });
        }
        if w2.len() != d2 || b.len() != d2 {
            return Err(Error::DimensionMismatch {
                expected: d2,
                got: w2.len().max(b.len()),
            });
        }
        let net = Self { d, d2, w1, w2, b };
        if !net.params_iter().all(f64::is_finite) {
            return Err(Error::input("network parameters must be finite"));
        }
        Ok(net)
    }

    pub fn input_dim(&self) -> usize {
        self.d
    }

    pub fn hidden_dim(&self) -> usize {
        self.d2
    }

    pub fn param_count(&self) -> usize {
        self.d2 * (self.d + 2)
    }

    pub fn w1_row(&self, j: usize) -> &[f64] {
        &self.w1[j * self.d..(j + 1) * self.d]
    }

    pub fn w2(&self) -> &[f64] {
        &self.w2
    }

    pub fn bias(&self) -> &[f64] {
        &self.b
    }

    fn params_iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.w2.iter().chain(&self.w1).chain(&self.b).copied()
    }

    /// Flat parameter vector `(W2, W1, b)`.
    pub fn to_flat(&self) -> Vec<f64> {
        self.params_iter().collect()
    }

    pub fn from_flat(d: usize, d2: usize, flat: &[f64]) -> Result<Self> {
        if flat.len() != d2 * (d + 2) {
            return Err(Error::DimensionMismatch {
                expected: d2 * (d + 2),
                got: flat.len(),
            });
        }
        let (w2, rest) = flat.split_at(d2);
        let (w1, b) = rest.split_at(d2 * d);
        Ok(Self {
            d,
            d2,
            w1: w1.to_vec(),
            w2: w2.to_vec(),
            b: b.to_vec(),
        })
    }

    /// `self + c · delta` for a flat `delta`.
    pub fn offset(&self, delta: &[f64], c: f64) -> Self {
        assert_eq!(delta.len(), self.param_count(), "flat parameter length");
        let mut out = self.clone();
        let d2 = self.d2;
        let (dw2, rest) = delta.split_at(d2);
        let (dw1, db) = rest.split_at(d2 * self.d);
        for (p, g) in out.w2.iter_mut().zip(dw2) {
            *p += c * g;
        }
        for (p, g) in out.w1.iter_mut().zip(dw1) {
            *p += c * g;
        }
        for (p, g) in out.b.iter_mut().zip(db) {
            *p += c * g;
        }
        out
    }

    /// Hidden pre-activations `W1 x + b`.
    pub fn pre_activations(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.d, "input dimension");
        (0..self.d2)
            .map(|j| {
                let row = self.w1_row(j);
                row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + self.b[j]
            })
            .collect()
    }
}

/// Output value and the strict activation pattern `W1 x + b > 0`.
pub fn forward(net: &TwoLayerNet, x: &[f64]) -> (f64, Vec<bool>) {
    let z = net.pre_activations(x);
    let active: Vec<bool> = z.iter().map(|&zj| zj > 0.0).collect();
    let value = z
        .iter()
        .zip(&active)
        .zip(&net.w2)
        .filter(|((_, &a), _)| a)
        .map(|((zj, _), w)| w * zj)
        .sum();
    (value, active)
}

/// Gradient of `f(x)` with respect to `(W2, W1, b)`, using `1[z > 0]` at the kink.
pub fn per_sample_gradient(net: &TwoLayerNet, x: &[f64]) -> Vec<f64> {
    let (d, d2) = (net.d, net.d2);
    let z = net.pre_activations(x);
    let mut g = vec![0.0; net.param_count()];
    for j in 0..d2 {
        if z[j] <= 0.0 {
            continue;
        }
        g[j] = z[j];
        let w2 = net.w2[j];
        let row = &mut g[d2 + j * d..d2 + (j + 1) * d];
        for (gi, xi) in row.iter_mut().zip(x) {
            *gi = w2 * xi;
        }
        g[d2 + d2 * d + j] = w2;
    }
    g
}
