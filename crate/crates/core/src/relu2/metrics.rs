use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{forward, per_sample_gradient, train::mse_loss, Dataset, TwoLayerNet};
use crate::error::{Error, Result};
use crate::quadratic::{coherence_summary, CoherenceFlavor, Curvature, HessianFamily};
use crate::spectra::{sym_eig, SymMatrix};

/// Fraction of feature variance the effective rank must explain.
pub const EFFECTIVE_RANK_THRESHOLD: f64 = 0.9;

/// `max_i |f(x_i) - y_i|`.
pub fn interpolation_residual(net: &TwoLayerNet, dataset: &Dataset) -> f64 {
    (0..dataset.len())
        .map(|i| (forward(net, dataset.input(i)).0 - dataset.label(i)).abs())
        .fold(0.0, f64::max)
}

/// True iff every sample activates at least one unit and no unit is shared
/// between two samples.
pub fn is_memorizing(net: &TwoLayerNet, dataset: &Dataset) -> bool {
    let mut owner: Vec<Option<usize>> = vec![None; net.hidden_dim()];
    for i in 0..dataset.len() {
        let (_, active) = forward(net, dataset.input(i));
        let mut any = false;
        for (j, &a) in active.iter().enumerate() {
            if !a {
                continue;
            }
            any = true;
            if owner[j].is_some() {
                return false;
            }
            owner[j] = Some(i);
        }
        if !any {
            return false;
        }
    }
    true
}

/// Rank-one members `g_i g_iᵀ` built from per-sample gradients.
pub fn gauss_newton_family(net: &TwoLayerNet, dataset: &Dataset) -> Result<HessianFamily> {
    if dataset.is_empty() {
        return Err(Error::input("empty dataset"));
    }
    let members: Vec<Curvature> = (0..dataset.len())
        .into_par_iter()
        .map(|i| Curvature::outer(&per_sample_gradient(net, dataset.input(i))))
        .collect();
    HessianFamily::from_curvatures(members)
}

/// Number of samples activating each unit with a nonzero output weight, in
/// unit order. For a `(C, r)` net these are the `2^C` pattern clusters.
pub fn cluster_sizes(net: &TwoLayerNet, dataset: &Dataset) -> Vec<usize> {
    let live: Vec<usize> = (0..net.hidden_dim())
        .filter(|&j| net.w2()[j] != 0.0)
        .collect();
    let mut counts = vec![0; live.len()];
    for i in 0..dataset.len() {
        let (_, active) = forward(net, dataset.input(i));
        for (c, &j) in counts.iter_mut().zip(&live) {
            if active[j] {
                *c += 1;
            }
        }
    }
    counts
}

/// Hidden activations `ReLU(W1 x_i + b)` as an `n × d2` row-major matrix.
pub fn hidden_features(net: &TwoLayerNet, dataset: &Dataset) -> Vec<f64> {
    (0..dataset.len())
        .flat_map(|i| {
            net.pre_activations(dataset.input(i))
                .into_iter()
                .map(|z| z.max(0.0))
        })
        .collect()
}

/// Smallest number of principal components of the centered `n × cols`
/// feature matrix whose variance reaches `threshold` of the total. Zero
/// when the features have no variance.
pub fn effective_rank(features: &[f64], cols: usize, threshold: f64) -> Result<usize> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::input(format!(
            "threshold must lie in (0, 1], got {threshold}"
        )));
    }
    if cols == 0 || !features.len().is_multiple_of(cols) || features.len() / cols < 2 {
        return Err(Error::input(
            "need at least two feature rows of equal width",
        ));
    }
    let n = features.len() / cols;
    let mut mean = vec![0.0; cols];
    for row in features.chunks(cols) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; cols * cols];
    for row in features.chunks(cols) {
        let c: Vec<f64> = row.iter().zip(&mean).map(|(v, m)| v - m).collect();
        for a in 0..cols {
            for b in a..cols {
                cov[a * cols + b] += c[a] * c[b];
            }
        }
    }
    let cov = SymMatrix::from_row_major(cols, cov)?.scaled(1.0 / (n - 1) as f64);
    let eigenvalues: Vec<f64> = sym_eig(&cov)?
        .eigenvalues
        .into_iter()
        .map(|l| l.max(0.0))
        .collect();
    let total: f64 = eigenvalues.iter().sum();
    let level: f64 = mean.iter().map(|m| m * m).sum();
    if total <= 1e-24 * (1.0 + level) {
        return Ok(0);
    }
    let target = threshold * total * (1.0 - 1e-12);
    let mut acc = 0.0;
    for (k, l) in eigenvalues.iter().enumerate() {
        acc += l;
        if acc >= target {
            return Ok(k + 1);
        }
    }
    Ok(eigenvalues.len())
}

/// Curvature and representation metrics of one network snapshot.
/// Coherence entries are `NaN` when every per-sample gradient vanishes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMetrics {
    pub loss: f64,
    pub sigma: f64,
    pub lambda_max_s: f64,
    pub max_elementwise: f64,
    pub lambda_max_h: f64,
    pub trace_h: f64,
    pub effective_rank: usize,
}

pub fn snapshot_metrics(net: &TwoLayerNet, dataset: &Dataset) -> Result<SnapshotMetrics> {
    let family = gauss_newton_family(net, dataset)?;
    let (sigma, lambda_max_s, max_elementwise) =
        match coherence_summary(&family, CoherenceFlavor::Plain) {
            Ok(s) => (s.sigma, s.lambda_max_s, s.max_elementwise),
            Err(Error::Input(_)) => (f64::NAN, f64::NAN, f64::NAN),
            Err(e) => return Err(e),
        };
    let rank = if dataset.len() >= 2 {
        effective_rank(
            &hidden_features(net, dataset),
            net.hidden_dim(),
            EFFECTIVE_RANK_THRESHOLD,
        )?
    } else {
        0
    };
    Ok(SnapshotMetrics {
        loss: mse_loss(net, dataset),
        sigma,
        lambda_max_s,
        max_elementwise,
        lambda_max_h: family.aggregate_max_eigenvalue()?,
        trace_h: family.aggregate_trace(),
        effective_rank: rank,
    })
}
