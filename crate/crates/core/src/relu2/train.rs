use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{
    forward, per_sample_gradient, snapshot_metrics, Dataset, SnapshotMetrics, TwoLayerNet,
};
use crate::error::{Error, Result};
use crate::rng::{label, substream};
use crate::spectra::norm;

/// `(1/n) Σ (f(x_i) - y_i)²` over the whole dataset.
pub fn mse_loss(net: &TwoLayerNet, dataset: &Dataset) -> f64 {
    let n = dataset.len();
    (0..n)
        .map(|i| (forward(net, dataset.input(i)).0 - dataset.label(i)).powi(2))
        .sum::<f64>()
        / n as f64
}

/// Gradient of the minibatch MSE, `(2/|S|) Σ_{i∈S} (f(x_i) - y_i) ∇f(x_i)`.
pub fn mse_gradient(net: &TwoLayerNet, dataset: &Dataset, batch: &[usize]) -> Vec<f64> {
    let mut grad = vec![0.0; net.param_count()];
    if batch.is_empty() {
        return grad;
    }
    let scale = 2.0 / batch.len() as f64;
    for &i in batch {
        let x = dataset.input(i);
        let residual = forward(net, x).0 - dataset.label(i);
        if residual == 0.0 {
            continue;
        }
        for (g, gi) in grad.iter_mut().zip(per_sample_gradient(net, x)) {
            *g += scale * residual * gi;
        }
    }
    grad
}

/// Minibatch gradient re-evaluated at `w + ρ g/‖g‖`.
pub fn sam_gradient(net: &TwoLayerNet, dataset: &Dataset, batch: &[usize], rho: f64) -> Vec<f64> {
    let g = mse_gradient(net, dataset, batch);
    let g_norm = norm(&g);
    if rho == 0.0 || g_norm <= 1e-12 {
        return g;
    }
    mse_gradient(&net.offset(&g, rho / g_norm), dataset, batch)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Sam { rho: f64 },
}

impl Optimizer {
    pub fn name(&self) -> String {
        match self {
            Optimizer::Sgd => "sgd".to_string(),
            Optimizer::Sam { rho } => format!("sam_{rho}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub eta: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Full metrics every this many epochs (and at the last epoch); 0 disables them.
    pub track_every: usize,
}

impl TrainConfig {
    fn validate(&self, n: usize) -> Result<()> {
        if self.batch_size == 0 || self.batch_size > n {
            return Err(Error::input(format!(
                "batch size {} must lie in [1, {n}]",
                self.batch_size
            )));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::input(format!(
                "learning rate must be nonnegative, got {}",
                self.eta
            )));
        }
        if let Optimizer::Sam { rho } = self.optimizer {
            if !(rho >= 0.0 && rho.is_finite()) {
                return Err(Error::input(format!(
                    "SAM radius must be nonnegative, got {rho}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub metrics: Option<SnapshotMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Epoch 0 is the initial state.
    pub records: Vec<EpochRecord>,
    pub diverged: bool,
    pub final_net: TwoLayerNet,
}

impl TrainLog {
    pub fn final_loss(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.loss)
    }

    /// Last record carrying full metrics.
    pub fn final_metrics(&self) -> Option<&SnapshotMetrics> {
        self.records.iter().rev().find_map(|r| r.metrics.as_ref())
    }
}

/// Epoch loop over shuffled fixed-size minibatches (the last one may be
/// smaller). Stops early, with `diverged` set, once the loss is non-finite.
pub fn train(net: &TwoLayerNet, dataset: &Dataset, config: &TrainConfig) -> Result<TrainLog> {
    let n = dataset.len();
    config.validate(n)?;
    if net.input_dim() != dataset.dim() {
        return Err(Error::DimensionMismatch {
            expected: net.input_dim(),
            got: dataset.dim(),
        });
    }
    let tracked = |epoch: usize| {
        config.track_every > 0
            && (epoch.is_multiple_of(config.track_every) || epoch == config.epochs)
    };
    let record = |net: &TwoLayerNet, epoch: usize| -> Result<EpochRecord> {
        if tracked(epoch) {
            let m = snapshot_metrics(net, dataset)?;
            Ok(EpochRecord {
                epoch,
                loss: m.loss,
                metrics: Some(m),
            })
        } else {
            Ok(EpochRecord {
                epoch,
                loss: mse_loss(net, dataset),
                metrics: None,
            })
        }
    };

    let mut rng = substream(config.seed, &[label::SHUFFLE]);
    let mut order: Vec<usize> = (0..n).collect();
    let mut current = net.clone();
    let mut records = vec![record(&current, 0)?];
    let mut diverged = false;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let g = match config.optimizer {
                Optimizer::Sgd => mse_gradient(&current, dataset, batch),
                Optimizer::Sam { rho } => sam_gradient(&current, dataset, batch, rho),
            };
            current = current.offset(&g, -config.eta);
        }
        let loss = mse_loss(&current, dataset);
        if !loss.is_finite() {
            records.push(EpochRecord {
                epoch,
                loss,
                metrics: None,
            });
            diverged = true;
            break;
        }
        records.push(record(&current, epoch)?);
    }
    Ok(TrainLog {
        records,
        diverged,
        final_net: current,
    })
}

#[cfg(test)]
mod tests {
    use super::super::{build_cr_solution, generate_dataset, perturb_net};
    use super::*;

    fn setup(noise: f64, seed: u64) -> (TwoLayerNet, Dataset) {
        let ds = generate_dataset(40, 8, &mut substream(seed, &[label::DATASET])).unwrap();
        let base = build_cr_solution(3, 1.5, 8, 10).unwrap();
        let net = perturb_net(&base, noise, &mut substream(seed, &[label::PERTURB])).unwrap();
        (net, ds)
    }

    #[test]
    fn gradient_vanishes_at_interpolation() {
        let (net, ds) = setup(0.0, 1);
        let all: Vec<usize> = (0..ds.len()).collect();
        assert!(mse_gradient(&net, &ds, &all).iter().all(|&g| g == 0.0));
        assert!(sam_gradient(&net, &ds, &all, 0.1).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn mse_gradient_matches_finite_differences_of_the_loss() {
        let (net, ds) = setup(0.05, 2);
        let batch: Vec<usize> = (0..ds.len()).collect();
        let g = mse_gradient(&net, &ds, &batch);
        let h = 1e-6;
        let flat_len = net.param_count();
        for k in (0..flat_len).step_by(7) {
            let mut e = vec![0.0; flat_len];
            e[k] = 1.0;
            let fd = (mse_loss(&net.offset(&e, h), &ds) - mse_loss(&net.offset(&e, -h), &ds))
                / (2.0 * h);
            assert!(
                (fd - g[k]).abs() < 1e-6 * (1.0 + g[k].abs()),
                "coordinate {k}: {fd} vs {}",
                g[k]
            );
        }
    }

    #[test]
    fn sam_gradient_examples() {
        let (net, ds) = setup(1e-3, 3);
        let batch: Vec<usize> = (0..10).collect();
        assert_eq!(
            sam_gradient(&net, &ds, &batch, 0.0),
            mse_gradient(&net, &ds, &batch)
        );

        // First-order expansion: g + ρ H_batch g/‖g‖ with the Gauss–Newton H_batch.
        let rho = 1e-4;
        let g = mse_gradient(&net, &ds, &batch);
        let u: Vec<f64> = g.iter().map(|x| x / norm(&g)).collect();
        let mut expected = g.clone();
        for &i in &batch {
            let gi = per_sample_gradient(&net, ds.input(i));
            let proj: f64 = gi.iter().zip(&u).map(|(a, b)| a * b).sum();
            for (e, a) in expected.iter_mut().zip(&gi) {
                *e += rho * 2.0 / batch.len() as f64 * proj * a;
            }
        }
        let got = sam_gradient(&net, &ds, &batch, rho);
        let err = got
            .iter()
            .zip(&expected)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-6, "max deviation {err}");
    }

    #[test]
    fn zero_step_keeps_the_loss() {
        let (net, ds) = setup(0.1, 4);
        let cfg = TrainConfig {
            optimizer: Optimizer::Sgd,
            eta: 0.0,
            batch_size: 10,
            epochs: 5,
            seed: 1,
            track_every: 0,
        };
        let log = train(&net, &ds, &cfg).unwrap();
        assert_eq!(log.records.len(), 6);
        assert!(log.records.iter().all(|r| r.loss == log.records[0].loss));
    }

    #[test]
    fn exact_solution_stays_put() {
        let (net, ds) = setup(0.0, 5);
        for optimizer in [Optimizer::Sgd, Optimizer::Sam { rho: 0.05 }] {
            let cfg = TrainConfig {
                optimizer,
                eta: 0.05,
                batch_size: 10,
                epochs: 4,
                seed: 2,
                track_every: 2,
            };
            let log = train(&net, &ds, &cfg).unwrap();
            assert!(log.records.iter().all(|r| r.loss <= 1e-12));
            let tracked: Vec<usize> = log
                .records
                .iter()
                .filter(|r| r.metrics.is_some())
                .map(|r| r.epoch)
                .collect();
            assert_eq!(tracked, vec![0, 2, 4]);
        }
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let (net, ds) = setup(0.1, 6);
        for optimizer in [Optimizer::Sgd, Optimizer::Sam { rho: 0.01 }] {
            let cfg = TrainConfig {
                optimizer,
                eta: 0.05,
                batch_size: 10,
                epochs: 30,
                seed: 3,
                track_every: 10,
            };
            let log = train(&net, &ds, &cfg).unwrap();
            assert!(!log.diverged);
            assert_eq!(log.records.len(), 31);
            assert!(log.final_loss() < log.records[0].loss);
            assert_eq!(log, train(&net, &ds, &cfg).unwrap());
        }
    }

    #[test]
    fn blow_up_is_flagged() {
        // Every unit always active with a large bias: output-layer curvature is huge.
        let ds = generate_dataset(40, 8, &mut substream(7, &[label::DATASET])).unwrap();
        let net = TwoLayerNet::new(8, 10, vec![0.0; 80], vec![0.01; 10], vec![10.0; 10]).unwrap();
        let cfg = TrainConfig {
            optimizer: Optimizer::Sgd,
            eta: 1.0,
            batch_size: 40,
            epochs: 200,
            seed: 0,
            track_every: 0,
        };
        let log = train(&net, &ds, &cfg).unwrap();
        assert!(log.diverged);
        assert!(!log.final_loss().is_finite());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let (net, ds) = setup(0.1, 8);
        let mut cfg = TrainConfig {
            optimizer: Optimizer::Sgd,
            eta: 0.1,
            batch_size: 0,
            epochs: 1,
            seed: 0,
            track_every: 0,
        };
        assert!(train(&net, &ds, &cfg).is_err());
        cfg.batch_size = 5;
        cfg.optimizer = Optimizer::Sam { rho: -1.0 };
        assert!(train(&net, &ds, &cfg).is_err());
    }
}
