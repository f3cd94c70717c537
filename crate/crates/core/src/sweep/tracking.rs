use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::median;
use crate::error::{Error, Result};
use crate::relu2::{generate_dataset, random_init_net, train, EpochRecord, Optimizer, TrainConfig};
use crate::rng::{label, substream};

/// Coherence tracking while training a small network from a random start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackingConfig {
    pub d: usize,
    pub d2: usize,
    pub n: usize,
    pub optimizers: Vec<Optimizer>,
    pub eta: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seeds: Vec<u64>,
    pub track_every: usize,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self {
            d: 15,
            d2: 10,
            n: 50,
            optimizers: vec![
                Optimizer::Sgd,
                Optimizer::Sam { rho: 0.01 },
                Optimizer::Sam { rho: 0.05 },
                Optimizer::Sam { rho: 0.1 },
            ],
            eta: 0.1,
            batch_size: 10,
            epochs: 50,
            seeds: (0..5).collect(),
            track_every: 1,
        }
    }
}

/// Medians over seeds of the final metrics of one optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingRow {
    pub optimizer: Optimizer,
    pub coherence_measure: f64,
    pub lambda_max_s: f64,
    pub effective_rank: f64,
    pub max_lambda_h_i: f64,
    pub lambda_max_h: f64,
    pub trace_h: f64,
    pub final_loss: f64,
    pub diverged_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingSeries {
    pub optimizer: Optimizer,
    pub seed: u64,
    pub records: Vec<EpochRecord>,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrackingReport {
    pub rows: Vec<TrackingRow>,
    pub series: Vec<TrackingSeries>,
}

/// Trains every optimizer from the same random start per seed and
/// summarizes the last tracked epoch. Diverged runs are excluded from the
/// medians and counted in `diverged_runs`.
pub fn run_coherence_tracking(config: &TrackingConfig) -> Result<TrackingReport> {
    if config.optimizers.is_empty() || config.seeds.is_empty() {
        return Err(Error::input("tracking needs optimizers and seeds"));
    }
    if config.track_every == 0 {
        return Err(Error::input("track_every must be at least 1"));
    }
    let jobs: Vec<(Optimizer, u64)> = config
        .optimizers
        .iter()
        .flat_map(|&o| config.seeds.iter().map(move |&s| (o, s)))
        .collect();
    let series = jobs
        .par_iter()
        .map(|&(optimizer, seed)| {
            let dataset =
                generate_dataset(config.n, config.d, &mut substream(seed, &[label::DATASET]))?;
            let start =
                random_init_net(config.d, config.d2, &mut substream(seed, &[label::PERTURB]))?;
            let log = train(
                &start,
                &dataset,
                &TrainConfig {
                    optimizer,
                    eta: config.eta,
                    batch_size: config.batch_size,
                    epochs: config.epochs,
                    seed,
                    track_every: config.track_every,
                },
            )?;
            Ok(TrackingSeries {
                optimizer,
                seed,
                records: log.records,
                diverged: log.diverged,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let rows = config
        .optimizers
        .iter()
        .map(|&optimizer| {
            let runs: Vec<&TrackingSeries> =
                series.iter().filter(|s| s.optimizer == optimizer).collect();
            let finals: Vec<_> = runs
                .iter()
                .filter(|s| !s.diverged)
                .filter_map(|s| s.records.iter().rev().find_map(|r| r.metrics))
                .collect();
            let med = |f: fn(&crate::relu2::SnapshotMetrics) -> f64| {
                median(&finals.iter().map(f).collect::<Vec<_>>())
            };
            TrackingRow {
                optimizer,
                coherence_measure: med(|m| m.sigma),
                lambda_max_s: med(|m| m.lambda_max_s),
                effective_rank: med(|m| m.effective_rank as f64),
                max_lambda_h_i: med(|m| m.max_elementwise),
                lambda_max_h: med(|m| m.lambda_max_h),
                trace_h: med(|m| m.trace_h),
                final_loss: med(|m| m.loss),
                diverged_runs: runs.iter().filter(|s| s.diverged).count(),
            }
        })
        .collect();
    Ok(TrackingReport { rows, series })
}
