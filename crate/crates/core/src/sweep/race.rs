use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relu2::{
    build_cr_solution, generate_dataset, perturb_net, train, Optimizer, TrainConfig,
    DEFAULT_INIT_NOISE_STD,
};
use crate::rng::{label, substream};

/// Training from noisy `(C, r)` solutions at several complexities `C`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RaceConfig {
    pub c_values: Vec<usize>,
    /// Defaults to `(d+1)^{1/4}`, the flattest scale.
    pub r: Option<f64>,
    pub d: usize,
    pub d2: usize,
    pub n: usize,
    pub optimizers: Vec<Optimizer>,
    pub eta: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seeds: Vec<u64>,
    pub init_noise_std: f64,
}

impl Default for RaceConfig {
    fn default() -> Self {
        Self {
            c_values: vec![2, 3, 4, 5],
            r: None,
            d: 100,
            d2: 50,
            n: 100,
            optimizers: vec![Optimizer::Sgd, Optimizer::Sam { rho: 0.01 }],
            eta: 0.01,
            batch_size: 10,
            epochs: 50,
            seeds: (0..5).collect(),
            init_noise_std: DEFAULT_INIT_NOISE_STD,
        }
    }
}

impl RaceConfig {
    pub fn scale(&self) -> f64 {
        self.r.unwrap_or_else(|| (self.d as f64 + 1.0).powf(0.25))
    }

    fn validate(&self) -> Result<()> {
        if self.c_values.is_empty() || self.optimizers.is_empty() || self.seeds.is_empty() {
            return Err(Error::input("race needs C values, optimizers and seeds"));
        }
        Ok(())
    }
}

/// Loss curve of one `(C, optimizer)` pair, averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaceCurve {
    pub c: usize,
    pub optimizer: Optimizer,
    pub mean_loss: Vec<f64>,
    /// Sample standard deviation across seeds (zero for a single seed).
    pub std_loss: Vec<f64>,
    pub final_losses: Vec<f64>,
    pub diverged_runs: usize,
}

impl RaceCurve {
    pub fn final_mean(&self) -> f64 {
        *self
            .mean_loss
            .last()
            .expect("curves have at least the initial epoch")
    }

    pub fn final_std(&self) -> f64 {
        *self
            .std_loss
            .last()
            .expect("curves have at least the initial epoch")
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RaceReport {
    pub curves: Vec<RaceCurve>,
}

impl RaceReport {
    pub fn curve(&self, c: usize, optimizer: Optimizer) -> Option<&RaceCurve> {
        self.curves
            .iter()
            .find(|k| k.c == c && k.optimizer == optimizer)
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, var.sqrt())
}

/// For each seed, one dataset and, per `C`, one perturbed start shared by
/// all optimizers.
pub fn run_cr_race(config: &RaceConfig) -> Result<RaceReport> {
    config.validate()?;
    let r = config.scale();
    for &c in &config.c_values {
        build_cr_solution(c, r, config.d, config.d2)?;
    }
    let jobs: Vec<(usize, Optimizer, u64)> = config
        .c_values
        .iter()
        .flat_map(|&c| {
            config
                .optimizers
                .iter()
                .flat_map(move |&o| config.seeds.iter().map(move |&s| (c, o, s)))
        })
        .collect();
    let logs = jobs
        .par_iter()
        .map(|&(c, optimizer, seed)| {
            let dataset =
                generate_dataset(config.n, config.d, &mut substream(seed, &[label::DATASET]))?;
            let base = build_cr_solution(c, r, config.d, config.d2)?;
            let start = perturb_net(
                &base,
                config.init_noise_std,
                &mut substream(seed, &[label::PERTURB, c as u64]),
            )?;
            let train_config = TrainConfig {
                optimizer,
                eta: config.eta,
                batch_size: config.batch_size,
                epochs: config.epochs,
                seed,
                track_every: 0,
            };
            train(&start, &dataset, &train_config)
        })
        .collect::<Result<Vec<_>>>()?;

    let per_pair = config.seeds.len();
    let curves = jobs
        .chunks(per_pair)
        .zip(logs.chunks(per_pair))
        .map(|(pair_jobs, pair_logs)| {
            let (c, optimizer, _) = pair_jobs[0];
            let epochs = config.epochs + 1;
            let mut mean_loss = Vec::with_capacity(epochs);
            let mut std_loss = Vec::with_capacity(epochs);
            for e in 0..epochs {
                let losses: Vec<f64> = pair_logs
                    .iter()
                    .map(|l| l.records.get(e).map_or(f64::INFINITY, |r| r.loss))
                    .collect();
                let (m, s) = mean_std(&losses);
                mean_loss.push(m);
                std_loss.push(s);
            }
            RaceCurve {
                c,
                optimizer,
                mean_loss,
                std_loss,
                final_losses: pair_logs.iter().map(|l| l.final_loss()).collect(),
                diverged_runs: pair_logs.iter().filter(|l| l.diverged).count(),
            }
        })
        .collect();
    Ok(RaceReport { curves })
}
