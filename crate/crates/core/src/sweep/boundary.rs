use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{classify_stability, Algorithm, DynamicsConfig, Label, Sampling};
use crate::error::{Error, Result};
use crate::quadratic::{
    build_lower_bound_family, build_spike_family, sam_divergence_threshold, sam_lower_bound_stable,
    sgd_divergence_threshold, BoundInputs, HessianFamily,
};
use crate::rng::{derive_seed, label};

/// Which constructed family fills each grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    /// `σ` shared spikes on `e₁` plus distinct spikes on `e₂, e₃, …`.
    Spike,
    /// `σ` shared spikes on `e₁` plus zero members.
    LowerBound,
}

/// A `(B, σ)` grid at fixed step size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    pub batch_sizes: Vec<usize>,
    pub sigmas: Vec<usize>,
    pub eta: f64,
    pub n: usize,
    pub d: usize,
    pub target_sharpness: f64,
    pub family: FamilyKind,
    pub algorithms: Vec<Algorithm>,
    pub sampling: Sampling,
    pub steps: usize,
    pub trials: usize,
    pub seed: u64,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            batch_sizes: vec![1, 2, 5, 10, 20, 50, 100],
            sigmas: vec![1, 2, 5, 10, 20, 50, 100],
            eta: 0.5,
            n: 100,
            d: 100,
            target_sharpness: 2.0,
            family: FamilyKind::Spike,
            algorithms: vec![
                Algorithm::Sgd,
                Algorithm::RandomPerturb { noise_scale: 1.0 },
                Algorithm::SamLinearized {
                    rho: 0.1,
                    alpha: 1.0,
                },
            ],
            sampling: Sampling::Bernoulli,
            steps: DynamicsConfig::DEFAULT_STEPS,
            trials: DynamicsConfig::DEFAULT_TRIALS,
            seed: 0,
        }
    }
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        if self.batch_sizes.is_empty() || self.sigmas.is_empty() || self.algorithms.is_empty() {
            return Err(Error::input(
                "grid needs batch sizes, sigmas and algorithms",
            ));
        }
        if let Some(b) = self.batch_sizes.iter().find(|&&b| b == 0 || b > self.n) {
            return Err(Error::input(format!(
                "batch size {b} outside [1, n={}]",
                self.n
            )));
        }
        if let Some(s) = self.sigmas.iter().find(|&&s| s == 0 || s > self.n) {
            return Err(Error::input(format!("sigma {s} outside [1, n={}]", self.n)));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::input(format!(
                "step size must be positive, got {}",
                self.eta
            )));
        }
        if !(self.target_sharpness > 0.0 && self.target_sharpness.is_finite()) {
            return Err(Error::input("target sharpness must be positive"));
        }
        if self.steps == 0 || self.trials == 0 {
            return Err(Error::input("steps and trials must be at least 1"));
        }
        Ok(())
    }

    /// Seed shared by every algorithm run on cell `(B, σ)`.
    pub fn cell_seed(&self, batch_size: usize, sigma: usize) -> u64 {
        derive_seed(self.seed, &[label::CELL, batch_size as u64, sigma as u64])
    }

    fn build_family(&self, sigma: usize) -> Result<HessianFamily> {
        match self.family {
            FamilyKind::Spike => build_spike_family(self.n, sigma, self.d, self.target_sharpness),
            FamilyKind::LowerBound => {
                build_lower_bound_family(self.n, sigma, self.d, self.target_sharpness)
            }
        }
    }
}

/// One `(algorithm, B, σ)` cell. `label` is `None` for skipped cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub algorithm: String,
    pub batch_size: usize,
    pub sigma: usize,
    pub eta: f64,
    pub rho_over_alpha: f64,
    pub label: Option<Label>,
    pub skip_reason: Option<String>,
    pub final_norm_ratio_median: f64,
    pub predicted_sgd_threshold: f64,
    pub predicted_sam_threshold: f64,
    pub lower_bound_stable: bool,
}

impl CellResult {
    /// Diverged is the only unstable label; undetermined counts as stable.
    pub fn is_stable(&self) -> Option<bool> {
        self.label.map(|l| l != Label::Diverged)
    }
}

/// Fraction of commonly labelled cells on which two algorithms agree about
/// divergence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub first: String,
    pub second: String,
    pub compared_cells: usize,
    pub agreement: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BoundaryReport {
    /// Ordered by algorithm, then batch size, then sigma, as in the grid.
    pub cells: Vec<CellResult>,
    pub overlaps: Vec<Overlap>,
}

impl BoundaryReport {
    pub fn cells_for<'a, 'b>(
        &'a self,
        algorithm: &'b str,
    ) -> impl Iterator<Item = &'a CellResult> + use<'a, 'b> {
        self.cells.iter().filter(move |c| c.algorithm == algorithm)
    }

    pub fn cell(&self, algorithm: &str, batch_size: usize, sigma: usize) -> Option<&CellResult> {
        self.cells_for(algorithm)
            .find(|c| c.batch_size == batch_size && c.sigma == sigma)
    }

    pub fn stable_count(&self, algorithm: &str) -> usize {
        self.cells_for(algorithm)
            .filter(|c| c.is_stable() == Some(true))
            .count()
    }

    pub fn algorithms(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for c in &self.cells {
            if !names.contains(&c.algorithm) {
                names.push(c.algorithm.clone());
            }
        }
        names
    }

    pub fn agreement(&self, first: &str, second: &str) -> Overlap {
        let mut compared = 0;
        let mut agree = 0;
        for a in self.cells_for(first) {
            if let Some(b) = self.cell(second, a.batch_size, a.sigma) {
                if let (Some(x), Some(y)) = (a.is_stable(), b.is_stable()) {
                    compared += 1;
                    agree += usize::from(x == y);
                }
            }
        }
        Overlap {
            first: first.to_string(),
            second: second.to_string(),
            compared_cells: compared,
            agreement: if compared == 0 {
                f64::NAN
            } else {
                agree as f64 / compared as f64
            },
        }
    }

    fn with_overlaps(mut self) -> Self {
        let names = self.algorithms();
        let mut overlaps = Vec::new();
        for (i, a) in names.iter().enumerate() {
            for b in &names[i + 1..] {
                overlaps.push(self.agreement(a, b));
            }
        }
        self.overlaps = overlaps;
        self
    }
}

/// Closed-form predictions shared by every algorithm in a cell.
struct CellPrediction {
    lambda_min: f64,
    sgd_threshold: f64,
}

fn predict(
    grid: &SweepGrid,
    family: &HessianFamily,
    batch_size: usize,
    sigma: usize,
) -> Result<CellPrediction> {
    let (lambda_min, _) = family.aggregate_extremes()?;
    let inputs = BoundInputs {
        n: grid.n,
        batch_size,
        eta: grid.eta,
        lambda_max: grid.target_sharpness,
        lambda_min,
        sigma: sigma as f64,
        ..Default::default()
    };
    Ok(CellPrediction {
        lambda_min,
        sgd_threshold: sgd_divergence_threshold(&inputs)?,
    })
}

fn run_cell(
    grid: &SweepGrid,
    algorithm: Algorithm,
    batch_size: usize,
    sigma: usize,
) -> Result<CellResult> {
    let kappa = algorithm.rho_over_alpha();
    let mut cell = CellResult {
        algorithm: algorithm.name().to_string(),
        batch_size,
        sigma,
        eta: grid.eta,
        rho_over_alpha: kappa,
        label: None,
        skip_reason: None,
        final_norm_ratio_median: f64::NAN,
        predicted_sgd_threshold: f64::NAN,
        predicted_sam_threshold: f64::NAN,
        lower_bound_stable: false,
    };
    let family = match grid.build_family(sigma) {
        Ok(f) => f,
        Err(Error::Input(reason)) => {
            cell.skip_reason = Some(reason);
            return Ok(cell);
        }
        Err(e) => return Err(e),
    };
    let prediction = predict(grid, &family, batch_size, sigma)?;
    let inputs = BoundInputs {
        n: grid.n,
        batch_size,
        eta: grid.eta,
        rho_over_alpha: kappa,
        lambda_max: grid.target_sharpness,
        lambda_min: prediction.lambda_min,
        sigma: sigma as f64,
        ..Default::default()
    };
    cell.predicted_sgd_threshold = prediction.sgd_threshold;
    cell.predicted_sam_threshold = sam_divergence_threshold(&inputs)?;
    cell.lower_bound_stable = sam_lower_bound_stable(&inputs);

    let config = DynamicsConfig {
        sampling: grid.sampling,
        steps: grid.steps,
        trials: grid.trials,
        ..DynamicsConfig::new(grid.eta, batch_size, algorithm)
    }
    .with_seed(grid.cell_seed(batch_size, sigma));
    let verdict = classify_stability(&family, &config)?;
    cell.final_norm_ratio_median = verdict.median_ratio();
    cell.label = Some(verdict.label);
    Ok(cell)
}

/// Classifies every `(algorithm, B, σ)` cell and attaches the closed-form
/// predictions. Cells run in parallel; output order and values do not
/// depend on the thread count.
pub fn run_boundary_sweep(grid: &SweepGrid) -> Result<BoundaryReport> {
    grid.validate()?;
    let jobs: Vec<(Algorithm, usize, usize)> = grid
        .algorithms
        .iter()
        .flat_map(|&a| {
            grid.batch_sizes
                .iter()
                .flat_map(move |&b| grid.sigmas.iter().map(move |&s| (a, b, s)))
        })
        .collect();
    let cells = jobs
        .into_par_iter()
        .map(|(a, b, s)| run_cell(grid, a, b, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(BoundaryReport {
        cells,
        overlaps: Vec::new(),
    }
    .with_overlaps())
}

/// One linearized-SAM report per `ρ/α` value (with `α = 1`).
pub fn run_sam_rho_sweep(
    grid: &SweepGrid,
    rho_over_alpha_values: &[f64],
) -> Result<Vec<BoundaryReport>> {
    if rho_over_alpha_values.is_empty() {
        return Err(Error::input("need at least one rho/alpha value"));
    }
    if rho_over_alpha_values
        .iter()
        .any(|k| !(*k >= 0.0 && k.is_finite()))
    {
        return Err(Error::input("rho/alpha values must be nonnegative"));
    }
    if rho_over_alpha_values.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::input("rho/alpha values must be ascending"));
    }
    rho_over_alpha_values
        .iter()
        .map(|&kappa| {
            let g = SweepGrid {
                algorithms: vec![Algorithm::SamLinearized {
                    rho: kappa,
                    alpha: 1.0,
                }],
                ..grid.clone()
            };
            run_boundary_sweep(&g)
        })
        .collect()
}
