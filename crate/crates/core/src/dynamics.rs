//! Linearized stochastic dynamics around a minimum of a quadratic loss.
//!
//! All updates act on the deviation `w` from the minimum and have the form
//! `w ← w − η H_t v`, where `H_t = (1/B) Σ_{i∈S_t} H_i` is the minibatch
//! curvature and `v` depends on the algorithm:
//!
//! | algorithm        | `v`                              |
//! |------------------|----------------------------------|
//! | SGD              | `w`                              |
//! | random perturb   | `w + δ_t`, `δ_t ~ N(0, s² I)`    |
//! | SAM (linearized) | `w + (ρ/α) H w`                  |
//! | SAM (exact)      | `w + ρ H w / ‖H w‖`              |
//!
//! Each trial draws its initial point and batches from one sub-stream and
//! its perturbation noise from another, both keyed by `(seed, trial)`.
//! Zero-noise random perturbation never touches the noise stream, so it
//! reproduces SGD bit for bit.

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadratic::HessianFamily;
use crate::rng::{label, substream};
use crate::spectra::{norm, SymMatrix};

/// How a minibatch is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Each example included independently with probability `B/n`.
    Bernoulli,
    /// A uniformly random subset of exactly `B` examples.
    FixedSize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Algorithm {
    Sgd,
    RandomPerturb { noise_scale: f64 },
    SamLinearized { rho: f64, alpha: f64 },
    SamExact { rho: f64 },
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Sgd => "sgd",
            Algorithm::RandomPerturb { .. } => "random_perturb",
            Algorithm::SamLinearized { .. } => "sam_linearized",
            Algorithm::SamExact { .. } => "sam_exact",
        }
    }

    /// `ρ/α` for linearized SAM, `ρ` for exact SAM (normalizer unknown a
    /// priori), zero otherwise.
    pub fn rho_over_alpha(&self) -> f64 {
        match *self {
            Algorithm::SamLinearized { rho, alpha } => rho / alpha,
            Algorithm::SamExact { rho } => rho,
            _ => 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Algorithm::Sgd => true,
            Algorithm::RandomPerturb { noise_scale } => {
                noise_scale >= 0.0 && noise_scale.is_finite()
            }
            Algorithm::SamLinearized { rho, alpha } => {
                rho >= 0.0 && rho.is_finite() && alpha > 0.0 && alpha.is_finite()
            }
            Algorithm::SamExact { rho } => rho >= 0.0 && rho.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::input(format!(
                "invalid algorithm parameters: {self:?}"
            )))
        }
    }
}

/// One simulated optimizer plus the classification protocol.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicsConfig {
    pub eta: f64,
    pub batch_size: usize,
    pub sampling: Sampling,
    pub algorithm: Algorithm,
    pub steps: usize,
    pub trials: usize,
    pub diverge_factor: f64,
    pub converge_factor: f64,
    pub seed: u64,
}

impl DynamicsConfig {
    pub const DEFAULT_STEPS: usize = 1000;
    pub const DEFAULT_TRIALS: usize = 10;
    pub const DEFAULT_DIVERGE_FACTOR: f64 = 1000.0;
    pub const DEFAULT_CONVERGE_FACTOR: f64 = 1e-3;

    pub fn new(eta: f64, batch_size: usize, algorithm: Algorithm) -> Self {
        Self {
            eta,
            batch_size,
            sampling: Sampling::Bernoulli,
            algorithm,
            steps: Self::DEFAULT_STEPS,
            trials: Self::DEFAULT_TRIALS,
            diverge_factor: Self::DEFAULT_DIVERGE_FACTOR,
            converge_factor: Self::DEFAULT_CONVERGE_FACTOR,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_sampling(mut self, sampling: Sampling) -> Self {
        self.sampling = sampling;
        self
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.batch_size == 0 || self.batch_size > n {
            return Err(Error::input(format!(
                "batch size B={} must lie in [1, n={n}]",
                self.batch_size
            )));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::input(format!(
                "step size must be nonnegative, got {}",
                self.eta
            )));
        }
        if self.steps == 0 || self.trials == 0 {
            return Err(Error::input("steps and trials must be at least 1"));
        }
        if !(self.diverge_factor > 1.0 && self.converge_factor > 0.0 && self.converge_factor < 1.0)
        {
            return Err(Error::input(
                "need diverge_factor > 1 and 0 < converge_factor < 1",
            ));
        }
        self.algorithm.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Diverged,
    Converged,
    Undetermined,
}

impl Label {
    pub fn as_str(&self) -> &'static str {
        match self {
            Label::Diverged => "diverged",
            Label::Converged => "converged",
            Label::Undetermined => "undetermined",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityVerdict {
    pub label: Label,
    pub trial_labels: Vec<Label>,
    /// `‖w_T‖ / ‖w_0‖` per trial, `T` being the exit step.
    pub final_norm_ratios: Vec<f64>,
}

impl StabilityVerdict {
    fn from_trials(trial_labels: Vec<Label>, final_norm_ratios: Vec<f64>) -> Self {
        let count = |l: Label| trial_labels.iter().filter(|&&t| t == l).count();
        let half = trial_labels.len();
        let label = if 2 * count(Label::Diverged) > half {
            Label::Diverged
        } else if 2 * count(Label::Converged) > half {
            Label::Converged
        } else {
            Label::Undetermined
        };
        Self {
            label,
            trial_labels,
            final_norm_ratios,
        }
    }

    pub fn median_ratio(&self) -> f64 {
        median(&self.final_norm_ratios)
    }
}

pub(crate) fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Minibatch selection, `H_t = scale · Σ_{i ∈ indices} H_i` with `scale = 1/B`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchDraw {
    n: usize,
    indices: Vec<usize>,
    scale: f64,
}

impl BatchDraw {
    pub fn new(n: usize, mut indices: Vec<usize>, batch_size: usize) -> Self {
        indices.sort_unstable();
        Self {
            n,
            indices,
            scale: 1.0 / batch_size as f64,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// Per-example weights `x_i / B`.
    pub fn inclusion_weights(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.n];
        for &i in &self.indices {
            w[i] = self.scale;
        }
        w
    }
}

pub fn draw_batch<R: Rng + ?Sized>(n: usize, config: &DynamicsConfig, rng: &mut R) -> BatchDraw {
    let b = config.batch_size;
    let indices = match config.sampling {
        Sampling::Bernoulli => {
            let p = b as f64 / n as f64;
            (0..n).filter(|_| rng.random::<f64>() < p).collect()
        }
        Sampling::FixedSize => index::sample(rng, n, b).into_vec(),
    };
    BatchDraw::new(n, indices, b)
}

/// Dense `H_t` for the draw.
pub fn batch_hessian(family: &HessianFamily, draw: &BatchDraw) -> SymMatrix {
    let mut h = SymMatrix::zeros(family.dim());
    for &i in &draw.indices {
        h = h
            .add_scaled(&family.member(i).to_dense(), draw.scale)
            .expect("family members share a dimension");
    }
    h
}

fn batch_apply(family: &HessianFamily, draw: &BatchDraw, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    family.apply_members_add(&draw.indices, x, draw.scale, &mut out);
    out
}

fn descend(w: &[f64], eta: f64, direction: &[f64]) -> Vec<f64> {
    w.iter()
        .zip(direction)
        .map(|(wi, di)| wi - eta * di)
        .collect()
}

/// `(I − η H_t) w`.
pub fn step_sgd(w: &[f64], family: &HessianFamily, draw: &BatchDraw, eta: f64) -> Vec<f64> {
    descend(w, eta, &batch_apply(family, draw, w))
}

/// `w − η H_t (w + δ)`, with fresh Gaussian `δ` of per-coordinate std `noise_scale`.
pub fn step_random_perturb<R: Rng + ?Sized>(
    w: &[f64],
    family: &HessianFamily,
    draw: &BatchDraw,
    eta: f64,
    noise_scale: f64,
    rng: &mut R,
) -> Vec<f64> {
    if noise_scale == 0.0 {
        return step_sgd(w, family, draw, eta);
    }
    let shifted: Vec<f64> = w
        .iter()
        .map(|wi| wi + noise_scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    descend(w, eta, &batch_apply(family, draw, &shifted))
}

/// `(I − η H_t (I + (ρ/α) H)) w`.
pub fn step_sam_linearized(
    w: &[f64],
    family: &HessianFamily,
    draw: &BatchDraw,
    eta: f64,
    rho: f64,
    alpha: f64,
) -> Vec<f64> {
    let kappa = rho / alpha;
    if kappa == 0.0 {
        return step_sgd(w, family, draw, eta);
    }
    let hw = family.apply_aggregate(w);
    let ascent: Vec<f64> = w.iter().zip(&hw).map(|(wi, hi)| wi + kappa * hi).collect();
    descend(w, eta, &batch_apply(family, draw, &ascent))
}

/// `(I − η H_t (I + ρ H / ‖H w‖)) w`; plain SGD when `‖H w‖ ≤ 1e-12 ‖w‖`.
pub fn step_sam_exact(
    w: &[f64],
    family: &HessianFamily,
    draw: &BatchDraw,
    eta: f64,
    rho: f64,
) -> Vec<f64> {
    if rho == 0.0 {
        return step_sgd(w, family, draw, eta);
    }
    let hw = family.apply_aggregate(w);
    let hw_norm = norm(&hw);
    if hw_norm <= 1e-12 * norm(w) || hw_norm == 0.0 {
        return step_sgd(w, family, draw, eta);
    }
    let c = rho / hw_norm;
    let ascent: Vec<f64> = w.iter().zip(&hw).map(|(wi, hi)| wi + c * hi).collect();
    descend(w, eta, &batch_apply(family, draw, &ascent))
}

/// Runs one trajectory, calling `visit(t, w_t)` for `t = 0..=steps` until it
/// returns false.
fn run_trajectory<F>(
    family: &HessianFamily,
    config: &DynamicsConfig,
    trial: u64,
    steps: usize,
    mut visit: F,
) where
    F: FnMut(usize, &[f64]) -> bool,
{
    let n = family.len();
    let mut rng = substream(config.seed, &[label::INIT_AND_BATCH, trial]);
    let mut noise_rng = substream(config.seed, &[label::NOISE, trial]);
    let mut w: Vec<f64> = (0..family.dim())
        .map(|_| rng.sample(StandardNormal))
        .collect();
    if !visit(0, &w) {
        return;
    }
    for t in 1..=steps {
        let draw = draw_batch(n, config, &mut rng);
        w = match config.algorithm {
            Algorithm::Sgd => step_sgd(&w, family, &draw, config.eta),
            Algorithm::RandomPerturb { noise_scale } => {
                step_random_perturb(&w, family, &draw, config.eta, noise_scale, &mut noise_rng)
            }
            Algorithm::SamLinearized { rho, alpha } => {
                step_sam_linearized(&w, family, &draw, config.eta, rho, alpha)
            }
            Algorithm::SamExact { rho } => step_sam_exact(&w, family, &draw, config.eta, rho),
        };
        if !visit(t, &w) {
            return;
        }
    }
}

/// Classifies each trial as diverged (norm ratio reaches `diverge_factor`
/// at any step, or overflows), converged (final ratio at most
/// `converge_factor`) or undetermined, then takes the majority.
pub fn classify_stability(
    family: &HessianFamily,
    config: &DynamicsConfig,
) -> Result<StabilityVerdict> {
    config.validate(family.len())?;
    let mut labels = Vec::with_capacity(config.trials);
    let mut ratios = Vec::with_capacity(config.trials);
    for trial in 0..config.trials as u64 {
        let mut initial = 0.0;
        let mut ratio = 1.0;
        let mut diverged = false;
        run_trajectory(family, config, trial, config.steps, |t, w| {
            let nrm = norm(w);
            if t == 0 {
                initial = nrm;
                return true;
            }
            ratio = nrm / initial;
            if !ratio.is_finite() || ratio >= config.diverge_factor {
                diverged = true;
                if !ratio.is_finite() {
                    ratio = f64::INFINITY;
                }
                return false;
            }
            true
        });
        labels.push(if diverged {
            Label::Diverged
        } else if ratio <= config.converge_factor {
            Label::Converged
        } else {
            Label::Undetermined
        });
        ratios.push(ratio);
    }
    Ok(StabilityVerdict::from_trials(labels, ratios))
}

/// Monte-Carlo estimate of `E‖w_k‖²` for `k = 0..=horizon`. Trial `j` uses
/// the same sub-streams as trial `j` of [`classify_stability`], so two
/// algorithms run with the same seed share initial points and batches.
pub fn norm_growth_curve(
    family: &HessianFamily,
    config: &DynamicsConfig,
    horizon: usize,
    mc_trials: usize,
) -> Result<Vec<f64>> {
    config.validate(family.len())?;
    if horizon == 0 || mc_trials == 0 {
        return Err(Error::input("horizon and mc_trials must be at least 1"));
    }
    let curves: Vec<Vec<f64>> = (0..mc_trials as u64)
        .into_par_iter()
        .map(|trial| {
            let mut curve = Vec::with_capacity(horizon + 1);
            run_trajectory(family, config, trial, horizon, |_, w| {
                curve.push(w.iter().map(|x| x * x).sum());
                true
            });
            curve
        })
        .collect();
    let mut mean = vec![0.0; horizon + 1];
    for curve in &curves {
        for (m, v) in mean.iter_mut().zip(curve) {
            *m += v;
        }
    }
    let inv = 1.0 / mc_trials as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    Ok(mean)
}
