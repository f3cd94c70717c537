//! Per-example curvature families, coherence matrices and closed-form
//! stability thresholds.
//!
//! Members of a [`HessianFamily`] are stored factored, `H_i = Σ_a w_a v_a v_aᵀ`
//! with `w_a > 0` and sparse `v_a`. Spike members (`m e_k e_kᵀ`) and
//! Gauss–Newton members (`g gᵀ`) are then O(nnz) to apply, and coherence
//! entries reduce to dot products:
//!
//! ```text
//! Tr(H_i H_j)             = Σ_ab w_a w_b (v_a·v_b)²
//! Tr(A H_i A H_j)         = Σ_ab w_a w_b (v_aᵀ A v_b)²      (A = I + κH)
//! λ_max(A^{1/2} H_i A^{1/2}) = λ_max(Fᵢᵀ A Fᵢ),  Fᵢ = [√w_a v_a]
//! ```
//!
//! The dense aggregate `H = (1/n) Σ H_i` is built lazily on first use.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectra::{max_eigenvalue, sym_eig, SymMatrix};

/// PSD tolerance applied to dense members passed to [`build_family`].
pub const MEMBER_PSD_TOLERANCE: f64 = 1e-9;

/// Sparse vector with strictly increasing indices and no stored zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVec {
    idx: Vec<usize>,
    val: Vec<f64>,
}

impl SparseVec {
    pub fn from_dense(v: &[f64]) -> Self {
        let (idx, val) = v
            .iter()
            .enumerate()
            .filter(|(_, x)| **x != 0.0)
            .map(|(i, x)| (i, *x))
            .unzip();
        Self { idx, val }
    }

    pub fn unit(axis: usize) -> Self {
        Self {
            idx: vec![axis],
            val: vec![1.0],
        }
    }

    pub fn nnz(&self) -> usize {
        self.idx.len()
    }

    pub fn norm_sq(&self) -> f64 {
        self.val.iter().map(|x| x * x).sum()
    }

    pub fn dot_dense(&self, x: &[f64]) -> f64 {
        self.idx.iter().zip(&self.val).map(|(&i, v)| v * x[i]).sum()
    }

    pub fn dot(&self, other: &SparseVec) -> f64 {
        let (mut a, mut b, mut s) = (0, 0, 0.0);
        while a < self.idx.len() && b < other.idx.len() {
            match self.idx[a].cmp(&other.idx[b]) {
                std::cmp::Ordering::Less => a += 1,
                std::cmp::Ordering::Greater => b += 1,
                std::cmp::Ordering::Equal => {
                    s += self.val[a] * other.val[b];
                    a += 1;
                    b += 1;
                }
            }
        }
        s
    }

    /// `out += c * self`.
    pub fn axpy_into(&self, c: f64, out: &mut [f64]) {
        for (&i, v) in self.idx.iter().zip(&self.val) {
            out[i] += c * v;
        }
    }

    fn max_index(&self) -> Option<usize> {
        self.idx.last().copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct RankOne {
    weight: f64,
    vector: SparseVec,
}

/// A PSD matrix held as a sum of weighted rank-one terms.
#[derive(Debug, Clone, PartialEq)]
pub struct Curvature {
    dim: usize,
    terms: Vec<RankOne>,
}

impl Curvature {
    pub fn zero(dim: usize) -> Self {
        Self {
            dim,
            terms: Vec::new(),
        }
    }

    /// `weight · e_axis e_axisᵀ`.
    pub fn spike(dim: usize, axis: usize, weight: f64) -> Self {
        assert!(axis < dim, "spike axis {axis} outside dimension {dim}");
        assert!(weight >= 0.0, "spike weight must be nonnegative");
        let mut c = Self::zero(dim);
        if weight > 0.0 {
            c.terms.push(RankOne {
                weight,
                vector: SparseVec::unit(axis),
            });
        }
        c
    }

    /// `g gᵀ`.
    pub fn outer(g: &[f64]) -> Self {
        let vector = SparseVec::from_dense(g);
        let mut c = Self::zero(g.len());
        if vector.nnz() > 0 {
            c.terms.push(RankOne {
                weight: 1.0,
                vector,
            });
        }
        c
    }

    /// Factors a dense PSD matrix through its eigendecomposition. Eigenvalues
    /// at or below `1e-14 · max(1, λ_max)` are dropped; negatives beyond
    /// `tol · max(1, |λ_max|)` are rejected.
    pub fn from_matrix(m: &SymMatrix, tol: f64) -> Result<Self> {
        let eig = sym_eig(m)?;
        let scale = eig.max().abs().max(1.0);
        if eig.min() < -tol * scale {
            return Err(Error::NotPsd {
                index: 0,
                min_eigenvalue: eig.min(),
            });
        }
        let cutoff = 1e-14 * scale;
        let terms = eig
            .eigenvalues
            .iter()
            .zip(&eig.eigenvectors)
            .filter(|(lam, _)| **lam > cutoff)
            .map(|(&weight, v)| RankOne {
                weight,
                vector: SparseVec::from_dense(v),
            })
            .collect();
        Ok(Self {
            dim: m.dim(),
            terms,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        self.terms.len()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn trace(&self) -> f64 {
        self.terms
            .iter()
            .map(|t| t.weight * t.vector.norm_sq())
            .sum()
    }

    /// `out += scale · self · x`.
    pub fn apply_add(&self, x: &[f64], scale: f64, out: &mut [f64]) {
        for t in &self.terms {
            let c = t.vector.dot_dense(x);
            if c != 0.0 {
                t.vector.axpy_into(scale * t.weight * c, out);
            }
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.apply_add(x, 1.0, &mut out);
        out
    }

    /// `out += scale · self` on a dense matrix.
    fn accumulate_dense(&self, scale: f64, out: &mut SymMatrix) {
        for t in &self.terms {
            let v = &t.vector;
            for a in 0..v.nnz() {
                for b in a..v.nnz() {
                    let (i, j) = (v.idx[a], v.idx[b]);
                    let add = scale * t.weight * v.val[a] * v.val[b];
                    out.set(i, j, out.get(i, j) + add);
                }
            }
        }
    }

    pub fn to_dense(&self) -> SymMatrix {
        let mut m = SymMatrix::zeros(self.dim);
        self.accumulate_dense(1.0, &mut m);
        m
    }

    /// `Tr(self · other)`; a sum of nonnegative terms.
    pub fn trace_product(&self, other: &Curvature) -> f64 {
        let mut s = 0.0;
        for a in &self.terms {
            for b in &other.terms {
                let d = a.vector.dot(&b.vector);
                s += a.weight * b.weight * d * d;
            }
        }
        s
    }

    /// Largest eigenvalue through the `rank × rank` factor Gram matrix.
    pub fn top_eigenvalue(&self) -> Result<f64> {
        match self.terms.len() {
            0 => Ok(0.0),
            1 => Ok(self.terms[0].weight * self.terms[0].vector.norm_sq()),
            r => {
                let mut g = SymMatrix::zeros(r);
                for a in 0..r {
                    for b in a..r {
                        let (ta, tb) = (&self.terms[a], &self.terms[b]);
                        g.set(
                            a,
                            b,
                            (ta.weight * tb.weight).sqrt() * ta.vector.dot(&tb.vector),
                        );
                    }
                }
                max_eigenvalue(&g)
            }
        }
    }
}

/// `n` per-example PSD curvature matrices of dimension `d` and their mean.
#[derive(Debug, Clone)]
pub struct HessianFamily {
    dim: usize,
    members: Vec<Curvature>,
    aggregate: OnceLock<SymMatrix>,
}

impl HessianFamily {
    /// Wraps already-factored members.
    pub fn from_curvatures(members: Vec<Curvature>) -> Result<Self> {
        let dim = members
            .first()
            .map(Curvature::dim)
            .ok_or_else(|| Error::input("a Hessian family needs at least one member"))?;
        if dim == 0 {
            return Err(Error::input("member dimension must be at least 1"));
        }
        for m in &members {
            if m.dim != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: m.dim,
                });
            }
            for t in &m.terms {
                if !(t.weight > 0.0 && t.weight.is_finite()) {
                    return Err(Error::input("rank-one weights must be positive and finite"));
                }
                if t.vector.max_index().is_some_and(|i| i >= dim) {
                    return Err(Error::input("rank-one support outside member dimension"));
                }
            }
        }
        Ok(Self {
            dim,
            members,
            aggregate: OnceLock::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn members(&self) -> &[Curvature] {
        &self.members
    }

    pub fn member(&self, i: usize) -> &Curvature {
        &self.members[i]
    }

    pub fn total_rank(&self) -> usize {
        self.members.iter().map(Curvature::rank).sum()
    }

    /// `H = (1/n) Σ H_i`, computed on first call.
    pub fn aggregate(&self) -> &SymMatrix {
        self.aggregate.get_or_init(|| {
            let mut h = SymMatrix::zeros(self.dim);
            let scale = 1.0 / self.members.len() as f64;
            for m in &self.members {
                m.accumulate_dense(scale, &mut h);
            }
            h
        })
    }

    /// `out += scale · Σ_{i ∈ indices} H_i x`.
    pub fn apply_members_add(&self, indices: &[usize], x: &[f64], scale: f64, out: &mut [f64]) {
        for &i in indices {
            self.members[i].apply_add(x, scale, out);
        }
    }

    /// `H x` without materializing `H`.
    pub fn apply_aggregate(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        let scale = 1.0 / self.members.len() as f64;
        for m in &self.members {
            m.apply_add(x, scale, &mut out);
        }
        out
    }

    pub fn aggregate_trace(&self) -> f64 {
        self.members.iter().map(Curvature::trace).sum::<f64>() / self.members.len() as f64
    }

    /// `λ_max(H)`. When the total factor rank is below `d` this works on the
    /// factor Gram matrix `FᵀF`, which shares the nonzero spectrum of `H = F Fᵀ`.
    pub fn aggregate_max_eigenvalue(&self) -> Result<f64> {
        let rank = self.total_rank();
        if rank == 0 {
            return Ok(0.0);
        }
        if rank >= self.dim {
            return max_eigenvalue(self.aggregate());
        }
        let n = self.members.len() as f64;
        let terms: Vec<&RankOne> = self.members.iter().flat_map(|m| &m.terms).collect();
        let mut g = SymMatrix::zeros(rank);
        for a in 0..rank {
            for b in a..rank {
                let v = (terms[a].weight * terms[b].weight).sqrt() / n
                    * terms[a].vector.dot(&terms[b].vector);
                g.set(a, b, v);
            }
        }
        max_eigenvalue(&g)
    }

    /// Smallest and largest eigenvalue of `H` over the full `d`-dimensional
    /// spectrum (rank deficiency shows up as a zero minimum).
    pub fn aggregate_extremes(&self) -> Result<(f64, f64)> {
        let eig = sym_eig(self.aggregate())?;
        Ok((eig.min(), eig.max()))
    }

    /// `(I + κH) v` for every factor vector, in member-major order.
    fn sam_images(&self, kappa: f64) -> Vec<Vec<f64>> {
        self.members
            .iter()
            .flat_map(|m| &m.terms)
            .map(|t| {
                let mut dense = vec![0.0; self.dim];
                t.vector.axpy_into(1.0, &mut dense);
                if kappa != 0.0 {
                    let hv = self.apply_aggregate(&dense);
                    for (d, h) in dense.iter_mut().zip(&hv) {
                        *d += kappa * h;
                    }
                }
                dense
            })
            .collect()
    }
}

/// Builds a family from dense members, checking PSD-ness of each.
pub fn build_family(members: Vec<SymMatrix>) -> Result<HessianFamily> {
    if members.is_empty() {
        return Err(Error::input("a Hessian family needs at least one member"));
    }
    let dim = members[0].dim();
    let factored = members
        .iter()
        .enumerate()
        .map(|(index, m)| {
            if m.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: m.dim(),
                });
            }
            Curvature::from_matrix(m, MEMBER_PSD_TOLERANCE).map_err(|e| match e {
                Error::NotPsd { min_eigenvalue, .. } => Error::NotPsd {
                    index,
                    min_eigenvalue,
                },
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    HessianFamily::from_curvatures(factored)
}

fn check_construction(n: usize, sigma: usize, target: f64) -> Result<()> {
    if n == 0 || sigma == 0 || sigma > n {
        return Err(Error::input(format!(
            "coherence target sigma={sigma} must lie in [1, n={n}]"
        )));
    }
    if !(target > 0.0 && target.is_finite()) {
        return Err(Error::input("target sharpness must be positive"));
    }
    Ok(())
}

/// Experiment family: `sigma` copies of `m e₁e₁ᵀ` followed by `n - sigma`
/// distinct spikes `m e₂e₂ᵀ, m e₃e₃ᵀ, …`, with `m = target · n / sigma`.
/// `λ_max(H) = target` and the coherence measure is exactly `sigma`.
pub fn build_spike_family(
    n: usize,
    sigma: usize,
    d: usize,
    target_sharpness: f64,
) -> Result<HessianFamily> {
    check_construction(n, sigma, target_sharpness)?;
    let needed = n - sigma + 1;
    if d < needed {
        return Err(Error::input(format!(
            "dimension d={d} cannot host {} spike directions (need d >= {needed})",
            n - sigma
        )));
    }
    let m = target_sharpness * n as f64 / sigma as f64;
    let members = (0..n)
        .map(|i| {
            let axis = if i < sigma { 0 } else { i - sigma + 1 };
            Curvature::spike(d, axis, m)
        })
        .collect();
    HessianFamily::from_curvatures(members)
}

/// Lower-bound family: `sigma` copies of `m e₁e₁ᵀ` and `n - sigma` zero
/// members, `m = lambda1 · n / sigma`.
pub fn build_lower_bound_family(
    n: usize,
    sigma: usize,
    d: usize,
    lambda1: f64,
) -> Result<HessianFamily> {
    check_construction(n, sigma, lambda1)?;
    if d == 0 {
        return Err(Error::input("dimension must be at least 1"));
    }
    let m = lambda1 * n as f64 / sigma as f64;
    let members = (0..n)
        .map(|i| {
            if i < sigma {
                Curvature::spike(d, 0, m)
            } else {
                Curvature::zero(d)
            }
        })
        .collect();
    HessianFamily::from_curvatures(members)
}

/// Which coherence matrix to build.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CoherenceFlavor {
    /// `S_ij = √Tr(H_i H_j)`.
    Plain,
    /// `S_ij = √Tr((I+κH) H_i (I+κH) H_j)` with `κ = ρ/α`.
    Sam { rho_over_alpha: f64 },
}

impl CoherenceFlavor {
    pub fn kappa(&self) -> f64 {
        match self {
            CoherenceFlavor::Plain => 0.0,
            CoherenceFlavor::Sam { rho_over_alpha } => *rho_over_alpha,
        }
    }

    fn validate(&self) -> Result<()> {
        let k = self.kappa();
        if !(k >= 0.0 && k.is_finite()) {
            return Err(Error::input(format!(
                "rho/alpha must be nonnegative, got {k}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CoherenceMatrix {
    pub flavor: CoherenceFlavor,
    pub entries: SymMatrix,
}

impl CoherenceMatrix {
    pub fn n(&self) -> usize {
        self.entries.dim()
    }

    /// Largest absolute off-diagonal entry.
    pub fn max_off_diagonal(&self) -> f64 {
        let n = self.n();
        let mut best: f64 = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                best = best.max(self.entries.get(i, j).abs());
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoherenceSummary {
    pub lambda_max_s: f64,
    /// `max_i λ_max(H_i)`, or `max_i λ_max((I+κH)H_i)` for the SAM flavor.
    pub max_elementwise: f64,
    pub sigma: f64,
}

/// Clamps roundoff negatives; the factored traces are sums of squares so
/// this never triggers for well-formed input.
fn clamped_sqrt(x: f64) -> f64 {
    x.max(0.0).sqrt()
}

pub fn coherence_matrix(
    family: &HessianFamily,
    flavor: CoherenceFlavor,
) -> Result<CoherenceMatrix> {
    flavor.validate()?;
    let n = family.len();
    let mut s = SymMatrix::zeros(n);
    match flavor {
        CoherenceFlavor::Plain => {
            for i in 0..n {
                for j in i..n {
                    let tp = family.members[i].trace_product(&family.members[j]);
                    s.set(i, j, clamped_sqrt(tp));
                }
            }
        }
        CoherenceFlavor::Sam { rho_over_alpha } => {
            let images = family.sam_images(rho_over_alpha);
            let offsets = term_offsets(family);
            for i in 0..n {
                for j in i..n {
                    let mut tp = 0.0;
                    for ta in &family.members[i].terms {
                        for (b, tb) in family.members[j].terms.iter().enumerate() {
                            let x = ta.vector.dot_dense(&images[offsets[j] + b]);
                            tp += ta.weight * tb.weight * x * x;
                        }
                    }
                    s.set(i, j, clamped_sqrt(tp));
                }
            }
        }
    }
    Ok(CoherenceMatrix { flavor, entries: s })
}

fn term_offsets(family: &HessianFamily) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(family.len());
    let mut acc = 0;
    for m in &family.members {
        offsets.push(acc);
        acc += m.rank();
    }
    offsets
}

/// `σ = λ_max(S) / max_i λ_max(H_i)` (or the SAM analogue).
pub fn coherence_summary(
    family: &HessianFamily,
    flavor: CoherenceFlavor,
) -> Result<CoherenceSummary> {
    let s = coherence_matrix(family, flavor)?;
    let max_elementwise = match flavor {
        CoherenceFlavor::Plain => family
            .members
            .iter()
            .map(Curvature::top_eigenvalue)
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(0.0, f64::max),
        CoherenceFlavor::Sam { rho_over_alpha } => {
            let images = family.sam_images(rho_over_alpha);
            let offsets = term_offsets(family);
            let mut best: f64 = 0.0;
            for (i, m) in family.members.iter().enumerate() {
                let r = m.rank();
                if r == 0 {
                    continue;
                }
                // Fᵢᵀ A Fᵢ shares the spectrum of A^{1/2} Hᵢ A^{1/2}.
                let mut g = SymMatrix::zeros(r);
                for a in 0..r {
                    for b in a..r {
                        let (ta, tb) = (&m.terms[a], &m.terms[b]);
                        let x = ta.vector.dot_dense(&images[offsets[i] + b]);
                        g.set(a, b, (ta.weight * tb.weight).sqrt() * x);
                    }
                }
                best = best.max(max_eigenvalue(&g)?);
            }
            best
        }
    };
    if max_elementwise <= 0.0 {
        return Err(Error::input(
            "coherence measure is undefined for an all-zero family",
        ));
    }
    let lambda_max_s = max_eigenvalue(&s.entries)?;
    Ok(CoherenceSummary {
        lambda_max_s,
        max_elementwise,
        sigma: lambda_max_s / max_elementwise,
    })
}

/// `H + κH²`, the curvature SAM effectively descends.
pub fn sam_effective_hessian(h: &SymMatrix, rho_over_alpha: f64) -> SymMatrix {
    if rho_over_alpha == 0.0 {
        return h.clone();
    }
    h.add_scaled(&h.square(), rho_over_alpha)
        .expect("square preserves dimension")
}

/// Scalars consumed by the closed-form thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub n: usize,
    pub batch_size: usize,
    pub eta: f64,
    pub rho_over_alpha: f64,
    pub lambda_max: f64,
    pub lambda_min: f64,
    pub sigma: f64,
    /// Convergence margin in (0, 1).
    pub epsilon: f64,
}

impl Default for BoundInputs {
    fn default() -> Self {
        Self {
            n: 1,
            batch_size: 1,
            eta: 1.0,
            rho_over_alpha: 0.0,
            lambda_max: 0.0,
            lambda_min: 0.0,
            sigma: 1.0,
            epsilon: 0.5,
        }
    }
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.batch_size > self.n {
            return Err(Error::input(format!(
                "batch size B={} must lie in [1, n={}]",
                self.batch_size, self.n
            )));
        }
        if self.rho_over_alpha.is_nan() || self.rho_over_alpha < 0.0 {
            return Err(Error::input("rho/alpha must be nonnegative"));
        }
        if self.lambda_min > self.lambda_max {
            return Err(Error::input("lambda_min exceeds lambda_max"));
        }
        Ok(())
    }

    /// `n/B - 1`.
    fn sampling_noise(&self) -> f64 {
        self.n as f64 / self.batch_size as f64 - 1.0
    }
}

/// Step size at and above which linearized SGD provably diverges:
/// `η* = (σ/λ_max)(n/B - 1)^{-1/2}`. Returns `+∞` at full batch.
pub fn sgd_divergence_threshold(inputs: &BoundInputs) -> Result<f64> {
    inputs.validate()?;
    let noise = inputs.sampling_noise();
    if noise <= 0.0 || inputs.lambda_max <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(inputs.sigma / inputs.lambda_max / noise.sqrt())
}

/// SAM analogue: the SGD threshold scaled by `(1 + κ λ_min)^{-1}`.
pub fn sam_divergence_threshold(inputs: &BoundInputs) -> Result<f64> {
    let sgd = sgd_divergence_threshold(inputs)?;
    Ok(sgd / (1.0 + inputs.rho_over_alpha * inputs.lambda_min))
}

/// `λ₁(1 + κλ₁) ≤ 2σ/η · (σ + n/B - 1)^{-1}`; true predicts bounded dynamics
/// on the lower-bound family.
pub fn sam_lower_bound_stable(inputs: &BoundInputs) -> bool {
    let l = inputs.lambda_max;
    let lhs = l * (1.0 + inputs.rho_over_alpha * l);
    let rhs = 2.0 * inputs.sigma / inputs.eta / (inputs.sigma + inputs.sampling_noise());
    lhs <= rhs
}

/// `ε/η ≤ λ_i + κλ_i² ≤ (2-ε)/η` for every eigenvalue.
pub fn sam_convergence_band(eigenvalues: &[f64], inputs: &BoundInputs) -> bool {
    let lo = inputs.epsilon / inputs.eta;
    let hi = (2.0 - inputs.epsilon) / inputs.eta;
    eigenvalues.iter().all(|&l| {
        let eff = l + inputs.rho_over_alpha * l * l;
        lo <= eff && eff <= hi
    })
}

/// Frobenius distance helper for tests and diagnostics.
pub fn relative_frobenius_error(approx: &SymMatrix, exact: &SymMatrix) -> f64 {
    let diff = approx.add_scaled(exact, -1.0).expect("same dimension");
    diff.frobenius_norm() / exact.frobenius_norm().max(f64::MIN_POSITIVE)
}
