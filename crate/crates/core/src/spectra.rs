//! Dense symmetric linear algebra.
//!
//! Every curvature object in the crate (per-example Hessians, their mean,
//! coherence matrices, feature covariances) is a real symmetric matrix, so
//! this module only supports that case:
//!
//! - [`SymMatrix`]: row-major storage, `data[i * dim + j] = M[i, j]`, kept
//!   exactly symmetric by mirroring the upper triangle on construction.
//! - [`sym_eig`]: cyclic Jacobi rotations. Stops once the off-diagonal
//!   Frobenius norm drops below `1e-12 * ‖M‖_F`, or fails after 100 sweeps.
//! - [`max_eigenvalue`]: Jacobi for small matrices, restarted Lanczos for
//!   large ones (e.g. a 1000 × 1000 coherence matrix where only the top
//!   eigenvalue is needed).

use crate::error::{Error, Result};

/// Relative off-diagonal tolerance at which Jacobi sweeps stop.
pub const JACOBI_TOLERANCE: f64 = 1e-12;
/// Maximum number of full Jacobi sweeps.
pub const JACOBI_MAX_SWEEPS: usize = 100;
/// Relative Ritz residual at which Lanczos stops.
pub const LANCZOS_TOLERANCE: f64 = 1e-10;
/// Krylov basis size per Lanczos cycle.
pub const LANCZOS_BASIS: usize = 64;
/// Lanczos restart cap.
pub const LANCZOS_MAX_RESTARTS: usize = 200;
/// Matrices up to this dimension get a full Jacobi solve in [`max_eigenvalue`].
pub const DENSE_EIG_LIMIT: usize = 128;

/// A real symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    /// Builds a matrix from row-major data. Only the upper triangle is read;
    /// the lower triangle is overwritten with its mirror image.
    pub fn from_row_major(dim: usize, mut data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::input("matrix dimension must be at least 1"));
        }
        if data.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                got: data.len(),
            });
        }
        for i in 0..dim {
            for j in (i + 1)..dim {
                data[j * dim + i] = data[i * dim + j];
            }
        }
        Ok(Self { dim, data })
    }

    /// Builds a matrix from rows; see [`SymMatrix::from_row_major`].
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        let mut data = Vec::with_capacity(dim * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::from_row_major(dim, data)
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 1, "matrix dimension must be at least 1");
        Self {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.data[i * dim + i] = 1.0;
        }
        m
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len());
        for (i, &v) in values.iter().enumerate() {
            m.data[i * m.dim + i] = v;
        }
        m
    }

    /// `scale * v vᵀ`.
    pub fn outer(v: &[f64], scale: f64) -> Self {
        let dim = v.len();
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            for j in 0..dim {
                m.data[i * dim + j] = scale * v[i] * v[j];
            }
        }
        m
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    /// Sets `M[i, j]` and `M[j, i]`.
    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.dim + j] = value;
        self.data[j * self.dim + i] = value;
    }

    /// Row-major view of all entries.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            dim: self.dim,
            data: self.data.iter().map(|x| c * x).collect(),
        }
    }

    /// `self + c * other`.
    pub fn add_scaled(&self, other: &SymMatrix, c: f64) -> Result<Self> {
        self.check_same_dim(other)?;
        Ok(Self {
            dim: self.dim,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + c * b)
                .collect(),
        })
    }

    pub fn mat_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(
            x.len(),
            self.dim,
            "vector length must match matrix dimension"
        );
        self.data
            .chunks_exact(self.dim)
            .map(|row| dot(row, x))
            .collect()
    }

    /// `M²`, symmetric for symmetric `M`.
    pub fn square(&self) -> Self {
        let n = self.dim;
        let mut out = Self::zeros(n);
        for i in 0..n {
            for j in i..n {
                let v = dot(self.row(i), self.row(j));
                out.set(i, j, v);
            }
        }
        out
    }

    /// Largest absolute difference between corresponding entries.
    pub fn max_abs_diff(&self, other: &SymMatrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn check_same_dim(&self, other: &SymMatrix) -> Result<()> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: other.dim,
            });
        }
        Ok(())
    }

    fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|x| !x.is_finite()) {
            Some(k) => Err(Error::NonFinite {
                row: k / self.dim,
                col: k % self.dim,
            }),
            None => Ok(()),
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Eigenvalues sorted descending with matching orthonormal eigenvectors.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    /// `eigenvectors[k]` belongs to `eigenvalues[k]`.
    pub eigenvectors: Vec<Vec<f64>>,
}

impl EigenDecomposition {
    pub fn max(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn min(&self) -> f64 {
        *self
            .eigenvalues
            .last()
            .expect("decomposition is never empty")
    }

    /// `V Λ Vᵀ`.
    pub fn reconstruct(&self) -> SymMatrix {
        let n = self.eigenvalues.len();
        let mut m = SymMatrix::zeros(n);
        for i in 0..n {
            for j in i..n {
                let v = self
                    .eigenvalues
                    .iter()
                    .zip(&self.eigenvectors)
                    .map(|(lam, vec)| lam * vec[i] * vec[j])
                    .sum();
                m.set(i, j, v);
            }
        }
        m
    }
}

/// Full eigendecomposition by cyclic Jacobi rotations.
pub fn sym_eig(m: &SymMatrix) -> Result<EigenDecomposition> {
    m.check_finite()?;
    let n = m.dim;
    let mut a = m.data.clone();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let target = JACOBI_TOLERANCE * m.frobenius_norm();
    let off_norm = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += 2.0 * a[i * n + j] * a[i * n + j];
            }
        }
        s.sqrt()
    };

    let mut sweeps = 0;
    loop {
        let off = off_norm(&a);
        if off <= target {
            break;
        }
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::NotConverged {
                method: "jacobi",
                iterations: sweeps,
                residual: off,
            });
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                a[p * n + p] = app - t * apq;
                a[q * n + q] = aqq + t * apq;
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for r in 0..n {
                    if r == p || r == q {
                        continue;
                    }
                    let arp = a[r * n + p];
                    let arq = a[r * n + q];
                    let new_rp = c * arp - s * arq;
                    let new_rq = s * arp + c * arq;
                    a[r * n + p] = new_rp;
                    a[p * n + r] = new_rp;
                    a[r * n + q] = new_rq;
                    a[q * n + r] = new_rq;
                }
                for r in 0..n {
                    let vrp = v[r * n + p];
                    let vrq = v[r * n + q];
                    v[r * n + p] = c * vrp - s * vrq;
                    v[r * n + q] = s * vrp + c * vrq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps ties in index order, so diagonal input returns unit vectors.
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let eigenvalues = order.iter().map(|&k| a[k * n + k]).collect();
    let eigenvectors = order
        .iter()
        .map(|&k| (0..n).map(|r| v[r * n + k]).collect())
        .collect();
    Ok(EigenDecomposition {
        eigenvalues,
        eigenvectors,
    })
}

/// `Tr(AB) = Σ_ij A_ij B_ij`, exact for symmetric arguments.
pub fn trace_product(a: &SymMatrix, b: &SymMatrix) -> Result<f64> {
    a.check_same_dim(b)?;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum())
}

/// Largest eigenvalue.
pub fn max_eigenvalue(m: &SymMatrix) -> Result<f64> {
    if m.dim <= DENSE_EIG_LIMIT {
        return Ok(sym_eig(m)?.max());
    }
    m.check_finite()?;
    lanczos_max(m)
}

/// Explicitly restarted Lanczos with full reorthogonalization. Each cycle
/// builds a Krylov basis of up to [`LANCZOS_BASIS`] vectors, takes the top
/// Ritz pair of the tridiagonal projection, and restarts from its Ritz
/// vector until `β·|s_last| ≤ LANCZOS_TOLERANCE·|θ|`. Unlike power iteration
/// this does not stall when the top eigenvalues are nearly degenerate.
fn lanczos_max(m: &SymMatrix) -> Result<f64> {
    let n = m.dim;
    let basis_cap = n.min(LANCZOS_BASIS);
    let breakdown = 1e-14 * m.frobenius_norm().max(f64::MIN_POSITIVE);

    // Deterministic start vector with no special symmetry.
    let mut v: Vec<f64> = (0..n)
        .map(|i| 1.0 + 0.5 * ((i as f64 * 0.618_033_988_749_895).fract() - 0.5))
        .collect();
    let v_norm = norm(&v);
    v.iter_mut().for_each(|x| *x /= v_norm);

    let mut residual = f64::INFINITY;
    for _ in 0..LANCZOS_MAX_RESTARTS {
        let mut basis = vec![v.clone()];
        let mut alphas = Vec::with_capacity(basis_cap);
        let mut betas: Vec<f64> = Vec::with_capacity(basis_cap);
        let last_beta = loop {
            let j = basis.len() - 1;
            let mut w = m.mat_vec(&basis[j]);
            let alpha = dot(&basis[j], &w);
            alphas.push(alpha);
            // Two Gram-Schmidt passes against the whole basis.
            for _ in 0..2 {
                for q in &basis {
                    let c = dot(q, &w);
                    w.iter_mut().zip(q).for_each(|(wi, qi)| *wi -= c * qi);
                }
            }
            let beta = norm(&w);
            if beta <= breakdown || basis.len() == basis_cap {
                break beta;
            }
            betas.push(beta);
            w.iter_mut().for_each(|x| *x /= beta);
            basis.push(w);
        };

        let t = alphas.len();
        let mut tri = SymMatrix::zeros(t);
        for (i, &a) in alphas.iter().enumerate() {
            tri.set(i, i, a);
        }
        for (i, &b) in betas.iter().enumerate() {
            tri.set(i, i + 1, b);
            tri.set(i + 1, i, b);
        }
        let eig = sym_eig(&tri)?;
        let theta = eig.max();
        let s = &eig.eigenvectors[0];
        residual = last_beta * s[t - 1].abs();
        if last_beta <= breakdown || residual <= LANCZOS_TOLERANCE * theta.abs().max(breakdown) {
            return Ok(theta);
        }

        v.iter_mut().for_each(|x| *x = 0.0);
        for (q, &c) in basis.iter().zip(s) {
            v.iter_mut().zip(q).for_each(|(vi, qi)| *vi += c * qi);
        }
        let v_norm = norm(&v);
        v.iter_mut().for_each(|x| *x /= v_norm);
    }
    Err(Error::NotConverged {
        method: "Lanczos",
        iterations: LANCZOS_MAX_RESTARTS * basis_cap,
        residual,
    })
}

/// `λ_min(M) ≥ -tol · max(1, |λ_max(M)|)`.
pub fn is_psd(m: &SymMatrix, tol: f64) -> Result<bool> {
    let eig = sym_eig(m)?;
    Ok(eig.min() >= -tol * eig.max().abs().max(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(dim: usize, seed: u64) -> SymMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..dim * dim)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        SymMatrix::from_row_major(dim, data).unwrap()
    }

    fn orthonormality_error(eig: &EigenDecomposition) -> f64 {
        let n = eig.eigenvalues.len();
        let mut s = 0.0;
        for a in 0..n {
            for b in 0..n {
                let target = if a == b { 1.0 } else { 0.0 };
                s += (dot(&eig.eigenvectors[a], &eig.eigenvectors[b]) - target).powi(2);
            }
        }
        s.sqrt()
    }

    #[test]
    fn construction_mirrors_upper_triangle() {
        let m = SymMatrix::from_row_major(2, vec![1.0, 2.0, 99.0, 3.0]).unwrap();
        assert_eq!(m.get(1, 0), 2.0);
        assert!(SymMatrix::from_row_major(0, vec![]).is_err());
        assert!(SymMatrix::from_row_major(2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn identity_eigenvalues() {
        let eig = sym_eig(&SymMatrix::identity(3)).unwrap();
        assert_eq!(eig.eigenvalues, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn diagonal_eigenpairs() {
        let eig = sym_eig(&SymMatrix::diagonal(&[3.0, 1.0])).unwrap();
        assert_eq!(eig.eigenvalues, vec![3.0, 1.0]);
        assert_eq!(eig.eigenvectors[0], vec![1.0, 0.0]);
        assert_eq!(eig.eigenvectors[1], vec![0.0, 1.0]);
    }

    #[test]
    fn two_by_two_matches_characteristic_polynomial() {
        // λ² - 4λ + 3 = 0 → λ ∈ {3, 1}; eigenvectors (1,1)/√2 and (1,-1)/√2.
        let m = SymMatrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let eig = sym_eig(&m).unwrap();
        assert!((eig.eigenvalues[0] - 3.0).abs() < 1e-12);
        assert!((eig.eigenvalues[1] - 1.0).abs() < 1e-12);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let v0 = &eig.eigenvectors[0];
        let v1 = &eig.eigenvectors[1];
        assert!((v0[0].abs() - h).abs() < 1e-12 && (v0[0] - v0[1]).abs() < 1e-12);
        assert!((v1[0].abs() - h).abs() < 1e-12 && (v1[0] + v1[1]).abs() < 1e-12);
    }

    #[test]
    fn zero_matrix_gives_identity_vectors() {
        let eig = sym_eig(&SymMatrix::zeros(3)).unwrap();
        assert_eq!(eig.eigenvalues, vec![0.0; 3]);
        assert_eq!(eig.eigenvectors[2], vec![0.0, 0.0, 1.0]);
        let scalar = sym_eig(&SymMatrix::diagonal(&[-4.0])).unwrap();
        assert_eq!(scalar.eigenvalues, vec![-4.0]);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let m = SymMatrix::from_rows(&[vec![1.0, f64::NAN], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(sym_eig(&m), Err(Error::NonFinite { .. })));
        assert!(max_eigenvalue(&m).is_err());
    }

    #[test]
    fn trace_product_examples() {
        let i2 = SymMatrix::identity(2);
        assert_eq!(trace_product(&i2, &i2).unwrap(), 2.0);
        let e1 = SymMatrix::outer(&[1.0, 0.0], 1.0);
        let e2 = SymMatrix::outer(&[0.0, 1.0], 1.0);
        assert_eq!(trace_product(&e1, &e2).unwrap(), 0.0);
        // [[2,1],[1,2]]·[[1,0],[0,3]] = [[2,3],[1,6]], trace 8.
        let a = SymMatrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let b = SymMatrix::diagonal(&[1.0, 3.0]);
        assert_eq!(trace_product(&a, &b).unwrap(), 8.0);
        assert!(trace_product(&a, &SymMatrix::identity(3)).is_err());
    }

    #[test]
    fn max_eigenvalue_examples() {
        assert_eq!(
            max_eigenvalue(&SymMatrix::diagonal(&[5.0, 2.0, 1.0])).unwrap(),
            5.0
        );
        let spike = SymMatrix::outer(&[1.0, 0.0, 0.0], 200.0);
        assert_eq!(max_eigenvalue(&spike).unwrap(), 200.0);
        let m = random_symmetric(4, 7);
        let full = sym_eig(&m).unwrap().max();
        assert!((max_eigenvalue(&m).unwrap() - full).abs() < 1e-8);
    }

    #[test]
    fn lanczos_agrees_with_jacobi() {
        for seed in 0..3 {
            let m = random_symmetric(DENSE_EIG_LIMIT + 20, seed).scaled(-1.0);
            let jac = sym_eig(&m).unwrap().max();
            let pow = max_eigenvalue(&m).unwrap();
            assert!(
                (jac - pow).abs() < 1e-6 * jac.abs().max(1.0),
                "{jac} vs {pow}"
            );
        }
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g: Vec<f64> = (0..200).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = SymMatrix::outer(&g, 1.0);
        assert!((max_eigenvalue(&m).unwrap() - dot(&g, &g)).abs() < 1e-8 * dot(&g, &g));
        assert_eq!(max_eigenvalue(&SymMatrix::zeros(200)).unwrap(), 0.0);
    }

    #[test]
    fn lanczos_handles_clustered_top_eigenvalues() {
        // Constant blocks: block k contributes eigenvalue size_k * value_k.
        let blocks = [(250, 1.0), (250, 1.0 + 1e-7), (249, 1.0), (251, 0.999)];
        let n: usize = blocks.iter().map(|b| b.0).sum();
        let mut m = SymMatrix::zeros(n);
        let mut start = 0;
        for &(size, value) in &blocks {
            for i in start..start + size {
                for j in start..start + size {
                    m.set(i, j, value);
                }
            }
            start += size;
        }
        let exact = blocks
            .iter()
            .map(|&(s, v)| s as f64 * v)
            .fold(0.0, f64::max);
        let got = max_eigenvalue(&m).unwrap();
        assert!((got - exact).abs() < 1e-9 * exact, "{got} vs {exact}");
    }

    #[test]
    fn psd_examples() {
        assert!(is_psd(&SymMatrix::identity(3), 1e-9).unwrap());
        assert!(!is_psd(&SymMatrix::diagonal(&[1.0, -1.0]), 1e-9).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let g: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            assert!(is_psd(&SymMatrix::outer(&g, 1.0), 1e-9).unwrap());
        }
    }

    fn arb_symmetric() -> impl Strategy<Value = SymMatrix> {
        (2usize..=50).prop_flat_map(|n| {
            proptest::collection::vec(-10.0f64..10.0, n * n)
                .prop_map(move |data| SymMatrix::from_row_major(n, data).unwrap())
        })
    }

    fn arb_psd_pair() -> impl Strategy<Value = (SymMatrix, SymMatrix)> {
        (2usize..=8).prop_flat_map(|n| {
            let factor = proptest::collection::vec(-3.0f64..3.0, n * n);
            (factor.clone(), factor).prop_map(move |(fa, fb)| {
                let gram = |f: &[f64]| {
                    let mut m = SymMatrix::zeros(n);
                    for i in 0..n {
                        for j in i..n {
                            m.set(i, j, dot(&f[i * n..(i + 1) * n], &f[j * n..(j + 1) * n]));
                        }
                    }
                    m
                };
                (gram(&fa), gram(&fb))
            })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn eig_reconstructs_and_is_orthonormal(m in arb_symmetric()) {
            let eig = sym_eig(&m).unwrap();
            let rec = eig.reconstruct().add_scaled(&m, -1.0).unwrap().frobenius_norm();
            prop_assert!(rec / m.frobenius_norm().max(1.0) <= 1e-9);
            prop_assert!(orthonormality_error(&eig) <= 1e-9);
            prop_assert!(eig.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        }

        #[test]
        fn trace_product_is_symmetric(a in arb_symmetric(), seed in any::<u64>()) {
            let b = random_symmetric(a.dim(), seed);
            prop_assert_eq!(trace_product(&a, &b).unwrap(), trace_product(&b, &a).unwrap());
        }

        #[test]
        fn trace_product_of_psd_is_nonnegative((a, b) in arb_psd_pair()) {
            let tp = trace_product(&a, &b).unwrap();
            prop_assert!(tp >= -1e-12 * a.frobenius_norm() * b.frobenius_norm());
        }

        #[test]
        fn max_eigenvalue_is_positively_homogeneous(m in arb_symmetric(), c in 0.01f64..100.0) {
            let base = max_eigenvalue(&m).unwrap();
            let scaled = max_eigenvalue(&m.scaled(c)).unwrap();
            prop_assert!((scaled - c * base).abs() <= 1e-9 * (c * base).abs().max(1e-300) + 1e-12 * c * m.frobenius_norm());
        }
    }
}
