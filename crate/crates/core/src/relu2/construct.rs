use std::collections::HashSet;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::TwoLayerNet;
use crate::error::{Error, Result};

/// Standard deviation of the Gaussian noise used to initialize near a
/// constructed solution (variance 0.01).
pub const DEFAULT_INIT_NOISE_STD: f64 = 0.1;

/// `n` inputs in `{-1, +1}^d` with labels `y = x[0] · x[1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    d: usize,
    x: Vec<f64>,
    y: Vec<f64>,
}

impl Dataset {
    /// Builds a dataset from ±1 rows, labelling each by the product of its
    /// first two coordinates.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || d < 2 {
            return Err(Error::input(
                "dataset needs at least one row of dimension >= 2",
            ));
        }
        let mut x = Vec::with_capacity(rows.len() * d);
        for row in rows {
            if row.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: row.len(),
                });
            }
            if row.iter().any(|&v| v != 1.0 && v != -1.0) {
                return Err(Error::input("inputs must be +1 or -1"));
            }
            x.extend_from_slice(row);
        }
        let y = rows.iter().map(|r| r[0] * r[1]).collect();
        Ok(Self { d, x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn label(&self, i: usize) -> f64 {
        self.y[i]
    }

    pub fn labels(&self) -> &[f64] {
        &self.y
    }

    pub fn has_duplicates(&self) -> bool {
        let mut seen = HashSet::with_capacity(self.len());
        (0..self.len()).any(|i| {
            let key: Vec<bool> = self.input(i).iter().map(|&v| v > 0.0).collect();
            !seen.insert(key)
        })
    }
}

pub fn generate_dataset<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Result<Dataset> {
    if d < 2 || n == 0 {
        return Err(Error::input(format!(
            "need n >= 1 and d >= 2, got n={n}, d={d}"
        )));
    }
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            (0..d)
                .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                .collect()
        })
        .collect();
    Dataset::from_rows(&rows)
}

/// The `(C, r)` solution: hidden unit `j < 2^C` encodes the sign pattern
/// given by the bits of `j` on the first `C` coordinates, fires with value
/// `r` on matching inputs and outputs `(-1)^{a1+a2} / r`. Remaining units
/// are zero.
pub fn build_cr_solution(c: usize, r: f64, d: usize, d2: usize) -> Result<TwoLayerNet> {
    if c < 2 || c > d {
        return Err(Error::input(format!("need 2 <= C <= d, got C={c}, d={d}")));
    }
    if c >= usize::BITS as usize || d2 < (1usize << c) {
        return Err(Error::input(format!(
            "hidden width {d2} cannot hold 2^{c} units"
        )));
    }
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::input(format!("scale r must be positive, got {r}")));
    }
    let mut net = TwoLayerNet::zeros(d, d2);
    for j in 0..(1usize << c) {
        let sign = |i: usize| if (j >> i) & 1 == 1 { -1.0 } else { 1.0 };
        for i in 0..c {
            net.w1[j * d + i] = r * sign(i);
        }
        net.b[j] = -r * (c as f64 - 1.0);
        net.w2[j] = sign(0) * sign(1) / r;
    }
    Ok(net)
}

/// Unit `i` fires only on sample `i`: `W1[i] = (r/d) x_i`, bias
/// `-r(d-2)/d - r/(2d)`, so the own pre-activation is `3r/(2d)` and every
/// other distinct ±1 input gives at most `-r/(2d)`.
pub fn build_memorizing_solution(dataset: &Dataset, r: f64, d2: usize) -> Result<TwoLayerNet> {
    let (n, d) = (dataset.len(), dataset.dim());
    if d2 < n {
        return Err(Error::input(format!(
            "hidden width {d2} is smaller than n={n}"
        )));
    }
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::input(format!("scale r must be positive, got {r}")));
    }
    if dataset.has_duplicates() {
        return Err(Error::input("duplicate inputs cannot be memorized"));
    }
    let df = d as f64;
    let margin = r / (2.0 * df);
    let own = 3.0 * r / (2.0 * df);
    let mut net = TwoLayerNet::zeros(d, d2);
    for i in 0..n {
        for (k, &xk) in dataset.input(i).iter().enumerate() {
            net.w1[i * d + k] = r / df * xk;
        }
        net.b[i] = -r * (df - 2.0) / df - margin;
        net.w2[i] = dataset.label(i) / own;
    }
    Ok(net)
}

/// Fresh network with every parameter drawn from `U(-1/√fan_in, 1/√fan_in)`:
/// fan-in `d` for `W1` and `b`, `d2` for `W2`.
pub fn random_init_net<R: Rng + ?Sized>(d: usize, d2: usize, rng: &mut R) -> Result<TwoLayerNet> {
    if d == 0 || d2 == 0 {
        return Err(Error::input("network dimensions must be positive"));
    }
    let a1 = 1.0 / (d as f64).sqrt();
    let a2 = 1.0 / (d2 as f64).sqrt();
    let w1 = (0..d * d2).map(|_| rng.random_range(-a1..a1)).collect();
    let b = (0..d2).map(|_| rng.random_range(-a1..a1)).collect();
    let w2 = (0..d2).map(|_| rng.random_range(-a2..a2)).collect();
    TwoLayerNet::new(d, d2, w1, w2, b)
}

/// Adds i.i.d. `N(0, noise_std²)` to every parameter.
pub fn perturb_net<R: Rng + ?Sized>(
    net: &TwoLayerNet,
    noise_std: f64,
    rng: &mut R,
) -> Result<TwoLayerNet> {
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::input(format!(
            "noise std must be nonnegative, got {noise_std}"
        )));
    }
    if noise_std == 0.0 {
        return Ok(net.clone());
    }
    let noise: Vec<f64> = (0..net.param_count())
        .map(|_| noise_std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok(net.offset(&noise, 1.0))
}

#[cfg(test)]
mod tests {
    use super::super::forward;
    use super::*;
    use crate::rng::substream;

    fn all_inputs(d: usize) -> impl Iterator<Item = Vec<f64>> {
        (0..1usize << d).map(move |m| {
            (0..d)
                .map(|k| if (m >> k) & 1 == 1 { -1.0 } else { 1.0 })
                .collect()
        })
    }

    #[test]
    fn labels_follow_the_rule() {
        let ds = Dataset::from_rows(&[vec![1.0, 1.0, -1.0], vec![1.0, -1.0, 1.0]]).unwrap();
        assert_eq!(ds.labels(), &[1.0, -1.0]);
        assert!(Dataset::from_rows(&[vec![1.0]]).is_err());
        assert!(Dataset::from_rows(&[vec![1.0, 0.5]]).is_err());
    }

    #[test]
    fn generated_labels_are_balanced() {
        let n = 10_000;
        let ds = generate_dataset(n, 4, &mut substream(3, &[1])).unwrap();
        for i in 0..n {
            let x = ds.input(i);
            assert_eq!(ds.label(i), x[0] * x[1]);
        }
        let mean: f64 = ds.labels().iter().sum::<f64>() / n as f64;
        assert!(mean.abs() < 3.0 / (n as f64).sqrt());
        assert!(generate_dataset(5, 1, &mut substream(0, &[])).is_err());
        let again = generate_dataset(n, 4, &mut substream(3, &[1])).unwrap();
        assert_eq!(ds, again);
    }

    #[test]
    fn cr_solution_matches_the_sign_table() {
        let net = build_cr_solution(3, 1.0, 5, 10).unwrap();
        let table = [
            [1.0, 1.0, 1.0],
            [-1.0, 1.0, 1.0],
            [1.0, -1.0, 1.0],
            [-1.0, -1.0, 1.0],
            [1.0, 1.0, -1.0],
            [-1.0, 1.0, -1.0],
            [1.0, -1.0, -1.0],
            [-1.0, -1.0, -1.0],
        ];
        for (j, row) in table.iter().enumerate() {
            assert_eq!(&net.w1_row(j)[..3], row);
            assert_eq!(&net.w1_row(j)[3..], &[0.0, 0.0]);
        }
        assert_eq!(&net.bias()[..8], &[-2.0; 8]);
        assert_eq!(
            &net.w2()[..8],
            &[1.0, -1.0, -1.0, 1.0, 1.0, -1.0, -1.0, 1.0]
        );
        for j in 8..10 {
            assert!(net.w1_row(j).iter().all(|&v| v == 0.0));
            assert_eq!((net.w2()[j], net.bias()[j]), (0.0, 0.0));
        }
    }

    #[test]
    fn cr_solution_errors() {
        assert!(build_cr_solution(3, 1.0, 5, 7).is_err());
        assert!(build_cr_solution(1, 1.0, 5, 8).is_err());
        assert!(build_cr_solution(6, 1.0, 5, 64).is_err());
        assert!(build_cr_solution(2, 0.0, 5, 8).is_err());
    }

    #[test]
    fn cr_solution_fires_once_and_computes_the_product() {
        for (c, r, d) in [(3, 1.0, 5), (2, 0.5, 6), (4, 1.7, 8)] {
            let net = build_cr_solution(c, r, d, (1 << c) + 1).unwrap();
            for x in all_inputs(d) {
                let (v, active) = forward(&net, &x);
                assert_eq!(active.iter().filter(|&&a| a).count(), 1);
                let j = active.iter().position(|&a| a).unwrap();
                assert!((net.pre_activations(&x)[j] - r).abs() < 1e-12);
                assert!((v - x[0] * x[1]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn memorizing_solution_examples() {
        let ds =
            Dataset::from_rows(&[vec![1.0, 1.0, 1.0, 1.0], vec![1.0, -1.0, -1.0, 1.0]]).unwrap();
        let net = build_memorizing_solution(&ds, 1.0, 2).unwrap();
        for i in 0..2 {
            let (v, active) = forward(&net, ds.input(i));
            let expected: Vec<bool> = (0..2).map(|j| j == i).collect();
            assert_eq!(active, expected);
            assert!((v - ds.label(i)).abs() < 1e-12);
        }
        assert!(build_memorizing_solution(&ds, 1.0, 1).is_err());
        let dup = Dataset::from_rows(&[vec![1.0, -1.0], vec![1.0, -1.0]]).unwrap();
        assert!(build_memorizing_solution(&dup, 1.0, 2).is_err());
    }

    #[test]
    fn random_init_respects_fan_in_bounds() {
        let net = random_init_net(16, 9, &mut substream(4, &[])).unwrap();
        assert!((0..9).all(|j| net.w1_row(j).iter().all(|w| w.abs() < 0.25)));
        assert!(net.bias().iter().all(|b| b.abs() < 0.25));
        assert!(net.w2().iter().all(|w| w.abs() < 1.0 / 3.0));
        assert_eq!(net, random_init_net(16, 9, &mut substream(4, &[])).unwrap());
        assert!(random_init_net(0, 3, &mut substream(4, &[])).is_err());
    }

    #[test]
    fn perturbation_has_the_requested_scale() {
        let net = build_cr_solution(3, 1.0, 200, 50).unwrap();
        let mut rng = substream(11, &[]);
        assert_eq!(perturb_net(&net, 0.0, &mut rng).unwrap(), net);
        let noisy = perturb_net(&net, 0.1, &mut rng).unwrap();
        let diffs: Vec<f64> = noisy
            .to_flat()
            .iter()
            .zip(net.to_flat())
            .map(|(a, b)| a - b)
            .collect();
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let var = diffs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64;
        assert!((var / 0.01 - 1.0).abs() < 0.1, "variance {var}");
        assert_eq!(net, build_cr_solution(3, 1.0, 200, 50).unwrap());
        assert!(perturb_net(&net, -1.0, &mut rng).is_err());
    }
}
