//! Symmetrization, temperature-scaled Sinkhorn-Knopp projection onto doubly
//! stochastic matrices, and sparsity diagnostics for mixing weights.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::Matrix;

/// Largest spread `(max - min) / tau` accepted before `exp` would underflow
/// the smallest entries to zero.
pub const MAX_EXP_SPREAD: f64 = 700.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstraintConfig {
    /// Temperature dividing the raw weights inside the exponent.
    pub tau: f64,
    pub max_iters: usize,
    /// Accepted deviation of any row or column sum from 1.
    pub tol: f64,
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        Self { tau: 1.0, max_iters: 100, tol: 1e-6 }
    }
}

impl ConstraintConfig {
    pub fn with_tau(self, tau: f64) -> Self {
        Self { tau, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        Ok(())
    }
}

/// Output of [`sinkhorn_knopp`].
#[derive(Clone, Debug)]
pub struct SinkhornOutput {
    pub matrix: Matrix,
    pub iterations: usize,
    pub converged: bool,
    /// Largest `|sum - 1|` over all rows and columns of `matrix`.
    pub deviation: f64,
}

/// `(w + wᵀ) / 2`.
pub fn symmetrize(w: &Matrix) -> Result<Matrix> {
    if !w.is_square() {
        return dim_err(format!("cannot symmetrize a {}x{} matrix", w.rows(), w.cols()));
    }
    Ok(Matrix::from_fn(w.rows(), w.cols(), |i, j| 0.5 * (w[(i, j)] + w[(j, i)])))
}

/// `exp((w - max w) / tau)`; the shift cancels under row/column normalization.
pub(crate) fn positive_kernel(w: &Matrix, tau: f64) -> Result<Matrix> {
    if !w.is_square() || w.is_empty() {
        return dim_err(format!("Sinkhorn needs a non-empty square matrix, got {}x{}", w.rows(), w.cols()));
    }
    if !w.is_finite() {
        return Err(Error::Range("Sinkhorn input contains non-finite entries".into()));
    }
    let max = w.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = w.data().iter().copied().fold(f64::INFINITY, f64::min);
    let spread = (max - min) / tau;
    if spread > MAX_EXP_SPREAD {
        return Err(Error::Range(format!(
            "weight spread / tau = {spread:.1} exceeds {MAX_EXP_SPREAD}; rescale the weights or raise tau"
        )));
    }
    Ok(w.map(|v| ((v - max) / tau).exp()))
}

pub(crate) fn normalize_rows(m: &mut Matrix) {
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
}

pub(crate) fn normalize_cols(m: &mut Matrix) {
    let sums = m.col_sums();
    for i in 0..m.rows() {
        for (v, s) in m.row_mut(i).iter_mut().zip(&sums) {
            *v /= s;
        }
    }
}

/// Largest deviation of any row or column sum from 1.
pub fn stochastic_deviation(m: &Matrix) -> f64 {
    m.row_sums()
        .into_iter()
        .chain(m.col_sums())
        .fold(0.0, |d, s| d.max((s - 1.0).abs()))
}

/// Sinkhorn-Knopp on `exp(w / tau)`: alternate row then column normalization
/// until every row and column sum is within `tol` of 1 or `max_iters` sweeps
/// have run. A symmetric input gets a trailing symmetrization so the output is
/// exactly symmetric.
///
/// Non-convergence is reported through [`SinkhornOutput::converged`], not as an error.
pub fn sinkhorn_knopp(w: &Matrix, cfg: &ConstraintConfig) -> Result<SinkhornOutput> {
    cfg.validate()?;
    let symmetric_input = *w == w.transpose();
    let mut m = positive_kernel(w, cfg.tau)?;
    let mut iterations = 0;
    let mut deviation = stochastic_deviation(&m);
    while iterations < cfg.max_iters && deviation > cfg.tol {
        normalize_rows(&mut m);
        normalize_cols(&mut m);
        iterations += 1;
        deviation = stochastic_deviation(&m);
    }
    let converged = deviation <= cfg.tol;
    if symmetric_input {
        m = symmetrize(&m)?;
        deviation = stochastic_deviation(&m);
    }
    Ok(SinkhornOutput { matrix: m, iterations, converged, deviation })
}

/// Fixed-depth variant: exactly `iters` row/column sweeps, no early exit.
/// This is the function the training graph differentiates through.
pub fn sinkhorn_fixed(w: &Matrix, tau: f64, iters: usize, symmetrize_output: bool) -> Result<Matrix> {
    let mut m = positive_kernel(w, tau)?;
    for _ in 0..iters {
        normalize_rows(&mut m);
        normalize_cols(&mut m);
    }
    if symmetrize_output {
        m = symmetrize(&m)?;
    }
    Ok(m)
}

/// How a raw weight matrix is projected when materializing mixing weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SinkhornMode {
    /// Iterate until `tol` is met or `max_iters` sweeps have run.
    #[default]
    Converge,
    /// Always run exactly `max_iters` sweeps, matching the training graph.
    FixedDepth,
}

/// Projects `w` with [`sinkhorn_knopp`] or [`sinkhorn_fixed`] depending on `mode`.
/// Both apply the trailing symmetrization to symmetric inputs.
pub fn project(w: &Matrix, cfg: &ConstraintConfig, mode: SinkhornMode) -> Result<Matrix> {
    match mode {
        SinkhornMode::Converge => Ok(sinkhorn_knopp(w, cfg)?.matrix),
        SinkhornMode::FixedDepth => {
            cfg.validate()?;
            sinkhorn_fixed(w, cfg.tau, cfg.max_iters, *w == w.transpose())
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SparsityStats {
    /// Mean Shannon entropy (nats) of the rows.
    pub row_entropy_mean: f64,
    /// Mean of the largest entry of each row.
    pub top1_mass_mean: f64,
}

pub fn sparsity_stats(w: &Matrix) -> Result<SparsityStats> {
    if w.rows() == 0 {
        return dim_err("sparsity_stats of an empty matrix");
    }
    if let Some((i, s)) = w.row_sums().into_iter().enumerate().find(|(_, s)| (s - 1.0).abs() > 1e-6) {
        return Err(Error::Precondition(format!("row {i} sums to {s}, expected 1")));
    }
    let n = w.rows() as f64;
    let mut entropy = 0.0;
    let mut top1 = 0.0;
    for i in 0..w.rows() {
        let row = w.row(i);
        entropy -= row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();
        top1 += row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    }
    Ok(SparsityStats { row_entropy_mean: entropy / n, top1_mass_mean: top1 / n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(tau: f64, tol: f64) -> ConstraintConfig {
        ConstraintConfig { tau, max_iters: 100, tol }
    }

    #[test]
    fn symmetrize_cases() {
        let s = Matrix::from_rows(&[[1.0, 2.0], [2.0, 5.0]]).unwrap();
        assert_eq!(symmetrize(&s).unwrap(), s);
        let a = Matrix::from_rows(&[[0.0, 2.0], [0.0, 0.0]]).unwrap();
        assert_eq!(symmetrize(&a).unwrap(), Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = Matrix::random_normal(5, 5, 1.0, &mut rng);
        let once = symmetrize(&w).unwrap();
        assert_eq!(symmetrize(&once).unwrap(), once);
        assert!(symmetrize(&Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn constant_and_scalar_inputs() {
        for tau in [0.05, 1.0, 3.0] {
            let out = sinkhorn_knopp(&Matrix::filled(4, 4, 2.5), &cfg(tau, 1e-12)).unwrap();
            assert!(out.matrix.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
            assert!(out.converged);
        }
        let one = sinkhorn_knopp(&Matrix::filled(1, 1, -7.0), &cfg(0.3, 1e-9)).unwrap();
        assert_eq!(one.matrix.data(), &[1.0]);
    }

    #[test]
    fn random_matches_long_run() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let w = Matrix::random_normal(4, 4, 1.0, &mut rng);
        let out = sinkhorn_knopp(&w, &cfg(1.0, 1e-8)).unwrap();
        assert!(out.converged);
        for s in out.matrix.row_sums().into_iter().chain(out.matrix.col_sums()) {
            assert!((s - 1.0).abs() <= 1e-8);
        }
        // long-run reference: plain alternating scaling for 10⁴ sweeps
        let mut reference = w.map(f64::exp);
        for _ in 0..10_000 {
            normalize_rows(&mut reference);
            normalize_cols(&mut reference);
        }
        for (a, b) in out.matrix.data().iter().zip(reference.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
        assert!(out.matrix.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn overflow_is_a_range_error() {
        let w = Matrix::from_rows(&[[0.0, 800.0], [0.0, 0.0]]).unwrap();
        assert!(matches!(sinkhorn_knopp(&w, &cfg(1.0, 1e-6)), Err(Error::Range(_))));
        // the same weights are fine once the temperature absorbs the spread
        assert!(sinkhorn_knopp(&w, &cfg(10.0, 1e-6)).is_ok());
    }

    #[test]
    fn reports_non_convergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Matrix::random_normal(16, 16, 1.0, &mut rng);
        let out = sinkhorn_knopp(&w, &ConstraintConfig { tau: 0.05, max_iters: 1, tol: 1e-12 }).unwrap();
        assert!(!out.converged);
        assert_eq!(out.iterations, 1);
    }

    #[test]
    fn sparsity_stats_extremes() {
        let id = sparsity_stats(&Matrix::identity(5)).unwrap();
        assert_eq!(id.row_entropy_mean, 0.0);
        assert_eq!(id.top1_mass_mean, 1.0);
        let u = sparsity_stats(&Matrix::filled(4, 4, 0.25)).unwrap();
        assert!((u.row_entropy_mean - 4f64.ln()).abs() < 1e-12);
        assert!((u.top1_mass_mean - 0.25).abs() < 1e-15);
        assert!(matches!(sparsity_stats(&Matrix::filled(2, 2, 1.0)), Err(Error::Precondition(_))));
    }

    #[test]
    fn low_temperature_is_sharper() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let w = symmetrize(&Matrix::random_normal(8, 8, 0.1, &mut rng)).unwrap();
        let cold = sparsity_stats(&sinkhorn_knopp(&w, &cfg(0.05, 1e-6)).unwrap().matrix).unwrap();
        let warm = sparsity_stats(&sinkhorn_knopp(&w, &cfg(1.0, 1e-6)).unwrap().matrix).unwrap();
        assert!(cold.row_entropy_mean < warm.row_entropy_mean);
    }

    #[test]
    fn top1_mass_monotone_in_temperature() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..5 {
            let w = symmetrize(&Matrix::random_normal(6, 6, 0.1, &mut rng)).unwrap();
            let grid = [1.0, 0.5, 0.1, 0.05];
            let tops: Vec<f64> = grid
                .iter()
                .map(|&t| {
                    let c = ConstraintConfig { tau: t, max_iters: 5000, tol: 1e-9 };
                    sparsity_stats(&sinkhorn_knopp(&w, &c).unwrap().matrix).unwrap().top1_mass_mean
                })
                .collect();
            for pair in tops.windows(2) {
                assert!(pair[1] >= pair[0] - 1e-9, "{tops:?}");
            }
        }
    }

    #[test]
    fn fixed_depth_agrees_with_converged_run() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = symmetrize(&Matrix::random_normal(5, 5, 1.0, &mut rng)).unwrap();
        let c = ConstraintConfig { tau: 0.5, max_iters: 500, tol: 1e-14 };
        let conv = sinkhorn_knopp(&w, &c).unwrap();
        let fixed = sinkhorn_fixed(&w, 0.5, 500, true).unwrap();
        for (a, b) in conv.matrix.data().iter().zip(fixed.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn doubly_stochastic_and_symmetric(n in 1usize..12, seed in any::<u64>(), tau in 0.2f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = Matrix::random_normal(n, n, 1.0, &mut rng);
            let out = sinkhorn_knopp(&w, &cfg(tau, 1e-6)).unwrap();
            if out.converged {
                prop_assert!(out.deviation <= 1e-6);
            }
            let s = symmetrize(&w).unwrap();
            let sym = sinkhorn_knopp(&s, &cfg(tau, 1e-6)).unwrap().matrix;
            prop_assert!(sym.is_symmetric(1e-10));
        }

        #[test]
        fn invariant_to_global_shift(seed in any::<u64>(), c in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = Matrix::random_normal(4, 4, 1.0, &mut rng);
            let a = sinkhorn_fixed(&w, 1.0, 30, false).unwrap();
            let b = sinkhorn_fixed(&w.map(|v| v + c), 1.0, 30, false).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}
