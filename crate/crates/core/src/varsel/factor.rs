//! Iterated principal-axis factoring on a correlation matrix.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

/// Eigenvalues at or above `1 − KAISER_TOL` count as ≥ 1.
pub const KAISER_TOL: f64 = 1e-10;
pub const MAX_ITERATIONS: usize = 100;
pub const COMMUNALITY_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorModel {
    /// Eigenvalues of the full correlation matrix, descending.
    pub eigenvalues: Vec<f64>,
    pub n_factors: usize,
    /// p rows of N loadings.
    pub loadings: Vec<Vec<f64>>,
    pub communalities: Vec<f64>,
    pub mean_communality: f64,
    pub converged: bool,
    pub iterations: usize,
    /// True when the correlation matrix was singular and initial
    /// communalities fell back to the largest absolute correlation per row.
    pub smc_fallback: bool,
    pub warnings: Vec<String>,
}

/// Eigen-decomposition sorted by descending eigenvalue.
pub fn sorted_eigen(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m.clone());
    let mut order: Vec<usize> = (0..m.nrows()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Squared multiple correlations `1 − 1/diag(R⁻¹)`, or `None` when R is not
/// safely invertible.
fn squared_multiple_correlations(corr: &DMatrix<f64>) -> Option<Vec<f64>> {
    let chol = corr.clone().cholesky()?;
    let inv = chol.inverse();
    let smc: Vec<f64> = (0..corr.nrows()).map(|i| 1.0 - 1.0 / inv[(i, i)]).collect();
    if smc.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) && inv.iter().all(|v| v.abs() < 1e12) {
        Some(smc)
    } else {
        None
    }
}

fn max_abs_offdiag(corr: &DMatrix<f64>) -> Vec<f64> {
    let p = corr.nrows();
    (0..p)
        .map(|i| {
            (0..p)
                .filter(|&j| j != i)
                .map(|j| corr[(i, j)].abs())
                .fold(0.0, f64::max)
        })
        .collect()
}

pub fn fit_from_correlation(corr: &DMatrix<f64>) -> FactorModel {
    let p = corr.nrows();
    let (eigenvalues, _) = sorted_eigen(corr);
    let n_factors = eigenvalues
        .iter()
        .filter(|&&l| l >= 1.0 - KAISER_TOL)
        .count()
        .max(1);

    let mut warnings = Vec::new();
    let (mut h, smc_fallback) = match squared_multiple_correlations(corr) {
        Some(smc) => (smc, false),
        None => {
            warnings.push("correlation matrix is singular; initial communalities use max |r|".into());
            (max_abs_offdiag(corr), true)
        }
    };

    let mut loadings = DMatrix::zeros(p, n_factors);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let mut reduced = corr.clone();
        for i in 0..p {
            reduced[(i, i)] = h[i];
        }
        let (vals, vecs) = sorted_eigen(&reduced);
        for f in 0..n_factors {
            let s = vals[f].max(0.0).sqrt();
            for i in 0..p {
                loadings[(i, f)] = vecs[(i, f)] * s;
            }
        }
        let h_new: Vec<f64> = (0..p)
            .map(|i| (0..n_factors).map(|f| loadings[(i, f)].powi(2)).sum::<f64>().min(1.0))
            .collect();
        let delta = h_new
            .iter()
            .zip(&h)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        h = h_new;
        if delta < COMMUNALITY_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        warnings.push(format!(
            "principal-axis factoring did not converge in {MAX_ITERATIONS} iterations"
        ));
    }

    // Heywood cases: rescale the loading row so its squared norm is 1
    let mut communalities = Vec::with_capacity(p);
    for i in 0..p {
        let c: f64 = (0..n_factors).map(|f| loadings[(i, f)].powi(2)).sum();
        if c > 1.0 + 1e-8 {
            warnings.push(format!("Heywood case at variable {i}: communality {c:.6} clipped to 1"));
            let s = c.sqrt();
            for f in 0..n_factors {
                loadings[(i, f)] /= s;
            }
            communalities.push(1.0);
        } else {
            communalities.push(c);
        }
    }
    let mean_communality = communalities.iter().sum::<f64>() / p as f64;

    FactorModel {
        eigenvalues,
        n_factors,
        loadings: (0..p)
            .map(|i| (0..n_factors).map(|f| loadings[(i, f)]).collect())
            .collect(),
        communalities,
        mean_communality,
        converged,
        iterations,
        smc_fallback,
        warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_retains_every_factor() {
        let m = fit_from_correlation(&DMatrix::identity(5, 5));
        assert_eq!(m.n_factors, 5);
        assert!(m.eigenvalues.iter().all(|l| (l - 1.0).abs() < 1e-12));
        assert!(m.communalities.iter().all(|c| c.abs() < 1e-12));
    }

    #[test]
    fn block_spectrum_gives_two_factors() {
        let c = DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let m = fit_from_correlation(&c);
        let want = [2.0, 1.0, 0.0];
        for (l, w) in m.eigenvalues.iter().zip(want) {
            assert!((l - w).abs() < 1e-12);
        }
        assert_eq!(m.n_factors, 2);
        assert!(m.smc_fallback);
    }

    #[test]
    fn communality_equals_row_sum_of_squares() {
        let c = DMatrix::from_row_slice(
            4,
            4,
            &[
                1.0, 0.6, 0.5, 0.1, //
                0.6, 1.0, 0.55, 0.2, //
                0.5, 0.55, 1.0, 0.15, //
                0.1, 0.2, 0.15, 1.0,
            ],
        );
        let m = fit_from_correlation(&c);
        assert!(m.converged);
        for (row, h) in m.loadings.iter().zip(&m.communalities) {
            let s: f64 = row.iter().map(|l| l * l).sum();
            assert!((s - h).abs() < 1e-8);
            assert!(*h >= 0.0 && *h <= 1.0 + 1e-8);
        }
        let trace: f64 = m.eigenvalues.iter().sum();
        assert!((trace - 4.0).abs() < 1e-8);
    }

    #[test]
    fn one_factor_population_recovers_loadings() {
        // R = l lᵀ off the diagonal, exact one-factor structure
        let l = [0.9, 0.8, 0.7, 0.6];
        let c = DMatrix::from_fn(4, 4, |i, j| if i == j { 1.0 } else { l[i] * l[j] });
        let m = fit_from_correlation(&c);
        assert_eq!(m.n_factors, 1);
        for (h, li) in m.communalities.iter().zip(l) {
            assert!((h - li * li).abs() < 5e-3, "{h} vs {}", li * li);
        }
    }
}
