//! Weighted, ridge-penalised logistic regression.
//!
//! Binary models are fitted by iteratively reweighted least squares (Newton
//! steps on the penalised weighted log-likelihood, halved whenever a full
//! step would lower the objective). Multinomial models are fitted by
//! full-gradient ascent with a Barzilai–Borwein trial step and Armijo
//! backtracking. Intercepts are never penalised.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_LOCAL_L2: f64 = 1e-4;
pub const IRLS_MAX_ITER: usize = 100;
pub const IRLS_TOL: f64 = 1e-8;
pub const GRADIENT_MAX_ITER: usize = 500;
pub const GRADIENT_TOL: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogisticKind {
    Binary,
    Multinomial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub kind: LogisticKind,
    /// One row for binary models (the positive class); one row per class for
    /// multinomial models, summing to zero across classes.
    pub coefficients: Vec<Vec<f64>>,
    pub intercepts: Vec<f64>,
    pub l2_lambda: f64,
    pub converged: bool,
    pub iterations: usize,
    pub n_effective: f64,
}

impl LogisticModel {
    pub fn n_features(&self) -> usize {
        self.coefficients[0].len()
    }

    pub fn n_classes(&self) -> usize {
        match self.kind {
            LogisticKind::Binary => 2,
            LogisticKind::Multinomial => self.coefficients.len(),
        }
    }

    /// Positive-class probability of a binary model at one row.
    pub fn positive_probability(&self, row: &[f64]) -> f64 {
        debug_assert_eq!(self.kind, LogisticKind::Binary);
        let eta = self.intercepts[0]
            + self.coefficients[0]
                .iter()
                .zip(row)
                .map(|(b, x)| b * x)
                .sum::<f64>();
        sigmoid(eta)
    }

    /// Class probabilities for one row.
    pub fn row_probabilities(&self, row: &[f64]) -> Vec<f64> {
        match self.kind {
            LogisticKind::Binary => {
                let p = self.positive_probability(row);
                vec![1.0 - p, p]
            }
            LogisticKind::Multinomial => {
                let eta: Vec<f64> = self
                    .coefficients
                    .iter()
                    .zip(&self.intercepts)
                    .map(|(b, a)| a + b.iter().zip(row).map(|(b, x)| b * x).sum::<f64>())
                    .collect();
                softmax(&eta)
            }
        }
    }
}

pub fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^η)` without overflow.
fn softplus(eta: f64) -> f64 {
    eta.max(0.0) + (-eta.abs()).exp().ln_1p()
}

fn softmax(eta: &[f64]) -> Vec<f64> {
    let m = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = eta.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_sum_exp(eta: &[f64]) -> f64 {
    let m = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + eta.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn check_inputs(x: &DMatrix<f64>, n_labels: usize, w: &[f64], l2: f64) -> Result<()> {
    let n = x.nrows();
    if n_labels != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: n_labels,
        });
    }
    if w.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: w.len(),
        });
    }
    if n < 2 {
        return Err(Error::InvalidInput("logistic regression needs at least two rows".into()));
    }
    if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidInput("sample weights must be finite and non-negative".into()));
    }
    if w.iter().filter(|&&v| v > 0.0).count() < 2 {
        return Err(Error::InvalidInput("need at least two positively weighted rows".into()));
    }
    if !(l2 >= 0.0 && l2.is_finite()) {
        return Err(Error::InvalidInput(format!("l2_lambda must be non-negative, got {l2}")));
    }
    Ok(())
}

fn linear_predictor(x: &DMatrix<f64>, i: usize, beta: &[f64]) -> f64 {
    let mut eta = beta[0];
    for j in 0..x.ncols() {
        eta += beta[j + 1] * x[(i, j)];
    }
    eta
}

/// Penalised weighted log-likelihood of a binary model.
/// `beta = [intercept, slopes...]`.
pub fn binary_objective(x: &DMatrix<f64>, y: &[bool], w: &[f64], l2: f64, beta: &[f64]) -> f64 {
    let mut ll = 0.0;
    for i in 0..x.nrows() {
        if w[i] == 0.0 {
            continue;
        }
        let eta = linear_predictor(x, i, beta);
        ll += w[i] * (if y[i] { eta } else { 0.0 } - softplus(eta));
    }
    ll - 0.5 * l2 * beta[1..].iter().map(|b| b * b).sum::<f64>()
}

pub fn binary_gradient(x: &DMatrix<f64>, y: &[bool], w: &[f64], l2: f64, beta: &[f64]) -> Vec<f64> {
    let p = x.ncols();
    let mut g = vec![0.0; p + 1];
    for i in 0..x.nrows() {
        if w[i] == 0.0 {
            continue;
        }
        let r = w[i] * (f64::from(u8::from(y[i])) - sigmoid(linear_predictor(x, i, beta)));
        g[0] += r;
        for j in 0..p {
            g[j + 1] += r * x[(i, j)];
        }
    }
    for j in 1..=p {
        g[j] -= l2 * beta[j];
    }
    g
}

/// Weighted binary logistic regression by IRLS.
pub fn fit_binary_logistic(x: &DMatrix<f64>, y: &[bool], w: &[f64], l2: f64) -> Result<LogisticModel> {
    check_inputs(x, y.len(), w, l2)?;
    let (n, p) = (x.nrows(), x.ncols());
    let (mut wp, mut wt) = (0.0, 0.0);
    for i in 0..n {
        wt += w[i];
        if y[i] {
            wp += w[i];
        }
    }
    let has_pos = (0..n).any(|i| w[i] > 0.0 && y[i]);
    let has_neg = (0..n).any(|i| w[i] > 0.0 && !y[i]);
    if !has_pos || !has_neg {
        return Err(Error::DegenerateLabels(
            "all positively weighted rows share one label".into(),
        ));
    }

    let dim = p + 1;
    let mut beta = vec![0.0; dim];
    let rate = wp / wt;
    beta[0] = (rate / (1.0 - rate)).ln();
    let mut obj = binary_objective(x, y, w, l2, &beta);
    let mut converged = false;
    let mut iterations = 0;
    let mut row = vec![0.0; dim];
    while iterations < IRLS_MAX_ITER {
        iterations += 1;
        let mut h = DMatrix::<f64>::zeros(dim, dim);
        let mut g = DVector::<f64>::zeros(dim);
        for i in 0..n {
            if w[i] == 0.0 {
                continue;
            }
            row[0] = 1.0;
            for j in 0..p {
                row[j + 1] = x[(i, j)];
            }
            let eta: f64 = row.iter().zip(&beta).map(|(a, b)| a * b).sum();
            let mu = sigmoid(eta);
            let r = w[i] * (f64::from(u8::from(y[i])) - mu);
            let v = w[i] * mu * (1.0 - mu);
            for a in 0..dim {
                g[a] += r * row[a];
                let va = v * row[a];
                for b in a..dim {
                    h[(a, b)] += va * row[b];
                }
            }
        }
        for a in 1..dim {
            h[(a, a)] += l2;
            g[a] -= l2 * beta[a];
        }
        for a in 0..dim {
            for b in 0..a {
                h[(a, b)] = h[(b, a)];
            }
        }
        let step = match h.cholesky() {
            Some(chol) => chol.solve(&g),
            None => {
                return Err(Error::Singular(if l2 == 0.0 {
                    "weighted normal equations are singular; use l2_lambda > 0".into()
                } else {
                    "weighted normal equations are singular".into()
                }))
            }
        };
        if step.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular("non-finite Newton step".into()));
        }

        let mut t = 1.0;
        let mut candidate: Vec<f64>;
        let mut cand_obj;
        loop {
            candidate = beta.iter().zip(step.iter()).map(|(b, s)| b + t * s).collect();
            cand_obj = binary_objective(x, y, w, l2, &candidate);
            if cand_obj >= obj - 1e-12 * obj.abs() || t < 1e-10 {
                break;
            }
            t *= 0.5;
        }
        let change = step.iter().map(|s| (t * s).abs()).fold(0.0, f64::max);
        if cand_obj >= obj {
            beta = candidate;
            obj = cand_obj;
        }
        if change < IRLS_TOL {
            converged = true;
            break;
        }
    }

    Ok(LogisticModel {
        kind: LogisticKind::Binary,
        coefficients: vec![beta[1..].to_vec()],
        intercepts: vec![beta[0]],
        l2_lambda: l2,
        converged,
        iterations,
        n_effective: wt,
    })
}

/// Multinomial parameters are stored class-major: `C` blocks of
/// `[intercept, slopes...]`.
pub fn multinomial_objective(
    x: &DMatrix<f64>,
    y: &[usize],
    w: &[f64],
    n_classes: usize,
    l2: f64,
    params: &[f64],
) -> f64 {
    let dim = x.ncols() + 1;
    let mut eta = vec![0.0; n_classes];
    let mut ll = 0.0;
    for i in 0..x.nrows() {
        if w[i] == 0.0 {
            continue;
        }
        for (c, e) in eta.iter_mut().enumerate() {
            *e = linear_predictor(x, i, &params[c * dim..(c + 1) * dim]);
        }
        ll += w[i] * (eta[y[i]] - log_sum_exp(&eta));
    }
    let mut pen = 0.0;
    for c in 0..n_classes {
        pen += params[c * dim + 1..(c + 1) * dim].iter().map(|b| b * b).sum::<f64>();
    }
    ll - 0.5 * l2 * pen
}

pub fn multinomial_gradient(
    x: &DMatrix<f64>,
    y: &[usize],
    w: &[f64],
    n_classes: usize,
    l2: f64,
    params: &[f64],
) -> Vec<f64> {
    let p = x.ncols();
    let dim = p + 1;
    let mut g = vec![0.0; n_classes * dim];
    let mut eta = vec![0.0; n_classes];
    for i in 0..x.nrows() {
        if w[i] == 0.0 {
            continue;
        }
        for (c, e) in eta.iter_mut().enumerate() {
            *e = linear_predictor(x, i, &params[c * dim..(c + 1) * dim]);
        }
        let prob = softmax(&eta);
        for c in 0..n_classes {
            let r = w[i] * (f64::from(u8::from(y[i] == c)) - prob[c]);
            g[c * dim] += r;
            for j in 0..p {
                g[c * dim + j + 1] += r * x[(i, j)];
            }
        }
    }
    for c in 0..n_classes {
        for j in 1..dim {
            g[c * dim + j] -= l2 * params[c * dim + j];
        }
    }
    g
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Weighted multinomial (softmax) logistic regression.
pub fn fit_multinomial_logistic(
    x: &DMatrix<f64>,
    y: &[usize],
    w: &[f64],
    n_classes: usize,
    l2: f64,
) -> Result<LogisticModel> {
    check_inputs(x, y.len(), w, l2)?;
    if n_classes < 2 {
        return Err(Error::InvalidInput("multinomial model needs at least two classes".into()));
    }
    let (n, p) = (x.nrows(), x.ncols());
    let mut class_weight = vec![0.0; n_classes];
    for i in 0..n {
        if y[i] >= n_classes {
            return Err(Error::InvalidInput(format!("label {} outside {n_classes} classes", y[i])));
        }
        if w[i] > 0.0 {
            class_weight[y[i]] += w[i];
        }
    }
    if let Some(c) = class_weight.iter().position(|&v| v == 0.0) {
        return Err(Error::DegenerateLabels(format!("class {c} absent from training rows")));
    }
    let total: f64 = class_weight.iter().sum();
    let dim = p + 1;

    // start from the centred class log-frequencies
    let mut params = vec![0.0; n_classes * dim];
    let logs: Vec<f64> = class_weight.iter().map(|v| v.ln()).collect();
    let mean_log = logs.iter().sum::<f64>() / n_classes as f64;
    for c in 0..n_classes {
        params[c * dim] = logs[c] - mean_log;
    }

    // conservative first step from a curvature bound
    let mut sq = 0.0;
    for i in 0..n {
        sq += w[i] * (1.0 + (0..p).map(|j| x[(i, j)].powi(2)).sum::<f64>());
    }
    let mut alpha = 1.0 / (0.5 * sq + l2);

    let mut obj = multinomial_objective(x, y, w, n_classes, l2, &params);
    let mut grad = multinomial_gradient(x, y, w, n_classes, l2, &params);
    let mut converged = norm(&grad) < GRADIENT_TOL;
    let mut iterations = 0;
    while !converged && iterations < GRADIENT_MAX_ITER {
        iterations += 1;
        let gg: f64 = grad.iter().map(|g| g * g).sum();
        let mut step = alpha;
        let (new_params, new_obj) = loop {
            let cand: Vec<f64> = params.iter().zip(&grad).map(|(b, g)| b + step * g).collect();
            let o = multinomial_objective(x, y, w, n_classes, l2, &cand);
            if o >= obj + 1e-4 * step * gg || step < 1e-20 {
                break (cand, o);
            }
            step *= 0.5;
        };
        if new_obj < obj {
            break;
        }
        let new_grad = multinomial_gradient(x, y, w, n_classes, l2, &new_params);
        // Barzilai–Borwein step for the next iteration
        let s: Vec<f64> = new_params.iter().zip(&params).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = new_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&yv).map(|(a, b)| a * b).sum();
        let ss: f64 = s.iter().map(|a| a * a).sum();
        alpha = if sy < 0.0 { ss / -sy } else { step * 2.0 };
        params = new_params;
        obj = new_obj;
        grad = new_grad;
        converged = norm(&grad) < GRADIENT_TOL;
    }

    // sum-to-zero identification across classes
    let mut coefficients = vec![vec![0.0; p]; n_classes];
    let mut intercepts = vec![0.0; n_classes];
    for k in 0..dim {
        let mean = (0..n_classes).map(|c| params[c * dim + k]).sum::<f64>() / n_classes as f64;
        for c in 0..n_classes {
            let v = params[c * dim + k] - mean;
            if k == 0 {
                intercepts[c] = v;
            } else {
                coefficients[c][k - 1] = v;
            }
        }
    }

    Ok(LogisticModel {
        kind: LogisticKind::Multinomial,
        coefficients,
        intercepts,
        l2_lambda: l2,
        converged,
        iterations,
        n_effective: total,
    })
}

/// n × C class probabilities.
pub fn predict_proba(model: &LogisticModel, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() != model.n_features() {
        return Err(Error::DimensionMismatch {
            expected: model.n_features(),
            found: x.ncols(),
        });
    }
    let c = model.n_classes();
    let mut out = DMatrix::zeros(x.nrows(), c);
    let mut row = vec![0.0; x.ncols()];
    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            row[j] = x[(i, j)];
        }
        for (k, v) in model.row_probabilities(&row).into_iter().enumerate() {
            out[(i, k)] = v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn logit_data(n: usize, beta: &[f64], intercept: f64, seed: u64) -> (DMatrix<f64>, Vec<bool>) {
        let mut rng = crate::exec::rng_for(seed, 0);
        let p = beta.len();
        let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = (0..n)
            .map(|i| {
                let eta = intercept + (0..p).map(|j| beta[j] * x[(i, j)]).sum::<f64>();
                rng.random::<f64>() < sigmoid(eta)
            })
            .collect();
        (x, y)
    }

    /// Plain fixed-step gradient ascent, independent of the IRLS code path.
    fn gradient_ascent_oracle(x: &DMatrix<f64>, y: &[bool], l2: f64) -> Vec<f64> {
        let (n, p) = (x.nrows(), x.ncols());
        let mut beta = vec![0.0; p + 1];
        let lr = 4.0 / n as f64;
        for _ in 0..200_000 {
            let mut g = vec![0.0; p + 1];
            for i in 0..n {
                let mut eta = beta[0];
                for j in 0..p {
                    eta += beta[j + 1] * x[(i, j)];
                }
                let r = if y[i] { 1.0 } else { 0.0 } - 1.0 / (1.0 + (-eta).exp());
                g[0] += r;
                for j in 0..p {
                    g[j + 1] += r * x[(i, j)];
                }
            }
            for j in 1..=p {
                g[j] -= l2 * beta[j];
            }
            let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (b, gi) in beta.iter_mut().zip(&g) {
                *b += lr * gi;
            }
            if gn < 1e-11 {
                break;
            }
        }
        beta
    }

    #[test]
    fn symmetric_data_has_zero_intercept() {
        let x = DMatrix::from_column_slice(2, 1, &[-1.0, 1.0]);
        let m = fit_binary_logistic(&x, &[false, true], &[1.0, 1.0], 0.1).unwrap();
        assert!(m.intercepts[0].abs() < 1e-6);
        assert!(m.coefficients[0][0] > 0.0);
        assert!(m.converged);
    }

    #[test]
    fn duplicated_half_weight_rows_match() {
        let (x, y) = logit_data(60, &[1.0, -0.5], 0.2, 1);
        let w = vec![1.0; 60];
        let a = fit_binary_logistic(&x, &y, &w, 0.0).unwrap();
        let x2 = DMatrix::from_fn(120, 2, |i, j| x[(i % 60, j)]);
        let y2: Vec<bool> = (0..120).map(|i| y[i % 60]).collect();
        let b = fit_binary_logistic(&x2, &y2, &vec![0.5; 120], 0.0).unwrap();
        for (u, v) in a.coefficients[0].iter().zip(&b.coefficients[0]) {
            assert!((u - v).abs() < 1e-8);
        }
        assert!((a.intercepts[0] - b.intercepts[0]).abs() < 1e-8);
    }

    #[test]
    fn irls_matches_gradient_ascent_oracle() {
        let (x, y) = logit_data(200, &[0.8, -1.2, 0.3], -0.4, 7);
        let m = fit_binary_logistic(&x, &y, &vec![1.0; 200], 0.0).unwrap();
        let oracle = gradient_ascent_oracle(&x, &y, 0.0);
        assert!((m.intercepts[0] - oracle[0]).abs() < 1e-5);
        for j in 0..3 {
            assert!((m.coefficients[0][j] - oracle[j + 1]).abs() < 1e-5);
        }
    }

    #[test]
    fn degenerate_and_singular_inputs() {
        let x = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 2.0]);
        assert!(matches!(
            fit_binary_logistic(&x, &[true, true, false], &[1.0, 1.0, 0.0], 0.1),
            Err(Error::DegenerateLabels(_))
        ));
        // two identical columns with no ridge
        let x = DMatrix::from_fn(6, 2, |i, _| i as f64);
        let y = [false, true, false, true, false, true];
        assert!(matches!(
            fit_binary_logistic(&x, &y, &[1.0; 6], 0.0),
            Err(Error::Singular(_))
        ));
        assert!(fit_binary_logistic(&x, &y, &[1.0; 6], 0.1).is_ok());
    }

    fn central_difference<F: Fn(&[f64]) -> f64>(f: F, at: &[f64], h: f64) -> Vec<f64> {
        (0..at.len())
            .map(|k| {
                let mut up = at.to_vec();
                let mut dn = at.to_vec();
                up[k] += h;
                dn[k] -= h;
                (f(&up) - f(&dn)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn binary_gradient_matches_finite_differences() {
        let (x, y) = logit_data(50, &[1.0, -1.0], 0.0, 3);
        let mut rng = crate::exec::rng_for(4, 0);
        let w: Vec<f64> = (0..50).map(|_| rng.random::<f64>()).collect();
        for _ in 0..10 {
            let beta: Vec<f64> = (0..3).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let g = binary_gradient(&x, &y, &w, 0.3, &beta);
            let fd = central_difference(|b| binary_objective(&x, &y, &w, 0.3, b), &beta, 1e-5);
            for (a, b) in g.iter().zip(&fd) {
                assert!(rel_err(*a, *b) < 1e-4, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn multinomial_gradient_matches_finite_differences() {
        let mut rng = crate::exec::rng_for(5, 0);
        let x = DMatrix::from_fn(40, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y: Vec<usize> = (0..40).map(|i| i % 3).collect();
        let w: Vec<f64> = (0..40).map(|_| 0.5 + rng.random::<f64>()).collect();
        for _ in 0..10 {
            let params: Vec<f64> = (0..9).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let g = multinomial_gradient(&x, &y, &w, 3, 0.2, &params);
            let fd = central_difference(|b| multinomial_objective(&x, &y, &w, 3, 0.2, b), &params, 1e-5);
            for (a, b) in g.iter().zip(&fd) {
                assert!(rel_err(*a, *b) < 1e-4, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn weight_scaling_with_lambda_scaling_keeps_argmax() {
        let (x, y) = logit_data(80, &[0.5, 0.5], 0.1, 9);
        let a = fit_binary_logistic(&x, &y, &vec![1.0; 80], 0.5).unwrap();
        let b = fit_binary_logistic(&x, &y, &vec![3.5; 80], 0.5 * 3.5).unwrap();
        for (u, v) in a.coefficients[0].iter().zip(&b.coefficients[0]) {
            assert!((u - v).abs() < 1e-6);
        }
        let xm = DMatrix::from_fn(60, 2, |i, j| ((i * 7 + j * 3) % 11) as f64 / 5.0 - 1.0);
        let ym: Vec<usize> = (0..60).map(|i| (i * 5 + i / 7) % 3).collect();
        let a = fit_multinomial_logistic(&xm, &ym, &vec![1.0; 60], 3, 0.4).unwrap();
        let b = fit_multinomial_logistic(&xm, &ym, &vec![2.0; 60], 3, 0.8).unwrap();
        for c in 0..3 {
            for (u, v) in a.coefficients[c].iter().zip(&b.coefficients[c]) {
                assert!((u - v).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn two_class_multinomial_matches_binary() {
        let (x, yb) = logit_data(150, &[0.7, -0.4], 0.3, 12);
        let ym: Vec<usize> = yb.iter().map(|&b| usize::from(b)).collect();
        let w = vec![1.0; 150];
        // the sum-to-zero parametrisation doubles the slope gap, so the
        // equivalent multinomial penalty is twice the binary one
        for (lb, lm) in [(0.0, 0.0), (0.5, 1.0)] {
            let b = fit_binary_logistic(&x, &yb, &w, lb).unwrap();
            let m = fit_multinomial_logistic(&x, &ym, &w, 2, lm).unwrap();
            assert!(m.converged, "iterations {}", m.iterations);
            let pb = predict_proba(&b, &x).unwrap();
            let pm = predict_proba(&m, &x).unwrap();
            for i in 0..150 {
                assert!((pb[(i, 1)] - pm[(i, 1)]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn separated_blobs_are_fit_perfectly() {
        let mut rng = crate::exec::rng_for(13, 0);
        let centres = [(0.0, 0.0), (6.0, 0.0), (0.0, 6.0)];
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for (c, &(cx, cy)) in centres.iter().enumerate() {
            for _ in 0..40 {
                rows.push(cx + rng.sample::<f64, _>(StandardNormal) * 0.5);
                rows.push(cy + rng.sample::<f64, _>(StandardNormal) * 0.5);
                y.push(c);
            }
        }
        let x = DMatrix::from_row_slice(120, 2, &rows);
        let m = fit_multinomial_logistic(&x, &y, &vec![1.0; 120], 3, 1e-4).unwrap();
        let p = predict_proba(&m, &x).unwrap();
        for i in 0..120 {
            let row: Vec<f64> = (0..3).map(|c| p[(i, c)]).collect();
            let arg = (0..3).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(arg, y[i]);
        }
    }

    #[test]
    fn uninformative_features_recover_class_log_odds() {
        let mut rng = crate::exec::rng_for(14, 0);
        let n = 3000;
        let x = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let m = fit_multinomial_logistic(&x, &y, &vec![1.0; n], 3, 1.0).unwrap();
        let counts: Vec<f64> = (0..3).map(|c| y.iter().filter(|&&v| v == c).count() as f64).collect();
        let logs: Vec<f64> = counts.iter().map(|c| c.ln()).collect();
        let mean = logs.iter().sum::<f64>() / 3.0;
        for (c, coefs) in m.coefficients.iter().enumerate() {
            for b in coefs {
                // sampling noise in a finite sample is ~1/sqrt(n); the oracle
                // is the closed-form intercept, slopes shrink toward zero
                assert!(b.abs() < 0.06, "slope {b}");
            }
            assert!((m.intercepts[c] - (logs[c] - mean)).abs() < 1e-2);
        }
    }

    #[test]
    fn predict_proba_properties() {
        let zero = LogisticModel {
            kind: LogisticKind::Multinomial,
            coefficients: vec![vec![0.0; 2]; 4],
            intercepts: vec![0.0; 4],
            l2_lambda: 0.0,
            converged: true,
            iterations: 0,
            n_effective: 0.0,
        };
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -3.0, 0.5]);
        let p = predict_proba(&zero, &x).unwrap();
        assert!(p.iter().all(|v| (v - 0.25).abs() < 1e-15));
        assert!(matches!(
            predict_proba(&zero, &DMatrix::zeros(1, 3)),
            Err(Error::DimensionMismatch { .. })
        ));

        let bin = LogisticModel {
            kind: LogisticKind::Binary,
            coefficients: vec![vec![2.0, -1.0]],
            intercepts: vec![-1.0],
            l2_lambda: 0.0,
            converged: true,
            iterations: 0,
            n_effective: 0.0,
        };
        // 2·1 − 1·1 − 1 = 0
        assert_eq!(bin.positive_probability(&[1.0, 1.0]), 0.5);
        let mut prev = 0.0;
        for k in 0..50 {
            let v = bin.positive_probability(&[-3.0 + 0.1 * k as f64, 0.3]);
            assert!(v > prev);
            prev = v;
        }
        let rows = DMatrix::from_fn(20, 2, |i, j| (i as f64 - 10.0) * 0.3 + j as f64);
        let pr = predict_proba(&bin, &rows).unwrap();
        for i in 0..20 {
            assert!((pr[(i, 0)] + pr[(i, 1)] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn irls_objective_never_decreases() {
        let (x, y) = logit_data(100, &[2.0, -1.0], 0.5, 21);
        let w = vec![1.0; 100];
        let m = fit_binary_logistic(&x, &y, &w, 0.01).unwrap();
        let start = {
            let rate = y.iter().filter(|&&v| v).count() as f64 / 100.0;
            vec![(rate / (1.0 - rate)).ln(), 0.0, 0.0]
        };
        let fitted = [m.intercepts[0], m.coefficients[0][0], m.coefficients[0][1]];
        assert!(binary_objective(&x, &y, &w, 0.01, &fitted) >= binary_objective(&x, &y, &w, 0.01, &start) - 1e-10);
        let g = binary_gradient(&x, &y, &w, 0.01, &fitted);
        assert!(g.iter().all(|v| v.abs() < 1e-6));
    }
}
