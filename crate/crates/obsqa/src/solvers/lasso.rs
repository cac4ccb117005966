//! LASSO by cyclic coordinate descent on standardized predictors with
//! precomputed Gram ("covariance") updates.
//!
//! Minimizes (1/2n) * ||y - b0 - X b||^2 + lambda * ||b||_1.
//! Coefficients are reported on the original predictor scale.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::SolverError;

pub const MAX_SWEEPS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoModel {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub lambda: f64,
    pub predictor_means: Vec<f64>,
    pub predictor_scales: Vec<f64>,
}

impl LassoModel {
    /// Prediction on the original predictor scale. Missing predictors should
    /// be imputed with `predictor_means` by the caller beforehand.
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept
            + x.iter()
                .zip(&self.coefficients)
                .map(|(xi, bi)| xi * bi)
                .sum::<f64>()
    }

    pub fn active_set(&self) -> Vec<usize> {
        self.coefficients
            .iter()
            .enumerate()
            .filter(|(_, c)| **c != 0.0)
            .map(|(j, _)| j)
            .collect()
    }
}

fn soft_threshold(x: f64, lambda: f64) -> f64 {
    if x > lambda {
        x - lambda
    } else if x < -lambda {
        x + lambda
    } else {
        0.0
    }
}

struct Standardized {
    xs: DMatrix<f64>,
    means: Vec<f64>,
    scales: Vec<f64>,
    /// columns with zero variance, excluded from the solve
    dropped: Vec<bool>,
}

fn standardize(x: &DMatrix<f64>) -> Standardized {
    let n = x.nrows();
    let p = x.ncols();
    let mut xs = x.clone();
    let mut means = vec![0.0; p];
    let mut scales = vec![1.0; p];
    let mut dropped = vec![false; p];
    for j in 0..p {
        let col = x.column(j);
        let mean = col.sum() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        means[j] = mean;
        if var <= 0.0 {
            dropped[j] = true;
            for i in 0..n {
                xs[(i, j)] = 0.0;
            }
        } else {
            let sd = var.sqrt();
            scales[j] = sd;
            for i in 0..n {
                xs[(i, j)] = (x[(i, j)] - mean) / sd;
            }
        }
    }
    Standardized { xs, means, scales, dropped }
}

/// Smallest lambda at which the LASSO solution is entirely zero:
/// max_j |(1/n) * xs_j^T (y - ybar)|.
pub fn lasso_lambda_max(x: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    let n = x.nrows() as f64;
    let ybar = y.sum() / n;
    let std = standardize(x);
    let mut best: f64 = 0.0;
    for j in 0..x.ncols() {
        if std.dropped[j] {
            continue;
        }
        let dot: f64 = std
            .xs
            .column(j)
            .iter()
            .zip(y.iter())
            .map(|(xij, yi)| xij * (yi - ybar))
            .sum();
        best = best.max((dot / n).abs());
    }
    best
}

/// Cyclic coordinate descent. Convergence when the largest coefficient change
/// in a sweep falls below tol * sd(y).
pub fn lasso_fit(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    lambda: f64,
    tol: f64,
) -> Result<LassoModel, SolverError> {
    let n = x.nrows();
    let p = x.ncols();
    assert!(lambda >= 0.0 && tol > 0.0);
    if n < 10 {
        return Err(SolverError::TooFewSamples { got: n, need: 10 });
    }
    assert_eq!(y.len(), n, "predictor/response length mismatch");

    let nf = n as f64;
    let ybar = y.sum() / nf;
    let y_sd = (y.iter().map(|v| (v - ybar).powi(2)).sum::<f64>() / nf)
        .sqrt()
        .max(1e-12);
    let std = standardize(x);

    // Gram matrix of standardized predictors and predictor-response products,
    // both scaled by 1/n.
    let gram = &std.xs.transpose() * &std.xs / nf;
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - ybar));
    let xty = &std.xs.transpose() * &yc / nf;

    let mut beta = vec![0.0f64; p];
    let mut converged = false;
    for _sweep in 0..MAX_SWEEPS {
        let mut max_delta: f64 = 0.0;
        for j in 0..p {
            if std.dropped[j] {
                continue;
            }
            // gradient of the smooth part with coordinate j removed
            let mut rho = xty[j];
            for k in 0..p {
                if k != j && beta[k] != 0.0 {
                    rho -= gram[(j, k)] * beta[k];
                }
            }
            // gram[(j,j)] == 1 for standardized columns
            let new = soft_threshold(rho, lambda) / gram[(j, j)];
            max_delta = max_delta.max((new - beta[j]).abs());
            beta[j] = new;
        }
        if max_delta < tol * y_sd {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(SolverError::NotConverged(MAX_SWEEPS));
    }

    // back to original scale
    let mut coefficients = vec![0.0f64; p];
    let mut intercept = ybar;
    for j in 0..p {
        if std.dropped[j] {
            continue;
        }
        coefficients[j] = beta[j] / std.scales[j];
        intercept -= coefficients[j] * std.means[j];
    }
    Ok(LassoModel {
        intercept,
        coefficients,
        lambda,
        predictor_means: std.means,
        predictor_scales: std.scales,
    })
}

/// KKT stationarity residual of a fitted model: max over active j of
/// ||(1/n) xs_j^T r| - lambda| and over inactive j of the positive part of
/// |(1/n) xs_j^T r| - lambda. Zero at the exact solution.
pub fn lasso_kkt_residual(
    model: &LassoModel,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
) -> f64 {
    let n = x.nrows();
    let nf = n as f64;
    let std = standardize(x);
    let resid: Vec<f64> = (0..n)
        .map(|i| {
            let mut pred = model.intercept;
            for j in 0..x.ncols() {
                pred += x[(i, j)] * model.coefficients[j];
            }
            y[i] - pred
        })
        .collect();
    let mut worst: f64 = 0.0;
    for j in 0..x.ncols() {
        if std.dropped[j] {
            continue;
        }
        let grad: f64 = std
            .xs
            .column(j)
            .iter()
            .zip(&resid)
            .map(|(xij, r)| xij * r)
            .sum::<f64>()
            / nf;
        let viol = if model.coefficients[j] != 0.0 {
            (grad.abs() - model.lambda).abs()
        } else {
            (grad.abs() - model.lambda).max(0.0)
        };
        worst = worst.max(viol);
    }
    worst
}

/// Penalized objective value, used by tests as an independent check.
pub fn lasso_objective(
    model: &LassoModel,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    lambda: f64,
) -> f64 {
    let n = x.nrows();
    let nf = n as f64;
    let mut sse = 0.0;
    for i in 0..n {
        let mut pred = model.intercept;
        for j in 0..x.ncols() {
            pred += x[(i, j)] * model.coefficients[j];
        }
        sse += (y[i] - pred).powi(2);
    }
    // the l1 penalty applies on the standardized scale
    let std = standardize(x);
    let l1: f64 = model
        .coefficients
        .iter()
        .enumerate()
        .map(|(j, c)| (c * std.scales[j]).abs())
        .sum();
    sse / (2.0 * nf) + lambda * l1
}
