//! Log-sinh variance-stabilizing transformation and its maximum-likelihood
//! calibration, used by all prediction-based tests.
//!
//! The transform is z = (1/b) * ln(sinh(a + b * (y - y_shift))). It is
//! strictly increasing, near-logarithmic for small arguments and near-linear
//! for large ones, which compresses the right tail of skewed nonnegative
//! variables such as rainfall and wind gusts.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floor on the scale parameter b; below this the transform is numerically
/// indistinguishable from affine.
pub const B_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TransformSpec {
    Identity,
    LogSinh { a: f64, b: f64, y_shift: f64 },
}

#[derive(Debug, Error, PartialEq)]
pub enum TransformError {
    #[error("log-sinh argument {0} is not positive")]
    DomainError(f64),
    #[error("samples are degenerate (constant or too few)")]
    FitDegenerate,
}

/// ln(sinh(x)) computed without overflow for large x:
/// ln(sinh(x)) = x + ln((1 - e^{-2x}) / 2) for x > 0.
fn ln_sinh(x: f64) -> f64 {
    debug_assert!(x > 0.0);
    x + (-(-2.0 * x).exp_m1() / 2.0).ln()
}

/// Inverse of ln_sinh: asinh(e^u), stable for large u via
/// asinh(t) = ln(t + sqrt(t^2 + 1)) = u + ln(1 + sqrt(1 + e^{-2u})) - ln... ;
/// for large u we use asinh(e^u) ~ u + ln 2 with an exact correction.
fn inv_ln_sinh(u: f64) -> f64 {
    if u > 30.0 {
        // e^u overflows nothing here, but sqrt(e^{2u}+1) ~ e^u; the exact
        // correction term ln(1 + e^{-2u})/... collapses below f64 epsilon.
        u + std::f64::consts::LN_2
    } else {
        u.exp().asinh()
    }
}

impl TransformSpec {
    /// Forward transform, strictly increasing in y.
    pub fn forward(&self, y: f64) -> Result<f64, TransformError> {
        match *self {
            TransformSpec::Identity => Ok(y),
            TransformSpec::LogSinh { a, b, y_shift } => {
                let arg = a + b * (y - y_shift);
                if arg <= 0.0 {
                    return Err(TransformError::DomainError(arg));
                }
                Ok(ln_sinh(arg) / b)
            }
        }
    }

    /// Inverse transform; round-trips with `forward` to 1e-9 relative.
    pub fn inverse(&self, z: f64) -> Result<f64, TransformError> {
        match *self {
            TransformSpec::Identity => Ok(z),
            TransformSpec::LogSinh { a, b, y_shift } => {
                let arg = inv_ln_sinh(b * z);
                Ok(y_shift + (arg - a) / b)
            }
        }
    }

    /// Derivative dz/dy = coth(a + b*(y - y_shift)); 1 for Identity.
    pub fn derivative(&self, y: f64) -> Result<f64, TransformError> {
        match *self {
            TransformSpec::Identity => Ok(1.0),
            TransformSpec::LogSinh { a, b, y_shift } => {
                let arg = a + b * (y - y_shift);
                if arg <= 0.0 {
                    return Err(TransformError::DomainError(arg));
                }
                Ok(1.0 / arg.tanh())
            }
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, TransformSpec::Identity)
    }

    /// Forward transform with the sinh argument clamped away from zero.
    /// Used when transforming predictor values that may fall slightly below
    /// the calibration range; a clamped value maps to a very negative z,
    /// which is the right behaviour for scoring.
    pub fn forward_clamped(&self, y: f64) -> f64 {
        match *self {
            TransformSpec::Identity => y,
            TransformSpec::LogSinh { a, b, y_shift } => {
                let arg = (a + b * (y - y_shift)).max(1e-9);
                ln_sinh(arg) / b
            }
        }
    }
}

/// Profile Gaussian log-likelihood of the transformed samples, including the
/// Jacobian term sum ln|dz/dy|. Mean and variance are profiled out.
fn log_sinh_loglik(a: f64, b: f64, y_shift: f64, samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let mut zs = Vec::with_capacity(samples.len());
    let mut jac = 0.0;
    for &y in samples {
        let arg = a + b * (y - y_shift);
        if arg <= 0.0 {
            return f64::NEG_INFINITY;
        }
        zs.push(ln_sinh(arg) / b);
        jac += (1.0 / arg.tanh()).ln();
    }
    let mean = zs.iter().sum::<f64>() / n;
    let var = zs.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / n;
    if var <= 0.0 || !var.is_finite() {
        return f64::NEG_INFINITY;
    }
    -0.5 * n * var.ln() + jac
}

/// Nelder-Mead simplex minimization in 2 dimensions. Deterministic.
fn nelder_mead_2d<F: FnMut(&[f64; 2]) -> f64>(
    mut f: F,
    start: [f64; 2],
    step: f64,
    iters: usize,
) -> [f64; 2] {
    let mut pts = [
        start,
        [start[0] + step, start[1]],
        [start[0], start[1] + step],
    ];
    let mut vals = [f(&pts[0]), f(&pts[1]), f(&pts[2])];
    for _ in 0..iters {
        // order ascending by value
        let mut idx = [0usize, 1, 2];
        idx.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap());
        let (best, mid, worst) = (idx[0], idx[1], idx[2]);
        if (vals[worst] - vals[best]).abs() < 1e-12 {
            break;
        }
        let centroid = [
            (pts[best][0] + pts[mid][0]) / 2.0,
            (pts[best][1] + pts[mid][1]) / 2.0,
        ];
        let refl = [
            centroid[0] + (centroid[0] - pts[worst][0]),
            centroid[1] + (centroid[1] - pts[worst][1]),
        ];
        let fr = f(&refl);
        if fr < vals[best] {
            let exp = [
                centroid[0] + 2.0 * (centroid[0] - pts[worst][0]),
                centroid[1] + 2.0 * (centroid[1] - pts[worst][1]),
            ];
            let fe = f(&exp);
            if fe < fr {
                pts[worst] = exp;
                vals[worst] = fe;
            } else {
                pts[worst] = refl;
                vals[worst] = fr;
            }
        } else if fr < vals[mid] {
            pts[worst] = refl;
            vals[worst] = fr;
        } else {
            let contr = [
                centroid[0] + 0.5 * (pts[worst][0] - centroid[0]),
                centroid[1] + 0.5 * (pts[worst][1] - centroid[1]),
            ];
            let fc = f(&contr);
            if fc < vals[worst] {
                pts[worst] = contr;
                vals[worst] = fc;
            } else {
                // shrink toward best
                for i in 0..3 {
                    if i != best {
                        pts[i] = [
                            pts[best][0] + 0.5 * (pts[i][0] - pts[best][0]),
                            pts[best][1] + 0.5 * (pts[i][1] - pts[best][1]),
                        ];
                        vals[i] = f(&pts[i]);
                    }
                }
            }
        }
    }
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap());
    pts[idx[0]]
}

/// Maximum-likelihood fit of the log-sinh transform. y_shift is fixed at
/// min(samples) - 0.1 * (max - min) so the sinh argument is positive over the
/// calibration range; (a, b) are searched on a log scale with a simplex.
pub fn fit_log_sinh(samples: &[f64]) -> Result<TransformSpec, TransformError> {
    if samples.len() < 50 || samples.iter().any(|v| !v.is_finite()) {
        return Err(TransformError::FitDegenerate);
    }
    let min = samples.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if range <= 0.0 {
        return Err(TransformError::FitDegenerate);
    }
    let y_shift = min - 0.1 * range;

    // (log a, log b) parameterization keeps both positive.
    let start = [0.1f64.ln(), (1.0 / range).ln()];
    let start_ll = log_sinh_loglik(start[0].exp(), start[1].exp(), y_shift, samples);
    let objective = |p: &[f64; 2]| -> f64 {
        let a = p[0].exp();
        let b = p[1].exp().max(B_FLOOR);
        -log_sinh_loglik(a, b, y_shift, samples)
    };
    let best = nelder_mead_2d(objective, start, 1.0, 400);
    let a = best[0].exp();
    let b = best[1].exp().max(B_FLOOR);
    let final_ll = log_sinh_loglik(a, b, y_shift, samples);
    // Optimizer sanity: never worse than the starting point.
    debug_assert!(final_ll >= start_ll - 1e-9);
    if !final_ll.is_finite() {
        return Err(TransformError::FitDegenerate);
    }
    Ok(TransformSpec::LogSinh { a, b, y_shift })
}

/// Sample skewness (biased form, fine for the diagnostics here).
pub fn skewness(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let m2 = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m3 = samples.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
    m3 / m2.powf(1.5)
}
