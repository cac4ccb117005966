//! Robust location/scale estimation: median, MAD, and the Gaussian error
//! model used to quantify prediction uncertainty from residuals that may
//! contain gross errors.

use serde::{Deserialize, Serialize};

use super::{SolverError, SIGMA_FLOOR};

/// Consistency factor making the MAD unbiased for the normal sd.
pub const MAD_CONSISTENCY: f64 = 1.4826;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianErrorModel {
    pub mu: f64,
    pub sigma: f64,
}

pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Median absolute deviation (raw, without the consistency factor).
pub fn mad(values: &[f64]) -> f64 {
    let m = median(values);
    let devs: Vec<f64> = values.iter().map(|v| (v - m).abs()).collect();
    median(&devs)
}

/// mu = median, sigma = max(1.4826 * MAD, sigma_floor). Tolerates up to 50%
/// contamination before breakdown.
pub fn robust_gaussian_fit(residuals: &[f64]) -> Result<GaussianErrorModel, SolverError> {
    if residuals.len() < 30 {
        return Err(SolverError::TooFewSamples { got: residuals.len(), need: 30 });
    }
    let mu = median(residuals);
    let sigma = (MAD_CONSISTENCY * mad(residuals)).max(SIGMA_FLOOR);
    Ok(GaussianErrorModel { mu, sigma })
}
