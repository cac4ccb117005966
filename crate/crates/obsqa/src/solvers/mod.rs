//! Numerical workhorses shared by all tests: LASSO via coordinate descent,
//! robust Gaussian error models, Kalman filter primitives, EM for
//! Gaussian-mixture Bayesian model averaging, and the normal CDF.

pub mod bma;
pub mod kalman;
pub mod lasso;
pub mod normal;
pub mod robust;

pub use bma::{bma_fit, BmaWeights};
pub use kalman::{kalman_step, KalmanState, StepOutput};
pub use lasso::{lasso_fit, lasso_kkt_residual, lasso_lambda_max, lasso_objective, LassoModel};
pub use normal::{normal_cdf, normal_quantile, std_normal_cdf, std_normal_quantile};
pub use robust::{mad, median, robust_gaussian_fit, GaussianErrorModel};

use thiserror::Error;

/// Floor on every estimated standard deviation, in transformed units.
pub const SIGMA_FLOOR: f64 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum SolverError {
    #[error("coordinate descent did not converge after {0} sweeps")]
    NotConverged(usize),
    #[error("too few samples: got {got}, need {need}")]
    TooFewSamples { got: usize, need: usize },
    #[error("numerical breakdown: {0}")]
    NumericalBreakdown(String),
    #[error("degenerate problem: {0}")]
    Degenerate(String),
}
