//! Standard dynamic linear model predict/update step with the Joseph-form
//! covariance update, which preserves symmetry across long chains.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::SolverError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KalmanState {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl KalmanState {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Self {
        KalmanState { mean, covariance }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Posterior state (equals the prediction when no observation arrived).
    pub state: KalmanState,
    /// One-step state prediction before the update.
    pub predicted: KalmanState,
    /// Observation-space predictive mean and covariance, when an observation
    /// model row was supplied.
    pub obs_predictive: Option<(DVector<f64>, DMatrix<f64>)>,
    /// Gaussian log-density of the observation under the predictive, for
    /// likelihood-based calibration.
    pub log_likelihood: Option<f64>,
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// One predict/update cycle.
///
/// predict: mean <- G mean, cov <- G cov G^T + W
/// update (obs present): Joseph-form Kalman gain update with observation
/// matrix F and observation covariance V. A missing observation skips the
/// update entirely.
pub fn kalman_step(
    state: &KalmanState,
    f_obs: &DMatrix<f64>,
    g: &DMatrix<f64>,
    w: &DMatrix<f64>,
    v: &DMatrix<f64>,
    obs: Option<&DVector<f64>>,
) -> Result<StepOutput, SolverError> {
    let pred_mean = g * &state.mean;
    let mut pred_cov = g * &state.covariance * g.transpose() + w;
    symmetrize(&mut pred_cov);
    let predicted = KalmanState::new(pred_mean.clone(), pred_cov.clone());

    let obs_pred_mean = f_obs * &pred_mean;
    let mut obs_pred_cov = f_obs * &pred_cov * f_obs.transpose() + v;
    symmetrize(&mut obs_pred_cov);

    let Some(y) = obs else {
        return Ok(StepOutput {
            state: predicted.clone(),
            predicted,
            obs_predictive: Some((obs_pred_mean, obs_pred_cov)),
            log_likelihood: None,
        });
    };

    let chol = Cholesky::new(obs_pred_cov.clone()).ok_or_else(|| {
        SolverError::NumericalBreakdown("innovation covariance not positive definite".into())
    })?;
    let innovation = y - &obs_pred_mean;
    // gain K = P F^T Q^{-1}
    let pft = &pred_cov * f_obs.transpose();
    let gain = &pft * chol.inverse();
    let post_mean = &pred_mean + &gain * &innovation;
    // Joseph form: (I - K F) P (I - K F)^T + K V K^T
    let dim = pred_mean.len();
    let ikf = DMatrix::identity(dim, dim) - &gain * f_obs;
    let mut post_cov = &ikf * &pred_cov * ikf.transpose() + &gain * v * gain.transpose();
    symmetrize(&mut post_cov);

    // log N(y; f, Q)
    let k = y.len() as f64;
    let solved = chol.solve(&innovation);
    let maha = innovation.dot(&solved);
    let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let ll = -0.5 * (k * (2.0 * std::f64::consts::PI).ln() + logdet + maha);

    Ok(StepOutput {
        state: KalmanState::new(post_mean, post_cov),
        predicted,
        obs_predictive: Some((obs_pred_mean, obs_pred_cov)),
        log_likelihood: Some(ll),
    })
}
