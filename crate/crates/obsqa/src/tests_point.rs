//! The three single-prediction tests — spatial, trend, and gridded — sharing
//! one pipeline: predictor construction, LASSO (where applicable), a
//! transform-space residual error model, and a predictive distribution.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assessment::{p1_from_predictive, TestId, TestResult};
use crate::core::{
    DailySeries, GridProduct, GridProductKind, Observation, StationMeta, StationSource,
    VariableKind,
};
use crate::solvers::{
    lasso_fit, lasso_lambda_max, robust_gaussian_fit, GaussianErrorModel, LassoModel,
    SolverError, SIGMA_FLOOR,
};
use crate::transform::{fit_log_sinh, TransformSpec};

pub const EARTH_RADIUS_KM: f64 = 6371.0;
pub const DEFAULT_RADIUS_KM: f64 = 200.0;
pub const MIN_NEIGHBORS: usize = 2;

#[derive(Debug, Error)]
pub enum PointTestError {
    #[error("fewer than {MIN_NEIGHBORS} usable neighbor stations")]
    NoNeighbors,
    #[error("insufficient overlap: {got} days, need {need}")]
    InsufficientOverlap { got: usize, need: usize },
    #[error("product {product:?} does not assess {variable:?}")]
    ProductVariableMismatch {
        product: GridProductKind,
        variable: VariableKind,
    },
    #[error("degenerate calibration data: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// A test could not run for this observation; the reason feeds the traceback.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("not applicable: {0}")]
pub struct NotApplicable(pub String);

#[derive(Debug, Error)]
pub enum GridError {
    #[error("site ({lat}, {lon}) outside grid bounding box")]
    OutOfBounds { lat: f64, lon: f64 },
    #[error("no grid layer for {0}")]
    UnknownDate(NaiveDate),
    #[error("missing cell value near ({lat}, {lon})")]
    MissingCell { lat: f64, lon: f64 },
}

/// A test's probabilistic prediction for today's value: Gaussian in the
/// transformed space, with an optional point mass at the variable's lower
/// bound (rain dry days).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDistribution {
    pub mean: f64,
    pub sigma: f64,
    pub transform: TransformSpec,
    pub zero_mass: Option<f64>,
    pub lower_bound: Option<f64>,
}

/// Calibration knobs shared by the point tests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PointTestConfig {
    pub min_overlap_days: usize,
    pub cv_folds: usize,
    pub cv_grid_points: usize,
    pub lasso_tol: f64,
    /// transform kind per variable; true = log-sinh, false = identity
    pub log_sinh_variables: Vec<VariableKind>,
}

impl Default for PointTestConfig {
    fn default() -> Self {
        PointTestConfig {
            min_overlap_days: 365,
            cv_folds: 5,
            cv_grid_points: 30,
            lasso_tol: 1e-7,
            log_sinh_variables: vec![VariableKind::Rain, VariableKind::WindGust],
        }
    }
}

impl PointTestConfig {
    pub fn transform_kind_for(&self, variable: VariableKind) -> bool {
        self.log_sinh_variables.contains(&variable)
    }
}

/// Great-circle distance on a spherical Earth (haversine), in km.
pub fn great_circle_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = (lat2 - lat1).to_radians();
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * a.sqrt().asin()
}

/// Official stations within `radius_km` of the target, sorted by ascending
/// distance (ties by id). The radius boundary is inclusive.
pub fn select_neighbors(
    target: &StationMeta,
    candidates: &[StationMeta],
    radius_km: f64,
) -> Vec<StationMeta> {
    let mut within: Vec<(f64, &StationMeta)> = candidates
        .iter()
        .filter(|c| c.source == StationSource::Official)
        .map(|c| {
            (
                great_circle_km(target.latitude, target.longitude, c.latitude, c.longitude),
                c,
            )
        })
        .filter(|(d, _)| *d <= radius_km)
        .collect();
    within.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then_with(|| a.1.id.cmp(&b.1.id)));
    within.into_iter().map(|(_, s)| s.clone()).collect()
}

/// Persisted spatial-test model for one (station, variable).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialModel {
    pub target_station: String,
    pub variable: VariableKind,
    pub neighbor_ids: Vec<String>,
    pub lasso: LassoModel,
    pub transform: TransformSpec,
    pub error: GaussianErrorModel,
    pub calibration_window: (NaiveDate, NaiveDate),
    pub cal_mse: f64,
    pub zero_mass: Option<f64>,
}

/// Trend-test model: the spatial pipeline fitted on day-to-day differences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendModel(pub SpatialModel);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GriddedModel {
    pub target_station: String,
    pub variable: VariableKind,
    pub product: GridProductKind,
    pub transform: TransformSpec,
    pub error: GaussianErrorModel,
    pub bias_slope: f64,
    pub bias_intercept: f64,
    pub cal_mse: f64,
    pub calibration_window: (NaiveDate, NaiveDate),
    pub zero_mass: Option<f64>,
}

pub(crate) fn fit_transform(
    values: &[f64],
    use_log_sinh: bool,
) -> Result<TransformSpec, PointTestError> {
    if use_log_sinh {
        fit_log_sinh(values).map_err(|e| PointTestError::Degenerate(e.to_string()))
    } else {
        Ok(TransformSpec::Identity)
    }
}

pub(crate) fn zero_mass_for(variable: VariableKind, values: &[f64]) -> Option<f64> {
    if variable == VariableKind::Rain {
        let zeros = values.iter().filter(|v| **v <= 0.0).count();
        Some(zeros as f64 / values.len() as f64)
    } else {
        None
    }
}

/// Aligned design matrix rows: dates where the target and every predictor
/// series have a value.
pub(crate) fn align(
    target: &DailySeries,
    predictors: &[&DailySeries],
) -> (Vec<NaiveDate>, Vec<f64>, Vec<Vec<f64>>) {
    let mut dates = Vec::new();
    let mut y = Vec::new();
    let mut xs = Vec::new();
    'day: for (&date, &tv) in &target.values {
        let mut row = Vec::with_capacity(predictors.len());
        for p in predictors {
            match p.get(date) {
                Some(v) => row.push(v),
                None => continue 'day,
            }
        }
        dates.push(date);
        y.push(tv);
        xs.push(row);
    }
    (dates, y, xs)
}

pub(crate) struct CvFit {
    #[allow(dead_code)] // diagnostic: which penalty the 1-SE rule chose
    pub(crate) lambda: f64,
    pub(crate) model: LassoModel,
    pub(crate) oof_residuals: Vec<f64>,
    pub(crate) oof_predictions: Vec<f64>,
    pub(crate) cal_mse: f64,
}

/// 5-fold cross-validated LASSO in transformed space with the 1-SE rule.
/// Folds are assigned deterministically by row index modulo `folds`.
pub(crate) fn cv_lasso(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    folds: usize,
    grid_points: usize,
    tol: f64,
) -> Result<CvFit, PointTestError> {
    let n = x.nrows();
    let lmax = lasso_lambda_max(x, y);
    if lmax <= 0.0 {
        // constant target in transformed space: intercept-only model
        let model = lasso_fit(x, y, 0.0, tol)?;
        let ybar = y.sum() / n as f64;
        let resid: Vec<f64> = y.iter().map(|v| v - ybar).collect();
        let mse = resid.iter().map(|r| r * r).sum::<f64>() / n as f64;
        return Ok(CvFit {
            lambda: 0.0,
            model,
            oof_residuals: resid,
            oof_predictions: vec![ybar; n],
            cal_mse: mse,
        });
    }
    let grid: Vec<f64> = (0..grid_points)
        .map(|i| {
            let t = i as f64 / (grid_points - 1) as f64;
            // descending from lmax to 1e-3 * lmax, log spaced
            lmax * (1e-3f64).powf(t)
        })
        .collect();

    let fold_of: Vec<usize> = (0..n).map(|i| i % folds).collect();
    // per-lambda per-fold held-out MSE
    let mut fold_mse = vec![vec![0.0f64; folds]; grid.len()];
    // per-lambda out-of-fold predictions for the residual pass
    let mut oof_pred = vec![vec![0.0f64; n]; grid.len()];

    for f in 0..folds {
        let train_rows: Vec<usize> = (0..n).filter(|i| fold_of[*i] != f).collect();
        let test_rows: Vec<usize> = (0..n).filter(|i| fold_of[*i] == f).collect();
        let xt = DMatrix::from_fn(train_rows.len(), x.ncols(), |i, j| x[(train_rows[i], j)]);
        let yt = DVector::from_fn(train_rows.len(), |i, _| y[train_rows[i]]);
        for (li, &lambda) in grid.iter().enumerate() {
            let model = lasso_fit(&xt, &yt, lambda, tol)?;
            let mut sse = 0.0;
            for &r in &test_rows {
                let row: Vec<f64> = (0..x.ncols()).map(|j| x[(r, j)]).collect();
                let pred = model.predict(&row);
                oof_pred[li][r] = pred;
                sse += (y[r] - pred).powi(2);
            }
            fold_mse[li][f] = sse / test_rows.len() as f64;
        }
    }

    let mean_mse: Vec<f64> =
        fold_mse.iter().map(|ms| ms.iter().sum::<f64>() / folds as f64).collect();
    let (best_idx, best_mean) = mean_mse
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, m)| (i, *m))
        .unwrap();
    let best_var = fold_mse[best_idx]
        .iter()
        .map(|m| (m - best_mean).powi(2))
        .sum::<f64>()
        / (folds as f64 - 1.0);
    let best_se = (best_var / folds as f64).sqrt();
    // grid is descending in lambda; the 1-SE choice is the largest lambda
    // (smallest index) whose mean CV error is within one SE of the minimum.
    let chosen_idx = (0..grid.len())
        .find(|&i| mean_mse[i] <= best_mean + best_se)
        .unwrap_or(best_idx);
    let lambda = grid[chosen_idx];

    let model = lasso_fit(x, y, lambda, tol)?;
    let oof_predictions = oof_pred.swap_remove(chosen_idx);
    let oof_residuals: Vec<f64> =
        (0..n).map(|i| y[i] - oof_predictions[i]).collect();
    let cal_mse = oof_residuals.iter().map(|r| r * r).sum::<f64>() / n as f64;
    Ok(CvFit { lambda, model, oof_residuals, oof_predictions, cal_mse })
}

fn calibrate_lasso_pipeline(
    target: &DailySeries,
    neighbor_series: &BTreeMap<String, DailySeries>,
    config: &PointTestConfig,
    zero_mass_enabled: bool,
) -> Result<SpatialModel, PointTestError> {
    if neighbor_series.len() < MIN_NEIGHBORS {
        return Err(PointTestError::NoNeighbors);
    }
    let neighbor_ids: Vec<String> = neighbor_series.keys().cloned().collect();
    let predictors: Vec<&DailySeries> = neighbor_series.values().collect();
    let (dates, y_raw, x_raw) = align(target, &predictors);
    if dates.len() < config.min_overlap_days {
        return Err(PointTestError::InsufficientOverlap {
            got: dates.len(),
            need: config.min_overlap_days,
        });
    }

    let transform = fit_transform(&y_raw, config.transform_kind_for(target.variable))?;
    let zero_mass = if zero_mass_enabled {
        zero_mass_for(target.variable, &y_raw)
    } else {
        None
    };

    let n = dates.len();
    let p = neighbor_ids.len();
    let y = DVector::from_fn(n, |i, _| transform.forward_clamped(y_raw[i]));
    let x = DMatrix::from_fn(n, p, |i, j| transform.forward_clamped(x_raw[i][j]));

    let cv = cv_lasso(&x, &y, config.cv_folds, config.cv_grid_points, config.lasso_tol)?;
    let error = robust_gaussian_fit(&cv.oof_residuals)?;
    Ok(SpatialModel {
        target_station: target.station_id.clone(),
        variable: target.variable,
        neighbor_ids,
        lasso: cv.model,
        transform,
        error,
        calibration_window: (dates[0], dates[n - 1]),
        cal_mse: cv.cal_mse,
        zero_mass,
    })
}

/// Calibrate the spatial test: LASSO of the transformed target on the
/// transformed concurrent neighbor values, with an out-of-fold error model.
pub fn calibrate_spatial(
    target: &DailySeries,
    neighbor_series: &BTreeMap<String, DailySeries>,
    config: &PointTestConfig,
) -> Result<SpatialModel, PointTestError> {
    calibrate_lasso_pipeline(target, neighbor_series, config, true)
}

impl SpatialModel {
    /// Predictive distribution given today's neighbor values. Neighbors
    /// missing today are imputed with their calibration means; at least
    /// `MIN_NEIGHBORS` must report for the test to apply.
    pub fn predictive(
        &self,
        todays_neighbors: &BTreeMap<String, f64>,
    ) -> Result<(PredictiveDistribution, BTreeMap<String, f64>), NotApplicable> {
        let mut used = BTreeMap::new();
        let mut x = Vec::with_capacity(self.neighbor_ids.len());
        for (j, id) in self.neighbor_ids.iter().enumerate() {
            match todays_neighbors.get(id) {
                Some(&v) => {
                    used.insert(id.clone(), v);
                    x.push(self.transform.forward_clamped(v));
                }
                None => x.push(self.lasso.predictor_means[j]),
            }
        }
        if used.len() < MIN_NEIGHBORS {
            return Err(NotApplicable(format!(
                "only {} of {} neighbors reporting (need {MIN_NEIGHBORS})",
                used.len(),
                self.neighbor_ids.len()
            )));
        }
        let mean = self.lasso.predict(&x) + self.error.mu;
        let dist = PredictiveDistribution {
            mean,
            sigma: self.error.sigma.max(SIGMA_FLOOR),
            transform: self.transform,
            zero_mass: self.zero_mass,
            lower_bound: self.zero_mass.map(|_| 0.0),
        };
        Ok((dist, used))
    }
}

/// Score one observation against the spatial prediction from today's
/// neighbor values.
pub fn run_spatial_test(
    model: &SpatialModel,
    obs: &Observation,
    todays_neighbors: &BTreeMap<String, f64>,
) -> Result<TestResult, NotApplicable> {
    let (dist, used) = model.predictive(todays_neighbors)?;
    let p1 = p1_from_predictive(obs.value, &dist)
        .map_err(|e| NotApplicable(format!("transform domain: {e}")))?;
    let median = dist
        .transform
        .inverse(dist.mean)
        .map_err(|e| NotApplicable(format!("transform domain: {e}")))?;
    TestResult::from_p1(TestId::Spatial, p1, median, dist.sigma, model.cal_mse, used)
        .map_err(|e| NotApplicable(e.to_string()))
}

/// Calibrate the trend test: the spatial pipeline on day-to-day differences.
/// The rain point mass does not apply to differences.
pub fn calibrate_trend(
    target: &DailySeries,
    neighbor_series: &BTreeMap<String, DailySeries>,
    config: &PointTestConfig,
) -> Result<TrendModel, PointTestError> {
    let dtarget = target.differenced();
    let dneighbors: BTreeMap<String, DailySeries> = neighbor_series
        .iter()
        .map(|(id, s)| (id.clone(), s.differenced()))
        .collect();
    calibrate_lasso_pipeline(&dtarget, &dneighbors, config, false).map(TrendModel)
}

/// Score one observation against the predicted day-to-day change. The tested
/// quantity is the difference; the reported predictive median for today's
/// value shifts the predicted change by yesterday's observation.
pub fn run_trend_test(
    model: &TrendModel,
    obs: &Observation,
    yesterday_value: Option<f64>,
    todays_neighbor_diffs: &BTreeMap<String, f64>,
) -> Result<TestResult, NotApplicable> {
    let Some(prev) = yesterday_value else {
        return Err(NotApplicable("no previous-day observation".into()));
    };
    let (dist, used) = model.0.predictive(todays_neighbor_diffs)?;
    let delta = obs.value - prev;
    let p1 = p1_from_predictive(delta, &dist)
        .map_err(|e| NotApplicable(format!("transform domain: {e}")))?;
    let median_delta = dist
        .transform
        .inverse(dist.mean)
        .map_err(|e| NotApplicable(format!("transform domain: {e}")))?;
    TestResult::from_p1(
        TestId::Trend,
        p1,
        prev + median_delta,
        dist.sigma,
        model.0.cal_mse,
        used,
    )
    .map_err(|e| NotApplicable(e.to_string()))
}

/// Deterministic repeated-median-style robust line fit on a bounded pair
/// subsample: slope = median of pairwise slopes, intercept = median residual
/// offset.
fn robust_line(zg: &[f64], zt: &[f64], max_pairs: usize, seed: u64) -> (f64, f64) {
    let n = zg.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut slopes = Vec::with_capacity(max_pairs);
    let mut guard = 0;
    while slopes.len() < max_pairs && guard < max_pairs * 20 {
        guard += 1;
        let i = rng.gen_range(0..n);
        let j = rng.gen_range(0..n);
        if i == j {
            continue;
        }
        let dx = zg[j] - zg[i];
        if dx.abs() < 1e-12 {
            continue;
        }
        slopes.push((zt[j] - zt[i]) / dx);
    }
    if slopes.is_empty() {
        return (0.0, crate::solvers::median(zt));
    }
    let slope = crate::solvers::median(&slopes);
    let offsets: Vec<f64> = zg.iter().zip(zt).map(|(g, t)| t - slope * g).collect();
    (slope, crate::solvers::median(&offsets))
}

/// Calibrate the gridded-data test: a robust bias correction of the
/// transformed grid value plus a residual error model.
pub fn calibrate_gridded(
    target: &DailySeries,
    grid_series: &DailySeries,
    product: GridProductKind,
    config: &PointTestConfig,
) -> Result<GriddedModel, PointTestError> {
    if !product.supports(target.variable) {
        return Err(PointTestError::ProductVariableMismatch {
            product,
            variable: target.variable,
        });
    }
    let (dates, y_raw, x_raw) = align(target, &[grid_series]);
    if dates.len() < config.min_overlap_days {
        return Err(PointTestError::InsufficientOverlap {
            got: dates.len(),
            need: config.min_overlap_days,
        });
    }
    let transform = fit_transform(&y_raw, config.transform_kind_for(target.variable))?;
    let zero_mass = zero_mass_for(target.variable, &y_raw);

    let zt: Vec<f64> = y_raw.iter().map(|&v| transform.forward_clamped(v)).collect();
    let zg: Vec<f64> = x_raw.iter().map(|r| transform.forward_clamped(r[0])).collect();
    let (slope, intercept) = robust_line(&zg, &zt, 500, 0);
    let residuals: Vec<f64> = zt
        .iter()
        .zip(&zg)
        .map(|(t, g)| t - (intercept + slope * g))
        .collect();
    let error = robust_gaussian_fit(&residuals)?;
    let cal_mse = residuals.iter().map(|r| r * r).sum::<f64>() / residuals.len() as f64;
    Ok(GriddedModel {
        target_station: target.station_id.clone(),
        variable: target.variable,
        product,
        transform,
        error,
        bias_slope: slope,
        bias_intercept: intercept,
        cal_mse,
        calibration_window: (dates[0], *dates.last().unwrap()),
        zero_mass,
    })
}

/// Score one observation against the bias-corrected grid value.
pub fn run_gridded_test(
    model: &GriddedModel,
    obs: &Observation,
    todays_grid_value: Option<f64>,
) -> Result<TestResult, NotApplicable> {
    let Some(grid_value) = todays_grid_value else {
        return Err(NotApplicable("grid value missing for date".into()));
    };
    let zg = model.transform.forward_clamped(grid_value);
    let mean = model.bias_intercept + model.bias_slope * zg + model.error.mu;
    let dist = PredictiveDistribution {
        mean,
        sigma: model.error.sigma.max(SIGMA_FLOOR),
        transform: model.transform,
        zero_mass: model.zero_mass,
        lower_bound: model.zero_mass.map(|_| 0.0),
    };
    let p1 = p1_from_predictive(obs.value, &dist)
        .map_err(|e| NotApplicable(format!("transform domain: {e}")))?;
    let median = dist
        .transform
        .inverse(dist.mean)
        .map_err(|e| NotApplicable(format!("transform domain: {e}")))?;
    let mut used = BTreeMap::new();
    used.insert("grid_value".to_string(), grid_value);
    TestResult::from_p1(
        TestId::Gridded(model.product),
        p1,
        median,
        dist.sigma,
        model.cal_mse,
        used,
    )
    .map_err(|e| NotApplicable(e.to_string()))
}

/// Bilinear interpolation of the four surrounding cell centers; exactly the
/// cell value when the site coincides with a cell center.
pub fn extract_grid_value(
    grid: &GridProduct,
    lat: f64,
    lon: f64,
    date: NaiveDate,
) -> Result<f64, GridError> {
    let layer = grid.layer(date).ok_or(GridError::UnknownDate(date))?;
    let fr = (lat - grid.origin_lat) / grid.cell_dlat;
    let fc = (lon - grid.origin_lon) / grid.cell_dlon;
    let eps = 1e-9;
    if fr < -eps || fr > (grid.nrows - 1) as f64 + eps || fc < -eps
        || fc > (grid.ncols - 1) as f64 + eps
    {
        return Err(GridError::OutOfBounds { lat, lon });
    }
    let fr = fr.clamp(0.0, (grid.nrows - 1) as f64);
    let fc = fc.clamp(0.0, (grid.ncols - 1) as f64);
    let r0 = (fr.floor() as usize).min(grid.nrows.saturating_sub(2));
    let c0 = (fc.floor() as usize).min(grid.ncols.saturating_sub(2));
    let (r0, c0) = (
        if grid.nrows == 1 { 0 } else { r0 },
        if grid.ncols == 1 { 0 } else { c0 },
    );
    let tr = fr - r0 as f64;
    let tc = fc - c0 as f64;
    let at = |r: usize, c: usize| layer[r * grid.ncols + c];
    let (r1, c1) = (
        (r0 + 1).min(grid.nrows - 1),
        (c0 + 1).min(grid.ncols - 1),
    );
    let v00 = at(r0, c0);
    let v01 = at(r0, c1);
    let v10 = at(r1, c0);
    let v11 = at(r1, c1);
    let v = (1.0 - tr) * ((1.0 - tc) * v00 + tc * v01) + tr * ((1.0 - tc) * v10 + tc * v11);
    if v.is_nan() {
        return Err(GridError::MissingCell { lat, lon });
    }
    Ok(v)
}

/// Daily statistic matching the variable, for aggregating hourly values
/// (hour-of-day, value) to the daily quantity under assessment.
pub fn aggregate_hourly_to_daily(variable: VariableKind, hours: &[(f64, f64)]) -> Option<f64> {
    if hours.is_empty() {
        return None;
    }
    let max = hours.iter().map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);
    let min = hours.iter().map(|(_, v)| *v).fold(f64::INFINITY, f64::min);
    let at_hour = |h: f64| {
        hours
            .iter()
            .min_by(|a, b| {
                (a.0 - h).abs().partial_cmp(&(b.0 - h).abs()).unwrap()
            })
            .map(|(_, v)| *v)
    };
    match variable {
        VariableKind::Tmax | VariableKind::WindGust => Some(max),
        VariableKind::Tmin => Some(min),
        VariableKind::Rain => Some(hours.iter().map(|(_, v)| *v).sum()),
        VariableKind::Humidity9am => at_hour(9.0),
        VariableKind::Humidity3pm => at_hour(15.0),
    }
}
