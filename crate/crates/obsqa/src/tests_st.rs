//! The spatiotemporal test: screening for similar stations (Hampel filter,
//! trend analysis, ANOVA + Tukey HSD, LASSO), fitting the STAR/STAM/STLM
//! candidate models, and BMA-weighting their predictions.

use std::collections::BTreeMap;

use chrono::{Datelike, NaiveDate};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assessment::{TestId, TestResult};
use crate::core::{DailySeries, Observation, VariableKind};
use crate::solvers::{robust_gaussian_fit, BmaWeights, LassoModel, SolverError, SIGMA_FLOOR};
use crate::tests_point::{
    cv_lasso, fit_transform, zero_mass_for, NotApplicable, PointTestConfig, PointTestError,
};
use crate::transform::TransformSpec;

pub const HAMPEL_WINDOW: usize = 15;
pub const HAMPEL_K: f64 = 3.0;
pub const TUKEY_ALPHA: f64 = 0.05;
const DAYS_PER_YEAR: f64 = 365.25;
const N_SPLINE_KNOTS: usize = 8;

#[derive(Debug, Error)]
pub enum StError {
    #[error("no candidate station with sufficient overlap")]
    NoCandidates,
    #[error("insufficient overlap: {got} days, need {need}")]
    InsufficientOverlap { got: usize, need: usize },
    #[error("degenerate data: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Solver(SolverError),
}

impl From<PointTestError> for StError {
    fn from(e: PointTestError) -> Self {
        match e {
            PointTestError::InsufficientOverlap { got, need } => {
                StError::InsufficientOverlap { got, need }
            }
            PointTestError::Solver(s) => StError::Solver(s),
            other => StError::Degenerate(other.to_string()),
        }
    }
}

/// Hampel filter output: per-date outlier flags and the cleaned series with
/// flagged points replaced by their window median.
#[derive(Debug, Clone, PartialEq)]
pub struct HampelOutput {
    pub flags: Vec<(NaiveDate, bool)>,
    pub cleaned: DailySeries,
}

impl HampelOutput {
    pub fn outlier_fraction(&self) -> f64 {
        if self.flags.is_empty() {
            return 0.0;
        }
        self.flags.iter().filter(|(_, f)| *f).count() as f64 / self.flags.len() as f64
    }
}

/// Rolling-median outlier filter: a point is flagged iff it sits more than
/// `k` robust standard deviations from its centered window median. Edge
/// windows are truncated.
pub fn hampel_filter(series: &DailySeries, window: usize, k: f64) -> HampelOutput {
    assert!(window >= 3 && window % 2 == 1, "window must be odd and >= 3");
    let dates: Vec<NaiveDate> = series.values.keys().copied().collect();
    let xs: Vec<f64> = series.values.values().copied().collect();
    let half = window / 2;
    let n = xs.len();
    let mut flags = Vec::with_capacity(n);
    let mut cleaned = DailySeries::new(series.station_id.clone(), series.variable);
    for t in 0..n {
        let lo = t.saturating_sub(half);
        let hi = (t + half + 1).min(n);
        let win = &xs[lo..hi];
        let med = crate::solvers::median(win);
        let devs: Vec<f64> = win.iter().map(|x| (x - med).abs()).collect();
        let sigma = (1.4826 * crate::solvers::median(&devs)).max(SIGMA_FLOOR);
        let outlier = (xs[t] - med).abs() > k * sigma;
        flags.push((dates[t], outlier));
        cleaned
            .values
            .insert(dates[t], if outlier { med } else { xs[t] });
    }
    HampelOutput { flags, cleaned }
}

/// Per-candidate similarity verdict with the evidence behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningReport {
    pub candidate_id: String,
    pub hampel_outlier_fraction: f64,
    /// least-squares slope of the cleaned series, units per day
    pub trend_slope: f64,
    /// 0 = same Tukey group as the target, 1 = below, 2 = above,
    /// -1 = not analyzed (insufficient overlap)
    pub anova_group: i32,
    pub trend_compatible: bool,
    pub selected_by_lasso: bool,
    pub similar: bool,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Least-squares slope against day index, with its standard error.
fn slope_with_se(days: &[f64], vals: &[f64]) -> (f64, f64) {
    let n = days.len() as f64;
    let xbar = mean(days);
    let ybar = mean(vals);
    let sxx: f64 = days.iter().map(|x| (x - xbar) * (x - xbar)).sum();
    if sxx <= 0.0 {
        return (0.0, f64::INFINITY);
    }
    let sxy: f64 = days
        .iter()
        .zip(vals)
        .map(|(x, y)| (x - xbar) * (y - ybar))
        .sum();
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    let sse: f64 = days
        .iter()
        .zip(vals)
        .map(|(x, y)| {
            let r = y - intercept - slope * x;
            r * r
        })
        .sum();
    let s2 = sse / (n - 2.0).max(1.0);
    (slope, (s2 / sxx).sqrt())
}

/// Remove a 2-harmonic day-of-year cycle by least squares; returns residuals
/// aligned with the series' date order.
fn deseasonalize(series: &DailySeries) -> Vec<f64> {
    let n = series.values.len();
    let mut x = DMatrix::zeros(n, 5);
    let mut y = DVector::zeros(n);
    for (i, (&date, &v)) in series.values.iter().enumerate() {
        let h = harmonic_features(date.ordinal() as f64);
        x[(i, 0)] = 1.0;
        for j in 0..4 {
            x[(i, j + 1)] = h[j];
        }
        y[i] = v;
    }
    let beta = x
        .clone()
        .svd(true, true)
        .solve(&y, 1e-12)
        .expect("least squares on a full-rank harmonic basis");
    let fitted = x * beta;
    (0..n).map(|i| y[i] - fitted[i]).collect()
}

/// Monthly means of a per-day residual vector, keyed by (year, month).
fn monthly_means(dates: &[NaiveDate], residuals: &[f64]) -> Vec<f64> {
    let mut groups: BTreeMap<(i32, u32), (f64, usize)> = BTreeMap::new();
    for (d, r) in dates.iter().zip(residuals) {
        let e = groups.entry((d.year(), d.month())).or_insert((0.0, 0));
        e.0 += r;
        e.1 += 1;
    }
    groups.values().map(|(s, c)| s / *c as f64).collect()
}

/// CDF of the studentized range for `k` groups at infinite degrees of
/// freedom: P(Q <= q) = k * ∫ φ(z) [Φ(z) − Φ(z−q)]^(k−1) dz.
fn studentized_range_cdf(q: f64, k: usize) -> f64 {
    if q <= 0.0 {
        return 0.0;
    }
    // Simpson's rule; the integrand decays like φ(z) so [-8.5, 8.5] suffices.
    let (a, b, steps) = (-8.5f64, 8.5f64, 1700usize);
    let h = (b - a) / steps as f64;
    let f = |z: f64| {
        let phi = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let inner = crate::solvers::std_normal_cdf(z) - crate::solvers::std_normal_cdf(z - q);
        phi * inner.max(0.0).powi(k as i32 - 1)
    };
    let mut s = f(a) + f(b);
    for i in 1..steps {
        let z = a + i as f64 * h;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(z);
    }
    (k as f64 * s * h / 3.0).clamp(0.0, 1.0)
}

/// Upper-alpha quantile of the studentized range (df = ∞) by bisection.
pub fn studentized_range_quantile(alpha: f64, k: usize) -> f64 {
    assert!(k >= 2);
    let target = 1.0 - alpha;
    let (mut lo, mut hi) = (0.0f64, 30.0f64);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if studentized_range_cdf(mid, k) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Screen candidate stations for similarity with the target: Hampel-clean,
/// compare linear trends, group deseasonalized levels by ANOVA + Tukey HSD
/// on monthly means, and check LASSO selection of the target on the
/// candidates. `similar` requires all three.
pub fn screen_similar_stations(
    target: &DailySeries,
    candidates: &BTreeMap<String, DailySeries>,
    config: &PointTestConfig,
) -> Result<Vec<ScreeningReport>, StError> {
    let target_clean = hampel_filter(target, HAMPEL_WINDOW, HAMPEL_K).cleaned;
    let t_dates: Vec<NaiveDate> = target_clean.values.keys().copied().collect();
    let t0 = *t_dates.first().ok_or(StError::NoCandidates)?;
    let day_index = |d: NaiveDate| (d - t0).num_days() as f64;

    struct Prepared {
        id: String,
        clean: DailySeries,
        slope: f64,
        slope_se: f64,
    }
    let mut eligible = Vec::new();
    let mut reports = BTreeMap::new();
    for (id, series) in candidates {
        let filtered = hampel_filter(series, HAMPEL_WINDOW, HAMPEL_K);
        let overlap = series
            .values
            .keys()
            .filter(|d| target_clean.values.contains_key(d))
            .count();
        let (days, vals): (Vec<f64>, Vec<f64>) = filtered
            .cleaned
            .values
            .iter()
            .map(|(d, v)| (day_index(*d), *v))
            .unzip();
        let (slope, slope_se) = slope_with_se(&days, &vals);
        reports.insert(
            id.clone(),
            ScreeningReport {
                candidate_id: id.clone(),
                hampel_outlier_fraction: filtered.outlier_fraction(),
                trend_slope: slope,
                anova_group: -1,
                trend_compatible: false,
                selected_by_lasso: false,
                similar: false,
            },
        );
        if overlap >= config.min_overlap_days {
            eligible.push(Prepared { id: id.clone(), clean: filtered.cleaned, slope, slope_se });
        }
    }
    if eligible.is_empty() {
        return Err(StError::NoCandidates);
    }

    // (b) trend compatibility against the target's slope
    let (t_days, t_vals): (Vec<f64>, Vec<f64>) = target_clean
        .values
        .iter()
        .map(|(d, v)| (day_index(*d), *v))
        .unzip();
    let (t_slope, t_se) = slope_with_se(&t_days, &t_vals);
    for p in &eligible {
        let combined_se = (t_se * t_se + p.slope_se * p.slope_se).sqrt();
        let compatible = (p.slope - t_slope).abs() <= 3.0 * combined_se;
        reports.get_mut(&p.id).unwrap().trend_compatible = compatible;
    }

    // (c) ANOVA across {target + eligible} on deseasonalized values, with
    // Tukey HSD on monthly-mean replicates assigning groups relative to the
    // target: 0 = indistinguishable, 1 = below, 2 = above.
    let station_means: Vec<(Option<&str>, Vec<f64>)> = std::iter::once((None, &target_clean))
        .chain(eligible.iter().map(|p| (Some(p.id.as_str()), &p.clean)))
        .map(|(id, s)| {
            let dates: Vec<NaiveDate> = s.values.keys().copied().collect();
            let resid = deseasonalize(s);
            (id, monthly_means(&dates, &resid))
        })
        .collect();
    let k = station_means.len();
    let n_total: usize = station_means.iter().map(|(_, m)| m.len()).sum();
    let df = n_total.saturating_sub(k).max(1);
    let mse_within: f64 = station_means
        .iter()
        .map(|(_, ms)| {
            let gbar = mean(ms);
            ms.iter().map(|m| (m - gbar) * (m - gbar)).sum::<f64>()
        })
        .sum::<f64>()
        / df as f64;
    let mse_within = mse_within.max(SIGMA_FLOOR * SIGMA_FLOOR);
    let q_crit = studentized_range_quantile(TUKEY_ALPHA, k);
    let target_mean = mean(&station_means[0].1);
    let target_n = station_means[0].1.len() as f64;
    for (id, ms) in &station_means[1..] {
        let cand_mean = mean(ms);
        let hsd = q_crit * (mse_within / 2.0 * (1.0 / target_n + 1.0 / ms.len() as f64)).sqrt();
        let group = if (cand_mean - target_mean).abs() <= hsd {
            0
        } else if cand_mean < target_mean {
            1
        } else {
            2
        };
        reports.get_mut(*id.as_ref().unwrap()).unwrap().anova_group = group;
    }

    // (d) LASSO of the target on all eligible candidates, candidate values
    // mean-imputed where missing on a target day
    let cand_means: Vec<f64> = eligible
        .iter()
        .map(|p| mean(&p.clean.values.values().copied().collect::<Vec<_>>()))
        .collect();
    let n = t_dates.len();
    let x = DMatrix::from_fn(n, eligible.len(), |i, j| {
        eligible[j].clean.get(t_dates[i]).unwrap_or(cand_means[j])
    });
    let y = DVector::from_fn(n, |i, _| target_clean.values[&t_dates[i]]);
    let cv = cv_lasso(&x, &y, config.cv_folds, config.cv_grid_points, config.lasso_tol)?;
    for (j, p) in eligible.iter().enumerate() {
        let selected = cv.model.coefficients[j].abs() > 1e-8;
        let r = reports.get_mut(&p.id).unwrap();
        r.selected_by_lasso = selected;
        r.similar = selected && r.anova_group == 0 && r.trend_compatible;
    }
    Ok(reports.into_values().collect())
}

/// One fitted candidate model: its LASSO predictor over the documented
/// feature set and its out-of-fold residual sigma.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StMember {
    pub lasso: LassoModel,
    pub sigma: f64,
}

/// The persisted spatiotemporal model for one (station, variable): three
/// candidate predictors plus their BMA mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StModelSet {
    pub target_station: String,
    pub variable: VariableKind,
    pub similar_ids: Vec<String>,
    pub transform: TransformSpec,
    pub star: StMember,
    pub stam: StMember,
    pub stlm: StMember,
    pub bma: BmaWeights,
    /// out-of-fold MSE of the BMA mixture mean, the fusion weight basis
    pub cal_mse: f64,
    pub zero_mass: Option<f64>,
    /// spline knots on the scaled day-of-year axis, for STAM scoring
    pub spline_knots: Vec<f64>,
    pub calibration_window: (NaiveDate, NaiveDate),
}

/// sin/cos pairs of the annual and semiannual day-of-year cycles.
fn harmonic_features(doy: f64) -> [f64; 4] {
    let w = 2.0 * std::f64::consts::PI * doy / DAYS_PER_YEAR;
    [w.sin(), w.cos(), (2.0 * w).sin(), (2.0 * w).cos()]
}

fn default_spline_knots() -> Vec<f64> {
    (1..=N_SPLINE_KNOTS)
        .map(|i| i as f64 / (N_SPLINE_KNOTS + 1) as f64)
        .collect()
}

/// Cubic B-spline basis on the scaled day-of-year u = d/366, clamped on
/// [0, 1] with the given interior knots. The first basis function is dropped
/// to break the partition-of-unity collinearity with the model intercept;
/// compact support keeps the design well conditioned for coordinate descent.
fn spline_features(doy: f64, interior_knots: &[f64]) -> Vec<f64> {
    let degree = 3usize;
    let u = (doy / 366.0).clamp(0.0, 1.0).min(1.0 - 1e-12);
    let mut knots = vec![0.0; degree + 1];
    knots.extend_from_slice(interior_knots);
    knots.extend(std::iter::repeat(1.0).take(degree + 1));
    let n = knots.len();
    let nbasis = n - degree - 1;
    // Cox-de Boor recursion
    let mut b: Vec<f64> = (0..n - 1)
        .map(|i| if knots[i] <= u && u < knots[i + 1] { 1.0 } else { 0.0 })
        .collect();
    for d in 1..=degree {
        for i in 0..n - d - 1 {
            let left = if knots[i + d] > knots[i] {
                (u - knots[i]) / (knots[i + d] - knots[i]) * b[i]
            } else {
                0.0
            };
            let right = if knots[i + d + 1] > knots[i + 1] {
                (knots[i + d + 1] - u) / (knots[i + d + 1] - knots[i + 1]) * b[i + 1]
            } else {
                0.0
            };
            b[i] = left + right;
        }
    }
    b.truncate(nbasis);
    b.remove(0);
    b
}

/// The three documented feature sets, built from transformed values.
/// Ordering matters: scoring reconstructs rows with the same layout.
mod design {
    use super::*;

    pub(super) fn star_row(
        lag1: f64,
        lag2: f64,
        sim0: &[f64],
        sim1: &[f64],
    ) -> Vec<f64> {
        let mut row = vec![lag1, lag2];
        row.extend_from_slice(sim0);
        row.extend_from_slice(sim1);
        row
    }

    pub(super) fn stlm_row(sim0: &[f64], doy: f64, harmonics: bool) -> Vec<f64> {
        let mut row = sim0.to_vec();
        if harmonics {
            row.extend_from_slice(&harmonic_features(doy));
        }
        row
    }

    pub(super) fn stam_row(sim0: &[f64], doy: f64, knots: &[f64]) -> Vec<f64> {
        let mut row = sim0.to_vec();
        row.extend_from_slice(&spline_features(doy, knots));
        row
    }
}

pub(crate) struct StDesign {
    pub(crate) y: DVector<f64>,
    pub(crate) star: DMatrix<f64>,
    pub(crate) stlm: DMatrix<f64>,
    pub(crate) stam: DMatrix<f64>,
    pub(crate) dates: Vec<NaiveDate>,
}

/// Align target (with lags) and similar stations (with lag 1), transform,
/// and build all three design matrices over the common rows.
pub(crate) fn build_designs(
    target: &DailySeries,
    similar: &BTreeMap<String, DailySeries>,
    transform: TransformSpec,
    knots: &[f64],
    harmonics: bool,
) -> StDesign {
    let mut rows_star = Vec::new();
    let mut rows_stlm = Vec::new();
    let mut rows_stam = Vec::new();
    let mut y = Vec::new();
    let mut dates = Vec::new();
    'day: for (&date, &tv) in &target.values {
        let prev = date.pred_opt().unwrap();
        let prev2 = prev.pred_opt().unwrap();
        let (Some(l1), Some(l2)) = (target.get(prev), target.get(prev2)) else {
            continue;
        };
        let mut sim0 = Vec::with_capacity(similar.len());
        let mut sim1 = Vec::with_capacity(similar.len());
        for s in similar.values() {
            match (s.get(date), s.get(prev)) {
                (Some(v0), Some(v1)) => {
                    sim0.push(transform.forward_clamped(v0));
                    sim1.push(transform.forward_clamped(v1));
                }
                _ => continue 'day,
            }
        }
        let doy = date.ordinal() as f64;
        rows_star.push(design::star_row(
            transform.forward_clamped(l1),
            transform.forward_clamped(l2),
            &sim0,
            &sim1,
        ));
        rows_stlm.push(design::stlm_row(&sim0, doy, harmonics));
        rows_stam.push(design::stam_row(&sim0, doy, knots));
        y.push(transform.forward_clamped(tv));
        dates.push(date);
    }
    let to_matrix = |rows: &Vec<Vec<f64>>| {
        let ncols = rows.first().map_or(0, |r| r.len());
        DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j])
    };
    StDesign {
        y: DVector::from_vec(y),
        star: to_matrix(&rows_star),
        stlm: to_matrix(&rows_stlm),
        stam: to_matrix(&rows_stam),
        dates,
    }
}

/// Fit the STAR, STLM, and STAM candidates by cross-validated penalized
/// least squares in transformed space, then BMA-weight them on their
/// out-of-fold predictions.
pub fn fit_st_models(
    target: &DailySeries,
    similar: &BTreeMap<String, DailySeries>,
    config: &PointTestConfig,
) -> Result<StModelSet, StError> {
    if similar.is_empty() {
        return Err(StError::NoCandidates);
    }
    let y_raw: Vec<f64> = target.values.values().copied().collect();
    if y_raw.is_empty() {
        return Err(StError::InsufficientOverlap { got: 0, need: config.min_overlap_days });
    }
    let transform = fit_transform(&y_raw, config.transform_kind_for(target.variable))
        .map_err(StError::from)?;
    let knots = default_spline_knots();
    let d = build_designs(target, similar, transform, &knots, true);
    let n = d.y.len();
    if n < config.min_overlap_days {
        return Err(StError::InsufficientOverlap { got: n, need: config.min_overlap_days });
    }

    let mut members = Vec::with_capacity(3);
    let mut member_means = DMatrix::zeros(n, 3);
    for (j, x) in [&d.star, &d.stlm, &d.stam].into_iter().enumerate() {
        let cv = cv_lasso(x, &d.y, config.cv_folds, config.cv_grid_points, config.lasso_tol)?;
        let sigma = robust_gaussian_fit(&cv.oof_residuals)
            .map_err(StError::Solver)?
            .sigma
            .max(SIGMA_FLOOR);
        for i in 0..n {
            member_means[(i, j)] = cv.oof_predictions[i];
        }
        members.push(StMember { lasso: cv.model, sigma });
    }
    let bma = crate::solvers::bma_fit(&member_means, &d.y).map_err(StError::Solver)?;
    let cal_mse = (0..n)
        .map(|i| {
            let m = bma.mixture_mean(&[
                member_means[(i, 0)],
                member_means[(i, 1)],
                member_means[(i, 2)],
            ]);
            let r = d.y[i] - m;
            r * r
        })
        .sum::<f64>()
        / n as f64;

    let mut it = members.into_iter();
    let (star, stlm, stam) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
    Ok(StModelSet {
        target_station: target.station_id.clone(),
        variable: target.variable,
        similar_ids: similar.keys().cloned().collect(),
        transform,
        star,
        stam,
        stlm,
        bma,
        cal_mse,
        zero_mass: zero_mass_for(target.variable, &y_raw),
        spline_knots: knots,
        calibration_window: (d.dates[0], d.dates[n - 1]),
    })
}

/// Today's raw-unit inputs for scoring one observation.
#[derive(Debug, Clone, Default)]
pub struct StInputs {
    pub target_lag1: Option<f64>,
    pub target_lag2: Option<f64>,
    pub similar_today: BTreeMap<String, f64>,
    pub similar_lag1: BTreeMap<String, f64>,
}

impl StModelSet {
    /// Per-member predictive means for today's inputs, in transformed space.
    /// Missing similar-station values are imputed with the member's stored
    /// predictor means; the target lags are required.
    fn member_means(&self, obs_date: NaiveDate, inputs: &StInputs) -> Result<[f64; 3], NotApplicable> {
        let (Some(l1), Some(l2)) = (inputs.target_lag1, inputs.target_lag2) else {
            return Err(NotApplicable("target lag-1/lag-2 value missing".into()));
        };
        if !self
            .similar_ids
            .iter()
            .any(|id| inputs.similar_today.contains_key(id))
        {
            return Err(NotApplicable("no similar station reporting today".into()));
        }
        let m = self.similar_ids.len();
        let doy = obs_date.ordinal() as f64;
        let fetch = |map: &BTreeMap<String, f64>, id: &str| map.get(id).copied();

        // STAR row: [lag1, lag2, sim0.., sim1..]
        let mut star_row = vec![
            self.transform.forward_clamped(l1),
            self.transform.forward_clamped(l2),
        ];
        for (j, id) in self.similar_ids.iter().enumerate() {
            star_row.push(match fetch(&inputs.similar_today, id) {
                Some(v) => self.transform.forward_clamped(v),
                None => self.star.lasso.predictor_means[2 + j],
            });
        }
        for (j, id) in self.similar_ids.iter().enumerate() {
            star_row.push(match fetch(&inputs.similar_lag1, id) {
                Some(v) => self.transform.forward_clamped(v),
                None => self.star.lasso.predictor_means[2 + m + j],
            });
        }

        let sim0_for = |means: &[f64]| -> Vec<f64> {
            self.similar_ids
                .iter()
                .enumerate()
                .map(|(j, id)| match fetch(&inputs.similar_today, id) {
                    Some(v) => self.transform.forward_clamped(v),
                    None => means[j],
                })
                .collect()
        };
        let stlm_row = design::stlm_row(&sim0_for(&self.stlm.lasso.predictor_means), doy, true);
        let stam_row =
            design::stam_row(&sim0_for(&self.stam.lasso.predictor_means), doy, &self.spline_knots);

        Ok([
            self.star.lasso.predict(&star_row),
            self.stlm.lasso.predict(&stlm_row),
            self.stam.lasso.predict(&stam_row),
        ])
    }

}

/// Median of the BMA Gaussian mixture by bisection on its CDF.
fn mixture_median(bma: &BmaWeights, means: &[f64]) -> f64 {
    let smax = bma.sigmas.iter().cloned().fold(SIGMA_FLOOR, f64::max);
    let mut lo = means.iter().cloned().fold(f64::INFINITY, f64::min) - 10.0 * smax;
    let mut hi = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 10.0 * smax;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if bma.mixture_cdf(mid, means) < 0.5 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Score one observation against the BMA mixture prediction. The one-sided
/// p-value is the mixture CDF at the transformed observation, with the dry
/// day point mass handled as in the point tests.
pub fn run_st_test(
    models: &StModelSet,
    obs: &Observation,
    inputs: &StInputs,
) -> Result<TestResult, NotApplicable> {
    let means = models.member_means(obs.date, inputs)?;
    let p_cont = |value: f64| -> Result<f64, NotApplicable> {
        let z = models
            .transform
            .forward(value)
            .map_err(|e| NotApplicable(format!("transform domain: {e}")))?;
        Ok(models.bma.mixture_cdf(z, &means))
    };
    let p1 = match models.zero_mass {
        None => p_cont(obs.value)?,
        Some(zm) => {
            if obs.value <= 0.0 {
                zm / 2.0
            } else {
                zm + (1.0 - zm) * p_cont(obs.value)?
            }
        }
    };
    let median_z = mixture_median(&models.bma, &means);
    let median = models
        .transform
        .inverse(median_z)
        .map_err(|e| NotApplicable(format!("transform domain: {e}")))?;
    let sigma = models.bma.mixture_variance(&means).sqrt();
    let mut used = BTreeMap::new();
    if let Some(l1) = inputs.target_lag1 {
        used.insert("target_lag1".to_string(), l1);
    }
    if let Some(l2) = inputs.target_lag2 {
        used.insert("target_lag2".to_string(), l2);
    }
    for (id, v) in &inputs.similar_today {
        if models.similar_ids.contains(id) {
            used.insert(format!("similar:{id}"), *v);
        }
    }
    TestResult::from_p1(TestId::SpatioTemporal, p1, median, sigma, models.cal_mse, used)
        .map_err(|e| NotApplicable(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solvers::lasso_fit;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn day(offset: i64) -> NaiveDate {
        NaiveDate::from_ymd_opt(2016, 1, 1).unwrap() + chrono::Duration::days(offset)
    }

    fn series(id: &str, values: &[f64]) -> DailySeries {
        let mut s = DailySeries::new(id, VariableKind::Tmax);
        for (i, &v) in values.iter().enumerate() {
            s.values.insert(day(i as i64), v);
        }
        s
    }

    fn gauss(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        sd * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    fn seasonal(i: usize) -> f64 {
        20.0 + 8.0 * (2.0 * std::f64::consts::PI * i as f64 / 365.25).sin()
    }

    mod hampel {
        use super::*;

        #[test]
        fn single_spike_flagged() {
            let s = series("S", &[1.0, 1.0, 1.0, 10.0, 1.0, 1.0, 1.0]);
            let out = hampel_filter(&s, 7, 3.0);
            let flagged: Vec<bool> = out.flags.iter().map(|(_, f)| *f).collect();
            assert_eq!(flagged, vec![false, false, false, true, false, false, false]);
            assert_eq!(out.cleaned.get(day(3)), Some(1.0));
            assert!((out.outlier_fraction() - 1.0 / 7.0).abs() < 1e-12);
        }

        #[test]
        fn monotone_ramp_unflagged() {
            let s = series("S", &(0..60).map(|i| i as f64 * 0.7).collect::<Vec<_>>());
            let out = hampel_filter(&s, 15, 3.0);
            assert!(out.flags.iter().all(|(_, f)| !f));
            assert_eq!(out.cleaned, s);
        }

        #[test]
        fn constant_series_unflagged() {
            let s = series("S", &[5.0; 40]);
            let out = hampel_filter(&s, 15, 3.0);
            assert!(out.flags.iter().all(|(_, f)| !f));
        }

        #[test]
        fn edge_spike_caught_with_truncated_window() {
            let mut vals = vec![2.0; 30];
            vals[0] = 50.0;
            let s = series("S", &vals);
            let out = hampel_filter(&s, 15, 3.0);
            assert!(out.flags[0].1);
            assert_eq!(out.cleaned.get(day(0)), Some(2.0));
        }
    }

    mod tukey {
        use super::*;

        #[test]
        fn quantile_matches_published_table() {
            // studentized range upper 5% points at df = infinity
            assert!((studentized_range_quantile(0.05, 2) - 2.772).abs() < 2e-3);
            assert!((studentized_range_quantile(0.05, 3) - 3.314).abs() < 2e-3);
            assert!((studentized_range_quantile(0.05, 5) - 3.858).abs() < 2e-3);
        }

        #[test]
        fn k2_reduces_to_scaled_normal() {
            // range of two standard normals: q = sqrt(2) * z_{1-alpha/2}
            let q = studentized_range_quantile(0.05, 2);
            let z = crate::solvers::std_normal_quantile(0.975);
            assert!((q - std::f64::consts::SQRT_2 * z).abs() < 1e-3);
        }
    }

    mod screening {
        use super::*;

        fn screening_fixture() -> (DailySeries, BTreeMap<String, DailySeries>) {
            let mut rng = ChaCha8Rng::seed_from_u64(140);
            let n = 730;
            let base: Vec<f64> = (0..n).map(|i| seasonal(i) + gauss(&mut rng, 2.0)).collect();
            let target = series("T", &base);
            let mut cands = BTreeMap::new();
            let twin: Vec<f64> = base.iter().map(|v| v + 0.5 + gauss(&mut rng, 0.5)).collect();
            cands.insert("twin".to_string(), series("twin", &twin));
            let noise: Vec<f64> = (0..n).map(|_| 20.0 + gauss(&mut rng, 2.0)).collect();
            cands.insert("noise".to_string(), series("noise", &noise));
            // strong linear drift: ~10 sd over the window
            let sd = 2.0;
            let drift: Vec<f64> = base
                .iter()
                .enumerate()
                .map(|(i, v)| v + 10.0 * sd * i as f64 / n as f64)
                .collect();
            cands.insert("drift".to_string(), series("drift", &drift));
            (target, cands)
        }

        #[test]
        fn twin_similar_noise_and_drift_not() {
            let (target, cands) = screening_fixture();
            let reports =
                screen_similar_stations(&target, &cands, &PointTestConfig::default()).unwrap();
            let by_id: BTreeMap<&str, &ScreeningReport> =
                reports.iter().map(|r| (r.candidate_id.as_str(), r)).collect();

            let twin = by_id["twin"];
            assert!(twin.selected_by_lasso);
            assert!(twin.trend_compatible);
            assert!(twin.similar, "{twin:?}");

            let noise = by_id["noise"];
            assert!(!noise.selected_by_lasso, "{noise:?}");
            assert!(!noise.similar);

            let drift = by_id["drift"];
            assert!(!drift.trend_compatible, "{drift:?}");
            assert!(!drift.similar);
        }

        #[test]
        fn identical_candidate_is_similar() {
            let mut rng = ChaCha8Rng::seed_from_u64(141);
            let base: Vec<f64> =
                (0..500).map(|i| seasonal(i) + gauss(&mut rng, 1.5)).collect();
            let target = series("T", &base);
            let mut cands = BTreeMap::new();
            cands.insert("same".to_string(), series("same", &base));
            let reports =
                screen_similar_stations(&target, &cands, &PointTestConfig::default()).unwrap();
            assert!(reports[0].similar, "{:?}", reports[0]);
        }

        #[test]
        fn insertion_order_does_not_matter() {
            let (target, cands) = screening_fixture();
            let mut reversed = BTreeMap::new();
            for (id, s) in cands.iter().rev() {
                reversed.insert(id.clone(), s.clone());
            }
            let cfg = PointTestConfig::default();
            let a = screen_similar_stations(&target, &cands, &cfg).unwrap();
            let b = screen_similar_stations(&target, &reversed, &cfg).unwrap();
            assert_eq!(a, b);
        }

        #[test]
        fn short_overlap_rejected() {
            let target = series("T", &[1.0; 100]);
            let mut cands = BTreeMap::new();
            cands.insert("c".to_string(), series("c", &[1.0; 100]));
            assert!(matches!(
                screen_similar_stations(&target, &cands, &PointTestConfig::default()),
                Err(StError::NoCandidates)
            ));
        }
    }

    mod fitting {
        use super::*;

        fn similar_map(entries: Vec<(&str, Vec<f64>)>) -> BTreeMap<String, DailySeries> {
            entries
                .into_iter()
                .map(|(id, v)| (id.to_string(), series(id, &v)))
                .collect()
        }

        #[test]
        fn perfect_predictor_gives_tiny_cal_mse() {
            let mut rng = ChaCha8Rng::seed_from_u64(150);
            let base: Vec<f64> =
                (0..600).map(|i| seasonal(i) + gauss(&mut rng, 2.0)).collect();
            let target = series("T", &base);
            let similar = similar_map(vec![("S1", base.clone())]);
            let fit = fit_st_models(&target, &similar, &PointTestConfig::default()).unwrap();
            assert!(fit.cal_mse < 1e-2, "cal_mse = {}", fit.cal_mse);
            let wsum: f64 = fit.bma.weights.iter().sum();
            assert!((wsum - 1.0).abs() < 1e-9);
        }

        #[test]
        fn seasonal_target_with_noise_stations_favors_harmonic_models() {
            let mut rng = ChaCha8Rng::seed_from_u64(151);
            let n = 900;
            let target_vals: Vec<f64> =
                (0..n).map(|i| seasonal(i) + gauss(&mut rng, 2.0)).collect();
            let target = series("T", &target_vals);
            let similar = similar_map(vec![
                ("S1", (0..n).map(|_| 20.0 + gauss(&mut rng, 2.0)).collect()),
                ("S2", (0..n).map(|_| 20.0 + gauss(&mut rng, 2.0)).collect()),
            ]);
            let fit = fit_st_models(&target, &similar, &PointTestConfig::default()).unwrap();
            // weights order: [star, stlm, stam]
            let w = &fit.bma.weights;
            assert!(
                w[0] < w[1].max(w[2]),
                "STAR should not dominate: {w:?}"
            );
        }

        #[test]
        fn boundary_overlap_accepted() {
            let mut rng = ChaCha8Rng::seed_from_u64(152);
            let base: Vec<f64> =
                (0..402).map(|i| seasonal(i) + gauss(&mut rng, 1.0)).collect();
            let target = series("T", &base);
            let similar = similar_map(vec![("S1", base.clone())]);
            // 402 raw days -> 400 design rows after the two target lags
            let fit = fit_st_models(&target, &similar, &PointTestConfig::default());
            assert!(fit.is_ok(), "{:?}", fit.err().map(|e| e.to_string()));
        }

        #[test]
        fn too_short_rejected() {
            let target = series("T", &[1.0; 200]);
            let similar = similar_map(vec![("S1", vec![1.0; 200])]);
            assert!(matches!(
                fit_st_models(&target, &similar, &PointTestConfig::default()),
                Err(StError::InsufficientOverlap { .. })
            ));
        }

        #[test]
        fn no_similar_rejected() {
            let target = series("T", &[1.0; 400]);
            assert!(matches!(
                fit_st_models(&target, &BTreeMap::new(), &PointTestConfig::default()),
                Err(StError::NoCandidates)
            ));
        }

        #[test]
        fn stlm_without_harmonics_matches_single_station_regression() {
            let mut rng = ChaCha8Rng::seed_from_u64(153);
            let base: Vec<f64> = (0..500).map(|_| 15.0 + gauss(&mut rng, 3.0)).collect();
            let target_vals: Vec<f64> =
                base.iter().map(|v| 2.0 + 0.8 * v + gauss(&mut rng, 0.5)).collect();
            let target = series("T", &target_vals);
            let similar = similar_map(vec![("S1", base.clone())]);
            let d = build_designs(&target, &similar, TransformSpec::Identity, &[], false);
            // with harmonics disabled the STLM design IS the one-neighbor
            // spatial design; at lambda = 0 the coefficients must match
            let stlm = lasso_fit(&d.stlm, &d.y, 0.0, 1e-9).unwrap();
            let n = d.y.len();
            let spatial_x = DMatrix::from_fn(n, 1, |i, _| d.stlm[(i, 0)]);
            let spatial = lasso_fit(&spatial_x, &d.y, 0.0, 1e-9).unwrap();
            assert!((stlm.coefficients[0] - spatial.coefficients[0]).abs() < 1e-6);
            assert!((stlm.intercept - spatial.intercept).abs() < 1e-6);
        }
    }

    mod scoring {
        use super::*;

        fn fitted() -> (StModelSet, Vec<f64>, Vec<f64>) {
            let mut rng = ChaCha8Rng::seed_from_u64(160);
            let n = 600;
            let base: Vec<f64> =
                (0..n).map(|i| seasonal(i) + gauss(&mut rng, 2.0)).collect();
            let target: Vec<f64> =
                base.iter().map(|v| v + gauss(&mut rng, 0.7)).collect();
            let tseries = series("T", &target);
            let mut similar = BTreeMap::new();
            similar.insert("S1".to_string(), series("S1", &base));
            let fit = fit_st_models(&tseries, &similar, &PointTestConfig::default()).unwrap();
            (fit, target, base)
        }

        fn inputs(target: &[f64], base: &[f64], t: usize) -> StInputs {
            StInputs {
                target_lag1: Some(target[t - 1]),
                target_lag2: Some(target[t - 2]),
                similar_today: [("S1".to_string(), base[t])].into(),
                similar_lag1: [("S1".to_string(), base[t - 1])].into(),
            }
        }

        fn obs(value: f64, t: usize) -> Observation {
            Observation {
                station_id: "T".into(),
                date: day(t as i64),
                variable: VariableKind::Tmax,
                value,
                quality_hint: None,
            }
        }

        #[test]
        fn median_observation_gets_full_confidence() {
            let (fit, target, base) = fitted();
            let t = 500;
            let ins = inputs(&target, &base, t);
            let means = fit.member_means(day(t as i64), &ins).unwrap();
            let med = mixture_median(&fit.bma, &means);
            let r = run_st_test(&fit, &obs(med, t), &ins).unwrap();
            assert!((r.p1 - 0.5).abs() < 1e-6, "p1 = {}", r.p1);
            assert!(r.cl > 1.0 - 1e-5);
            assert_eq!(r.test_id, TestId::SpatioTemporal);
        }

        #[test]
        fn gross_outlier_gets_near_zero_confidence() {
            let (fit, target, base) = fitted();
            let t = 500;
            let ins = inputs(&target, &base, t);
            let r = run_st_test(&fit, &obs(60.0, t), &ins).unwrap();
            assert!(r.cl < 1e-6, "cl = {}", r.cl);
        }

        #[test]
        fn missing_lag_not_applicable() {
            let (fit, target, base) = fitted();
            let t = 500;
            let mut ins = inputs(&target, &base, t);
            ins.target_lag1 = None;
            assert!(run_st_test(&fit, &obs(20.0, t), &ins).is_err());
        }

        #[test]
        fn no_similar_station_today_not_applicable() {
            let (fit, target, base) = fitted();
            let t = 500;
            let mut ins = inputs(&target, &base, t);
            ins.similar_today.clear();
            assert!(run_st_test(&fit, &obs(20.0, t), &ins).is_err());
        }

        #[test]
        fn p1_monotone_in_observation() {
            let (fit, target, base) = fitted();
            let t = 500;
            let ins = inputs(&target, &base, t);
            let mut last = -1.0;
            for v in (0..40).map(|i| 5.0 + i as f64) {
                let r = run_st_test(&fit, &obs(v, t), &ins).unwrap();
                assert!(r.p1 >= last, "p1 not monotone at {v}");
                assert!((0.0..=1.0).contains(&r.p1));
                last = r.p1;
            }
        }

        #[test]
        fn mixture_variance_at_least_min_member_variance() {
            let (fit, target, base) = fitted();
            let ins = inputs(&target, &base, 500);
            let means = fit.member_means(day(500), &ins).unwrap();
            let minvar = fit
                .bma
                .sigmas
                .iter()
                .map(|s| s * s)
                .fold(f64::INFINITY, f64::min);
            assert!(fit.bma.mixture_variance(&means) >= minvar - 1e-12);
        }

        #[test]
        fn equal_members_collapse_to_single_normal() {
            // two identical members: mixture CDF at z = 1.96 is Phi(1.96)
            let bma = BmaWeights {
                weights: vec![0.5, 0.5],
                sigmas: vec![1.0, 1.0],
            };
            let p = bma.mixture_cdf(1.96, &[0.0, 0.0]);
            assert!((p - 0.9750021048517796).abs() < 1e-12);
            assert!(
                (crate::assessment::confidence_level(p).unwrap() - 0.05).abs() < 1e-4
            );
        }
    }
}
