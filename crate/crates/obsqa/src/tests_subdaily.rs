//! The sub-daily test: a dynamic linear model fuses TPAWS sub-daily readings
//! with gridded values over the 24-hour day, and the reported daily extreme
//! is scored against a Monte Carlo distribution of extremes drawn from the
//! filtered hourly states.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assessment::{TestId, TestResult};
use crate::core::{Observation, SubdailySeries, VariableKind};
use crate::solvers::{kalman_step, KalmanState, SolverError, SIGMA_FLOOR};
use crate::tests_point::NotApplicable;

pub const MIN_HISTORY_DAYS: usize = 60;
pub const MIN_SLOTS: usize = 18;
pub const N_PATHS: usize = 10_000;
const SLOTS: usize = 24;
const MC_SEED: u64 = 0x5d;

#[derive(Debug, Error)]
pub enum SubdailyError {
    #[error("insufficient history: {got} days, need {need}")]
    InsufficientHistory { got: usize, need: usize },
    #[error("variable {0:?} has no sub-daily extreme test")]
    UnsupportedVariable(VariableKind),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Calibrated DLM for one (station, variable): state layout
/// [level, harmonic cos, harmonic sin, grid offset], hourly step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DlmSpec {
    pub station_id: String,
    pub variable: VariableKind,
    /// observation noise variances (diagonal V)
    pub v_tpaws: f64,
    pub v_grid: f64,
    /// state innovation variances (diagonal W; the harmonic pair shares one)
    pub w_level: f64,
    pub w_harmonic: f64,
    pub w_offset: f64,
    /// per-day initial level and diffuse variance
    pub init_level: f64,
    pub init_var: f64,
    /// mean squared one-step TPAWS prediction error, the fusion weight basis
    pub cal_mse: f64,
}

fn g_matrix() -> DMatrix<f64> {
    let theta = 2.0 * std::f64::consts::PI / SLOTS as f64;
    let (s, c) = theta.sin_cos();
    DMatrix::from_row_slice(
        4,
        4,
        &[
            1.0, 0.0, 0.0, 0.0, //
            0.0, c, -s, 0.0, //
            0.0, s, c, 0.0, //
            0.0, 0.0, 0.0, 1.0,
        ],
    )
}

const F_TPAWS: [f64; 4] = [1.0, 1.0, 0.0, 0.0];
const F_GRID: [f64; 4] = [1.0, 1.0, 0.0, 1.0];

fn w_matrix(spec: (f64, f64, f64)) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_vec(vec![spec.0, spec.1, spec.1, spec.2]))
}

/// Hourly slot values: readings binned by floor(hour), averaged within a
/// slot.
fn slot_values(series: &SubdailySeries) -> [Option<f64>; SLOTS] {
    let mut sums = [0.0f64; SLOTS];
    let mut counts = [0usize; SLOTS];
    for &(t, v) in &series.values {
        let slot = (t.floor() as usize).min(SLOTS - 1);
        sums[slot] += v;
        counts[slot] += 1;
    }
    std::array::from_fn(|i| (counts[i] > 0).then(|| sums[i] / counts[i] as f64))
}

/// Observation noise variance from high-frequency differencing of the
/// harmonic-detrended within-day readings: for each day, the diurnal
/// harmonic plus level is removed by least squares, and var(diff)/2 of the
/// residuals estimates the measurement variance.
fn estimate_obs_variance(history: &[SubdailySeries]) -> f64 {
    let theta = 2.0 * std::f64::consts::PI / SLOTS as f64;
    let mut diffs = Vec::new();
    for day in history {
        let n = day.values.len();
        if n < 6 {
            continue;
        }
        let x = DMatrix::from_fn(n, 3, |i, j| {
            let t = day.values[i].0;
            match j {
                0 => 1.0,
                1 => (theta * t).cos(),
                _ => (theta * t).sin(),
            }
        });
        let y = DVector::from_fn(n, |i, _| day.values[i].1);
        let Some(beta) = x.clone().svd(true, true).solve(&y, 1e-12).ok() else {
            continue;
        };
        let resid = y - x * beta;
        for w in resid.as_slice().windows(2) {
            diffs.push(w[1] - w[0]);
        }
    }
    if diffs.len() < 10 {
        return SIGMA_FLOOR * SIGMA_FLOOR;
    }
    let sigma_diff = 1.4826 * crate::solvers::mad(&diffs);
    (sigma_diff * sigma_diff / 2.0).max(SIGMA_FLOOR * SIGMA_FLOOR)
}

struct DayData {
    tpaws: [Option<f64>; SLOTS],
    grid: [Option<f64>; SLOTS],
}

fn pair_days(history: &[SubdailySeries], grid_history: &[SubdailySeries]) -> Vec<DayData> {
    let grid_by_date: std::collections::BTreeMap<_, _> =
        grid_history.iter().map(|s| (s.date, s)).collect();
    history
        .iter()
        .map(|day| DayData {
            tpaws: slot_values(day),
            grid: grid_by_date
                .get(&day.date)
                .map(|g| slot_values(g))
                .unwrap_or([None; SLOTS]),
        })
        .collect()
}

struct SlotMarginal {
    mean: f64,
    var: f64,
}

struct FilterRun {
    /// measurement-space filtered marginal (level + harmonic, no obs noise)
    marginals: Vec<SlotMarginal>,
    /// summed one-step predictive log-likelihood of all observations
    log_likelihood: f64,
    /// squared one-step prediction errors for the TPAWS stream
    tpaws_sq_errors: Vec<f64>,
}

/// Filter one day through the 24 hourly slots. Slots with no observation
/// from either source carry the prediction forward.
fn filter_day(
    day: &DayData,
    v: (f64, f64),
    w: (f64, f64, f64),
    init: (f64, f64),
) -> Result<FilterRun, SolverError> {
    let g = g_matrix();
    let wm = w_matrix(w);
    let mut state = KalmanState::new(
        DVector::from_vec(vec![init.0, 0.0, 0.0, 0.0]),
        DMatrix::from_diagonal(&DVector::from_vec(vec![init.1, init.1, init.1, init.1])),
    );
    let h = DVector::from_column_slice(&F_TPAWS);
    let mut out = FilterRun {
        marginals: Vec::with_capacity(SLOTS),
        log_likelihood: 0.0,
        tpaws_sq_errors: Vec::new(),
    };
    for slot in 0..SLOTS {
        let mut rows: Vec<[f64; 4]> = Vec::new();
        let mut vars = Vec::new();
        let mut ys = Vec::new();
        if let Some(y) = day.tpaws[slot] {
            rows.push(F_TPAWS);
            vars.push(v.0);
            ys.push(y);
        }
        if let Some(y) = day.grid[slot] {
            rows.push(F_GRID);
            vars.push(v.1);
            ys.push(y);
        }
        let step = if rows.is_empty() {
            let f = DMatrix::from_row_slice(1, 4, &F_TPAWS);
            let v1 = DMatrix::from_element(1, 1, v.0);
            kalman_step(&state, &f, &g, &wm, &v1, None)?
        } else {
            let f = DMatrix::from_fn(rows.len(), 4, |i, j| rows[i][j]);
            let vm = DMatrix::from_diagonal(&DVector::from_vec(vars));
            let y = DVector::from_vec(ys);
            let step = kalman_step(&state, &f, &g, &wm, &vm, Some(&y))?;
            if let Some(ll) = step.log_likelihood {
                out.log_likelihood += ll;
            }
            if let (Some(yt), Some((pm, _))) = (day.tpaws[slot], step.obs_predictive.as_ref()) {
                out.tpaws_sq_errors.push((yt - pm[0]) * (yt - pm[0]));
            }
            step
        };
        state = step.state;
        let mean = h.dot(&state.mean);
        let var = (h.transpose() * &state.covariance * &h)[(0, 0)].max(0.0);
        out.marginals.push(SlotMarginal { mean, var });
    }
    Ok(out)
}

/// Calibrate the DLM: diagonal V from within-day high-frequency residual
/// differencing, W by maximizing the one-step predictive log-likelihood over
/// a deterministic 5 x 5 x 5 log grid.
pub fn calibrate_dlm(
    history: &[SubdailySeries],
    grid_history: &[SubdailySeries],
) -> Result<DlmSpec, SubdailyError> {
    let usable: Vec<&SubdailySeries> =
        history.iter().filter(|d| d.values.len() >= MIN_SLOTS).collect();
    if usable.len() < MIN_HISTORY_DAYS {
        return Err(SubdailyError::InsufficientHistory {
            got: usable.len(),
            need: MIN_HISTORY_DAYS,
        });
    }
    let (station_id, variable) = (usable[0].station_id.clone(), usable[0].variable);
    let v_tpaws = estimate_obs_variance(history);
    let v_grid = estimate_obs_variance(grid_history).max(v_tpaws);

    let all_values: Vec<f64> = history.iter().flat_map(|d| d.values.iter().map(|p| p.1)).collect();
    let init_level = all_values.iter().sum::<f64>() / all_values.len() as f64;
    let overall_var = all_values
        .iter()
        .map(|v| (v - init_level) * (v - init_level))
        .sum::<f64>()
        / all_values.len() as f64;
    let init_var = (overall_var * 10.0).max(1.0);

    let days = pair_days(history, grid_history);
    let scale = overall_var.max(SIGMA_FLOOR * SIGMA_FLOOR);
    let grid_w: Vec<f64> = (0..5).map(|i| scale * 10f64.powi(i - 4)).collect();

    let mut best: Option<((f64, f64, f64), f64)> = None;
    for &wl in &grid_w {
        for &wh in &grid_w {
            for &wo in &grid_w {
                let mut ll = 0.0;
                let mut ok = true;
                for day in &days {
                    match filter_day(day, (v_tpaws, v_grid), (wl, wh, wo), (init_level, init_var))
                    {
                        Ok(run) => ll += run.log_likelihood,
                        Err(_) => {
                            ok = false;
                            break;
                        }
                    }
                }
                if ok && best.as_ref().map_or(true, |(_, b)| ll > *b) {
                    best = Some(((wl, wh, wo), ll));
                }
            }
        }
    }
    let ((w_level, w_harmonic, w_offset), _) = best.ok_or_else(|| {
        SubdailyError::Solver(SolverError::NumericalBreakdown(
            "no W grid point filtered successfully".into(),
        ))
    })?;

    let mut sq_errors = Vec::new();
    for day in &days {
        let run = filter_day(
            day,
            (v_tpaws, v_grid),
            (w_level, w_harmonic, w_offset),
            (init_level, init_var),
        )?;
        sq_errors.extend(run.tpaws_sq_errors);
    }
    let cal_mse = if sq_errors.is_empty() {
        SIGMA_FLOOR * SIGMA_FLOOR
    } else {
        sq_errors.iter().sum::<f64>() / sq_errors.len() as f64
    };

    Ok(DlmSpec {
        station_id,
        variable,
        v_tpaws,
        v_grid,
        w_level,
        w_harmonic,
        w_offset,
        init_level,
        init_var,
        cal_mse,
    })
}

fn box_muller(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-300..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Monte Carlo daily extremes: each path draws every slot independently from
/// its filtered marginal (antithetic pairs, fixed seed) and takes the max
/// (or min).
pub(crate) fn sample_extremes(
    marginals: &[(f64, f64)],
    n_paths: usize,
    seed: u64,
    minimize: bool,
) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_paths);
    let fold = |acc: f64, v: f64| if minimize { acc.min(v) } else { acc.max(v) };
    let start = if minimize { f64::INFINITY } else { f64::NEG_INFINITY };
    for _ in 0..n_paths.div_ceil(2) {
        let zs: Vec<f64> = marginals.iter().map(|_| box_muller(&mut rng)).collect();
        for sign in [1.0, -1.0] {
            let ext = marginals
                .iter()
                .zip(&zs)
                .map(|((m, s), z)| m + s * sign * z)
                .fold(start, fold);
            out.push(ext);
        }
    }
    out.truncate(n_paths);
    out
}

/// Empirical CDF of `x` in `samples` with a 1/(2N) continuity correction,
/// clamped away from exactly 0 and 1.
fn empirical_p1(samples: &[f64], x: f64) -> f64 {
    let n = samples.len() as f64;
    let less = samples.iter().filter(|s| **s < x).count() as f64;
    let equal = samples.iter().filter(|s| **s == x).count() as f64;
    ((less + 0.5 * equal) / n).clamp(0.5 / n, 1.0 - 0.5 / n)
}

fn extreme_kind(variable: VariableKind) -> Option<bool> {
    // Some(true) = daily minimum, Some(false) = daily maximum
    match variable {
        VariableKind::Tmax | VariableKind::WindGust => Some(false),
        VariableKind::Tmin => Some(true),
        _ => None,
    }
}

/// Score a reported daily extreme against the DLM's filtered view of the
/// day: Kalman-filter through the 24 hourly slots, sample daily extremes
/// from the filtered marginals, and read the empirical p-value.
pub fn run_subdaily_test(
    spec: &DlmSpec,
    day: &SubdailySeries,
    grid_day: &SubdailySeries,
    reported_daily: &Observation,
) -> Result<TestResult, NotApplicable> {
    let Some(minimize) = extreme_kind(reported_daily.variable) else {
        return Err(NotApplicable(format!(
            "no sub-daily extreme test for {:?}",
            reported_daily.variable
        )));
    };
    let data = DayData {
        tpaws: slot_values(day),
        grid: slot_values(grid_day),
    };
    let covered = (0..SLOTS)
        .filter(|&s| data.tpaws[s].is_some() || data.grid[s].is_some())
        .count();
    if covered < MIN_SLOTS {
        return Err(NotApplicable(format!(
            "only {covered} of {SLOTS} hourly slots covered (need {MIN_SLOTS})"
        )));
    }
    let run = filter_day(
        &data,
        (spec.v_tpaws, spec.v_grid),
        (spec.w_level, spec.w_harmonic, spec.w_offset),
        (spec.init_level, spec.init_var),
    )
    .map_err(|e| NotApplicable(format!("filter breakdown: {e}")))?;
    let marginals: Vec<(f64, f64)> = run
        .marginals
        .iter()
        .map(|m| (m.mean, m.var.sqrt().max(SIGMA_FLOOR)))
        .collect();
    let extremes = sample_extremes(&marginals, N_PATHS, MC_SEED, minimize);
    let p1 = empirical_p1(&extremes, reported_daily.value);

    let mut sorted = extremes.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = crate::solvers::median(&sorted);
    let mean_ext = sorted.iter().sum::<f64>() / sorted.len() as f64;
    let sigma = (sorted.iter().map(|e| (e - mean_ext) * (e - mean_ext)).sum::<f64>()
        / sorted.len() as f64)
        .sqrt();

    let mut used = std::collections::BTreeMap::new();
    used.insert("slots_covered".to_string(), covered as f64);
    used.insert("reported".to_string(), reported_daily.value);
    TestResult::from_p1(TestId::Subdaily, p1, median, sigma, spec.cal_mse, used)
        .map_err(|e| NotApplicable(e.to_string()))
}
