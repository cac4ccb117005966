//! Synthetic-network generation, error injection, and skill evaluation
//! (hit rate / false-alarm rate by band), plus the end-to-end experiment
//! driver that calibrates on the first half of the record and scores the
//! second half.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assessment::{fuse, pre_assess, Assessment, Exclusion, TestId, TestResult};
use crate::core::{
    domain_test, DailyContext, DailySeries, GridProduct, GridProductKind, Observation,
    StationMeta, StationSource, SubdailySeries, VariableKind,
};
use crate::tests_point::{
    calibrate_gridded, calibrate_spatial, calibrate_trend, extract_grid_value, great_circle_km,
    run_gridded_test, run_spatial_test, run_trend_test, select_neighbors, PointTestConfig,
    DEFAULT_RADIUS_KM,
};
use crate::tests_st::{fit_st_models, run_st_test, screen_similar_stations, StInputs};

// the squared-exponential kernel is near-singular on close point pairs; the
// nugget keeps the Cholesky factorization stable
const NUGGET: f64 = 1e-4;
const LATTICE_SIZE: usize = 6;
const DIURNAL_AMPLITUDE: f64 = 6.0;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("station covariance not positive definite even with nugget")]
    CovarianceNotPd,
    #[error("assessment for {station} {date} has no truth label")]
    Misaligned { station: String, date: NaiveDate },
}

/// Configuration of the synthetic network: a seasonal mean field plus a
/// spatially correlated daily anomaly plus independent station noise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_stations: usize,
    pub n_tpaws: usize,
    pub lat_range: (f64, f64),
    pub lon_range: (f64, f64),
    pub years: usize,
    pub variable: VariableKind,
    pub spatial_range_km: f64,
    pub noise_sd: f64,
    pub seasonal_amplitude: f64,
    pub anomaly_sd: f64,
    pub mean_level: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        // a wind-gust network small enough for test-suite runtimes
        SyntheticConfig {
            n_stations: 30,
            n_tpaws: 5,
            lat_range: (-34.0, -30.0),
            lon_range: (116.0, 120.0),
            years: 4,
            variable: VariableKind::WindGust,
            spatial_range_km: 300.0,
            noise_sd: 1.5,
            seasonal_amplitude: 10.0,
            anomaly_sd: 8.0,
            mean_level: 34.0,
            seed: 42,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.n_tpaws >= self.n_stations {
            return Err(HarnessError::InvalidConfig(
                "n_tpaws must be smaller than n_stations".into(),
            ));
        }
        if self.years < 4 {
            return Err(HarnessError::InvalidConfig(
                "need at least 4 years (2 calibration + 2 evaluation)".into(),
            ));
        }
        Ok(())
    }
}

/// Everything the generator emits: station metadata, clean daily series,
/// per-product grids derived from the same field, hourly series for the
/// TPAWS stations, and the raw anomaly draws for diagnostics.
#[derive(Debug, Clone)]
pub struct SyntheticNetwork {
    pub stations: Vec<StationMeta>,
    pub daily: BTreeMap<String, DailySeries>,
    pub grids: Vec<GridProduct>,
    pub hourly_tpaws: BTreeMap<String, Vec<SubdailySeries>>,
    pub hourly_grid_at: BTreeMap<String, Vec<SubdailySeries>>,
    pub dates: Vec<NaiveDate>,
    /// per-station standardized anomaly draws, one value per date
    pub anomalies: BTreeMap<String, Vec<f64>>,
}

fn physical_floor(variable: VariableKind) -> Option<f64> {
    match variable {
        VariableKind::WindGust => Some(5.0),
        VariableKind::Rain | VariableKind::Humidity9am | VariableKind::Humidity3pm => Some(0.0),
        _ => None,
    }
}

fn clamp_physical(variable: VariableKind, v: f64) -> f64 {
    match physical_floor(variable) {
        Some(lo) => v.max(lo),
        None => v,
    }
}

fn box_muller(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-300..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn seasonal(cfg: &SyntheticConfig, day_index: usize) -> f64 {
    cfg.mean_level
        + cfg.seasonal_amplitude
            * (2.0 * std::f64::consts::PI * day_index as f64 / 365.25).sin()
}

fn diurnal_value(daily: f64, hour: usize) -> f64 {
    // peak at 15:00 local so the daily extreme equals the daily value
    let phase = 2.0 * std::f64::consts::PI * (hour as f64 - 15.0) / 24.0;
    daily - DIURNAL_AMPLITUDE * (1.0 - phase.cos()) / 2.0
}

/// Deterministic synthetic network: the joint (stations + grid lattice)
/// anomaly field uses an exponential correlation exp(-d / range) factored by
/// Cholesky with a 1e-6 nugget.
pub fn synthesize_network(cfg: &SyntheticConfig) -> Result<SyntheticNetwork, HarnessError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // station placement: TPAWS ids sort after officials for readability
    let mut stations = Vec::with_capacity(cfg.n_stations);
    for i in 0..cfg.n_stations {
        let tpaws = i < cfg.n_tpaws;
        stations.push(StationMeta {
            id: if tpaws {
                format!("TPA{:03}", i + 1)
            } else {
                format!("OFF{:03}", i + 1 - cfg.n_tpaws)
            },
            latitude: rng.gen_range(cfg.lat_range.0..cfg.lat_range.1),
            longitude: rng.gen_range(cfg.lon_range.0..cfg.lon_range.1),
            elevation_m: rng.gen_range(10.0..600.0),
            source: if tpaws {
                StationSource::Tpaws
            } else {
                StationSource::Official
            },
        });
    }

    // grid lattice covering the region with a half-cell margin
    let dlat = (cfg.lat_range.1 - cfg.lat_range.0 + 1.0) / (LATTICE_SIZE - 1) as f64;
    let dlon = (cfg.lon_range.1 - cfg.lon_range.0 + 1.0) / (LATTICE_SIZE - 1) as f64;
    let origin_lat = cfg.lat_range.0 - 0.5;
    let origin_lon = cfg.lon_range.0 - 0.5;
    let lattice: Vec<(f64, f64)> = (0..LATTICE_SIZE * LATTICE_SIZE)
        .map(|i| {
            let (r, c) = (i / LATTICE_SIZE, i % LATTICE_SIZE);
            (origin_lat + r as f64 * dlat, origin_lon + c as f64 * dlon)
        })
        .collect();

    // joint covariance over stations + lattice cells
    let points: Vec<(f64, f64)> = stations
        .iter()
        .map(|s| (s.latitude, s.longitude))
        .chain(lattice.iter().copied())
        .collect();
    let np = points.len();
    // squared-exponential correlation: the field is smooth, so neighbor and
    // grid interpolation errors stay small relative to station noise
    let mut cov = DMatrix::from_fn(np, np, |i, j| {
        let d = great_circle_km(points[i].0, points[i].1, points[j].0, points[j].1);
        (-(d / cfg.spatial_range_km).powi(2)).exp()
    });
    for i in 0..np {
        cov[(i, i)] += NUGGET;
    }
    let chol = Cholesky::new(cov).ok_or(HarnessError::CovarianceNotPd)?;
    let l = chol.l();

    let start = NaiveDate::from_ymd_opt(2016, 1, 1).unwrap();
    let n_days = cfg.years * 365;
    let dates: Vec<NaiveDate> =
        (0..n_days).map(|i| start + chrono::Duration::days(i as i64)).collect();

    let mut daily: BTreeMap<String, DailySeries> = stations
        .iter()
        .map(|s| (s.id.clone(), DailySeries::new(s.id.clone(), cfg.variable)))
        .collect();
    let mut anomalies: BTreeMap<String, Vec<f64>> = stations
        .iter()
        .map(|s| (s.id.clone(), Vec::with_capacity(n_days)))
        .collect();
    let mut lattice_field: Vec<Vec<f64>> = Vec::with_capacity(n_days);

    for (t, &date) in dates.iter().enumerate() {
        let z = DVector::from_fn(np, |_, _| box_muller(&mut rng));
        let a = &l * z;
        let base = seasonal(cfg, t);
        for (i, s) in stations.iter().enumerate() {
            let noise = cfg.noise_sd * box_muller(&mut rng);
            let v = clamp_physical(cfg.variable, base + cfg.anomaly_sd * a[i] + noise);
            daily.get_mut(&s.id).unwrap().values.insert(date, v);
            anomalies.get_mut(&s.id).unwrap().push(a[i]);
        }
        lattice_field.push(
            (0..lattice.len()).map(|j| base + cfg.anomaly_sd * a[cfg.n_stations + j]).collect(),
        );
    }

    // grid products: the shared lattice field plus a half-noise bias and a
    // substantial product-specific error (a daily offset plus per-cell
    // jitter), so the products carry partly independent information and the
    // fused verdict is not just the same test three times
    let products: Vec<GridProductKind> =
        [GridProductKind::Nwp, GridProductKind::Agcd, GridProductKind::Era]
            .into_iter()
            .filter(|p| p.supports(cfg.variable))
            .collect();
    let mut grids = Vec::new();
    for (pi, &product) in products.iter().enumerate() {
        let mut prng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0xA5A5 + pi as u64));
        let mut values = Vec::with_capacity(n_days);
        for field in &lattice_field {
            let daily_offset = cfg.noise_sd * box_muller(&mut prng);
            let mut layer = Vec::with_capacity(field.len());
            for &cell in field {
                let jitter = 3.0 * cfg.noise_sd * box_muller(&mut prng);
                layer.push(clamp_physical(
                    cfg.variable,
                    cell + 0.5 * cfg.noise_sd + daily_offset + jitter,
                ));
            }
            values.push(layer);
        }
        grids.push(GridProduct {
            product,
            variable: cfg.variable,
            origin_lat,
            origin_lon,
            cell_dlat: dlat,
            cell_dlon: dlon,
            nrows: LATTICE_SIZE,
            ncols: LATTICE_SIZE,
            dates: dates.clone(),
            values,
        });
    }

    // hourly series for the TPAWS stations: daily value shaped by a diurnal
    // harmonic peaking at 15:00, plus the matching grid trace
    let mut hourly_tpaws = BTreeMap::new();
    let mut hourly_grid_at = BTreeMap::new();
    for s in stations.iter().filter(|s| s.source == StationSource::Tpaws) {
        let series = &daily[&s.id];
        let mut own = Vec::with_capacity(n_days);
        let mut grid_trace = Vec::with_capacity(n_days);
        for &date in &dates {
            let dv = series.values[&date];
            own.push(SubdailySeries {
                station_id: s.id.clone(),
                date,
                variable: cfg.variable,
                values: (0..24).map(|h| (h as f64, diurnal_value(dv, h))).collect(),
            });
            if let Some(grid) = grids.first() {
                if let Ok(gv) = extract_grid_value(grid, s.latitude, s.longitude, date) {
                    grid_trace.push(SubdailySeries {
                        station_id: format!("grid@{}", s.id),
                        date,
                        variable: cfg.variable,
                        values: (0..24).map(|h| (h as f64, diurnal_value(gv, h))).collect(),
                    });
                }
            }
        }
        hourly_tpaws.insert(s.id.clone(), own);
        hourly_grid_at.insert(s.id.clone(), grid_trace);
    }

    Ok(SyntheticNetwork {
        stations,
        daily,
        grids,
        hourly_tpaws,
        hourly_grid_at,
        dates,
        anomalies,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sign {
    Positive,
    Negative,
    Both,
}

/// Error-injection process: each day is independently contaminated with
/// probability `fraction` by an additive error uniform in
/// [magnitude_low, magnitude_high] with the configured sign.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InjectionSpec {
    pub fraction: f64,
    pub magnitude_low: f64,
    pub magnitude_high: f64,
    pub sign: Sign,
    pub seed: u64,
}

impl InjectionSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if !(0.0..1.0).contains(&self.fraction) {
            return Err(HarnessError::InvalidConfig("fraction outside [0, 1)".into()));
        }
        if self.magnitude_low > self.magnitude_high {
            return Err(HarnessError::InvalidConfig("magnitude_low > magnitude_high".into()));
        }
        Ok(())
    }
}

/// Contaminated copy of a series plus the exact injected deltas.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionResult {
    pub contaminated: DailySeries,
    /// injected delta per contaminated date
    pub labels: BTreeMap<NaiveDate, f64>,
}

pub fn inject_errors(series: &DailySeries, spec: &InjectionSpec) -> InjectionResult {
    spec.validate().expect("injection spec invariants");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut contaminated = DailySeries::new(series.station_id.clone(), series.variable);
    let mut labels = BTreeMap::new();
    for (&date, &v) in &series.values {
        let hit: f64 = rng.gen_range(0.0..1.0);
        let magnitude = rng.gen_range(spec.magnitude_low..=spec.magnitude_high);
        let flip: f64 = rng.gen_range(0.0..1.0);
        if hit < spec.fraction {
            let delta = match spec.sign {
                Sign::Positive => magnitude,
                Sign::Negative => -magnitude,
                Sign::Both => {
                    if flip < 0.5 {
                        magnitude
                    } else {
                        -magnitude
                    }
                }
            };
            contaminated.values.insert(date, v + delta);
            labels.insert(date, delta);
        } else {
            contaminated.values.insert(date, v);
        }
    }
    InjectionResult { contaminated, labels }
}

/// One value band for the skill report, inclusive on both bounds. Bounded
/// bands take priority when a value sits on a shared boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub name: String,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
}

impl Band {
    fn contains(&self, v: f64) -> bool {
        self.lo.map_or(true, |lo| v >= lo) && self.hi.map_or(true, |hi| v <= hi)
    }
}

/// Table-3 style wind bands: <25, 25-60 (boundaries inclusive), >60 km/h.
pub fn wind_bands() -> Vec<Band> {
    vec![
        Band { name: "<25".into(), lo: None, hi: Some(25.0) },
        Band { name: "25-60".into(), lo: Some(25.0), hi: Some(60.0) },
        Band { name: ">60".into(), lo: Some(60.0), hi: None },
    ]
}

fn assign_band(v: f64, bands: &[Band]) -> Option<usize> {
    // bounded bands first, so boundary values land in the middle band
    bands
        .iter()
        .enumerate()
        .filter(|(_, b)| b.lo.is_some() && b.hi.is_some())
        .chain(bands.iter().enumerate().filter(|(_, b)| b.lo.is_none() || b.hi.is_none()))
        .find(|(_, b)| b.contains(v))
        .map(|(i, _)| i)
}

/// Confusion-matrix totals; rates are derived, so they always agree with the
/// counts exactly.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub hits: usize,
    pub misses: usize,
    pub false_alarms: usize,
    pub correct_negatives: usize,
    pub na: usize,
}

impl ConfusionCounts {
    pub fn contaminated(&self) -> usize {
        self.hits + self.misses
    }

    pub fn clean(&self) -> usize {
        self.false_alarms + self.correct_negatives
    }

    pub fn hit_rate(&self) -> Option<f64> {
        (self.contaminated() > 0).then(|| self.hits as f64 / self.contaminated() as f64)
    }

    pub fn false_alarm_rate(&self) -> Option<f64> {
        (self.clean() > 0).then(|| self.false_alarms as f64 / self.clean() as f64)
    }

    fn add(&mut self, contaminated: bool, flagged: Option<bool>) {
        match (flagged, contaminated) {
            (None, _) => self.na += 1,
            (Some(true), true) => self.hits += 1,
            (Some(false), true) => self.misses += 1,
            (Some(true), false) => self.false_alarms += 1,
            (Some(false), false) => self.correct_negatives += 1,
        }
    }
}

/// Hit and false-alarm rates, overall and per value band (banded by the true
/// pre-injection value).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillStats {
    pub overall: ConfusionCounts,
    pub per_band: Vec<(String, ConfusionCounts)>,
}

/// Truth about one (station, date): the clean value and whether an error was
/// injected.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthLabel {
    pub true_value: f64,
    pub contaminated: bool,
}

fn tally(
    outcomes: &[(String, NaiveDate, Option<bool>)],
    labels: &BTreeMap<(String, NaiveDate), TruthLabel>,
    bands: &[Band],
) -> Result<SkillStats, HarnessError> {
    let mut overall = ConfusionCounts::default();
    let mut per_band: Vec<(String, ConfusionCounts)> =
        bands.iter().map(|b| (b.name.clone(), ConfusionCounts::default())).collect();
    for (station, date, flagged) in outcomes {
        let label = labels.get(&(station.clone(), *date)).ok_or_else(|| {
            HarnessError::Misaligned { station: station.clone(), date: *date }
        })?;
        overall.add(label.contaminated, *flagged);
        if let Some(bi) = assign_band(label.true_value, bands) {
            per_band[bi].1.add(label.contaminated, *flagged);
        }
    }
    Ok(SkillStats { overall, per_band })
}

/// Score final assessments against truth labels. Flagged means final CL
/// below the threshold or a domain failure; NA assessments are excluded from
/// the rates and counted separately.
pub fn evaluate(
    assessments: &[Assessment],
    labels: &BTreeMap<(String, NaiveDate), TruthLabel>,
    cl_threshold: f64,
    bands: &[Band],
) -> Result<SkillStats, HarnessError> {
    let outcomes: Vec<(String, NaiveDate, Option<bool>)> = assessments
        .iter()
        .map(|a| {
            let flagged = if !a.domain_verdict.passed() {
                Some(true)
            } else {
                a.final_cl.map(|cl| cl < cl_threshold)
            };
            (a.observation.station_id.clone(), a.observation.date, flagged)
        })
        .collect();
    tally(&outcomes, labels, bands)
}

/// Full experiment description: the synthetic world, the contamination, and
/// which tests participate.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub synthetic: SyntheticConfig,
    pub injection: InjectionSpec,
    pub cl_threshold: f64,
    pub enabled_tests: Vec<TestId>,
    pub bands: Vec<Band>,
    pub radius_km: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            synthetic: SyntheticConfig::default(),
            injection: InjectionSpec {
                fraction: 0.10,
                magnitude_low: 18.0,
                magnitude_high: 52.56,
                sign: Sign::Positive,
                seed: 7,
            },
            cl_threshold: 0.05,
            enabled_tests: vec![
                TestId::Spatial,
                TestId::SpatioTemporal,
                TestId::Trend,
                TestId::Gridded(GridProductKind::Nwp),
                TestId::Gridded(GridProductKind::Era),
            ],
            bands: wind_bands(),
            radius_km: DEFAULT_RADIUS_KM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub cl_threshold: f64,
    /// per-test skill in enabled-test order (test flags on its own CL)
    pub per_test: Vec<(String, SkillStats)>,
    /// skill of the fused assessment
    pub merged: SkillStats,
    pub na_count: usize,
}

fn fmt_rate(r: Option<f64>) -> String {
    match r {
        Some(r) => format!("{:6.1}", 100.0 * r),
        None => "    NA".to_string(),
    }
}

impl ExperimentReport {
    /// Fixed-format text table (hit % / false-alarm % by band and test);
    /// byte-deterministic for a given report.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "skill report (flag when CL < {:.3})\n",
            self.cl_threshold
        ));
        let mut columns: Vec<(&str, &SkillStats)> =
            self.per_test.iter().map(|(n, s)| (n.as_str(), s)).collect();
        columns.push(("merged", &self.merged));
        out.push_str(&format!("{:<18}", "band"));
        for (name, _) in &columns {
            out.push_str(&format!(" | {:>13}", name));
        }
        out.push('\n');
        let band_names: Vec<String> = std::iter::once("all".to_string())
            .chain(self.merged.per_band.iter().map(|(n, _)| n.clone()))
            .collect();
        for (bi, bname) in band_names.iter().enumerate() {
            for (metric, pick) in [
                ("hit%", true),
                ("fa%", false),
            ] {
                out.push_str(&format!("{:<18}", format!("{bname} {metric}")));
                for (_, stats) in &columns {
                    let counts = if bi == 0 {
                        &stats.overall
                    } else {
                        &stats.per_band[bi - 1].1
                    };
                    let r = if pick { counts.hit_rate() } else { counts.false_alarm_rate() };
                    out.push_str(&format!(" | {:>13}", fmt_rate(r)));
                }
                out.push('\n');
            }
        }
        out.push_str(&format!("NA assessments: {}\n", self.na_count));
        out
    }
}

fn restrict(series: &DailySeries, dates: &[NaiveDate]) -> DailySeries {
    let set: std::collections::BTreeSet<NaiveDate> = dates.iter().copied().collect();
    DailySeries {
        station_id: series.station_id.clone(),
        variable: series.variable,
        values: series
            .values
            .iter()
            .filter(|(d, _)| set.contains(d))
            .map(|(d, v)| (*d, *v))
            .collect(),
    }
}

struct StationModels {
    spatial: Option<crate::tests_point::SpatialModel>,
    trend: Option<crate::tests_point::TrendModel>,
    st: Option<crate::tests_st::StModelSet>,
    gridded: BTreeMap<GridProductKind, crate::tests_point::GriddedModel>,
    calibration_exclusions: Vec<Exclusion>,
    neighbor_ids: Vec<String>,
}

/// Calibrate years 1..n/2, contaminate and assess years n/2+1..n, and tabulate
/// per-test and merged skill. Deterministic given the two seeds.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    cfg.injection.validate()?;
    let net = synthesize_network(&cfg.synthetic)?;
    let half = net.dates.len() / 2;
    let cal_dates = &net.dates[..half];
    let eval_dates = &net.dates[half..];
    let point_cfg = PointTestConfig::default();

    let tpaws: Vec<&StationMeta> = net
        .stations
        .iter()
        .filter(|s| s.source == StationSource::Tpaws)
        .collect();

    // per-station grid series over the full record, per product
    let mut grid_series: BTreeMap<(String, GridProductKind), DailySeries> = BTreeMap::new();
    for s in &tpaws {
        for grid in &net.grids {
            let mut gs = DailySeries::new(format!("grid@{}", s.id), cfg.synthetic.variable);
            for &date in &net.dates {
                if let Ok(v) = extract_grid_value(grid, s.latitude, s.longitude, date) {
                    gs.values.insert(date, v);
                }
            }
            grid_series.insert((s.id.clone(), grid.product), gs);
        }
    }

    // calibration
    let mut models: BTreeMap<String, StationModels> = BTreeMap::new();
    for target in &tpaws {
        let neighbors = select_neighbors(target, &net.stations, cfg.radius_km);
        let neighbor_ids: Vec<String> = neighbors.iter().map(|n| n.id.clone()).collect();
        let target_cal = restrict(&net.daily[&target.id], cal_dates);
        let neighbor_cal: BTreeMap<String, DailySeries> = neighbor_ids
            .iter()
            .map(|id| (id.clone(), restrict(&net.daily[id], cal_dates)))
            .collect();
        let mut exclusions = Vec::new();

        let spatial = if cfg.enabled_tests.contains(&TestId::Spatial) {
            match calibrate_spatial(&target_cal, &neighbor_cal, &point_cfg) {
                Ok(m) => Some(m),
                Err(e) => {
                    exclusions.push(Exclusion {
                        test_id: TestId::Spatial,
                        reason: format!("calibration: {e}"),
                    });
                    None
                }
            }
        } else {
            None
        };
        let trend = if cfg.enabled_tests.contains(&TestId::Trend) {
            match calibrate_trend(&target_cal, &neighbor_cal, &point_cfg) {
                Ok(m) => Some(m),
                Err(e) => {
                    exclusions.push(Exclusion {
                        test_id: TestId::Trend,
                        reason: format!("calibration: {e}"),
                    });
                    None
                }
            }
        } else {
            None
        };
        let st = if cfg.enabled_tests.contains(&TestId::SpatioTemporal) {
            let fit = screen_similar_stations(&target_cal, &neighbor_cal, &point_cfg)
                .map_err(|e| e.to_string())
                .and_then(|reports| {
                    let similar: BTreeMap<String, DailySeries> = reports
                        .iter()
                        .filter(|r| r.similar)
                        .map(|r| (r.candidate_id.clone(), neighbor_cal[&r.candidate_id].clone()))
                        .collect();
                    if similar.is_empty() {
                        return Err("no similar stations".to_string());
                    }
                    fit_st_models(&target_cal, &similar, &point_cfg).map_err(|e| e.to_string())
                });
            match fit {
                Ok(m) => Some(m),
                Err(e) => {
                    exclusions.push(Exclusion {
                        test_id: TestId::SpatioTemporal,
                        reason: format!("calibration: {e}"),
                    });
                    None
                }
            }
        } else {
            None
        };
        let mut gridded = BTreeMap::new();
        for grid in &net.grids {
            if !cfg.enabled_tests.contains(&TestId::Gridded(grid.product)) {
                continue;
            }
            let gs = restrict(&grid_series[&(target.id.clone(), grid.product)], cal_dates);
            match calibrate_gridded(&target_cal, &gs, grid.product, &point_cfg) {
                Ok(m) => {
                    gridded.insert(grid.product, m);
                }
                Err(e) => exclusions.push(Exclusion {
                    test_id: TestId::Gridded(grid.product),
                    reason: format!("calibration: {e}"),
                }),
            }
        }
        models.insert(
            target.id.clone(),
            StationModels {
                spatial,
                trend,
                st,
                gridded,
                calibration_exclusions: exclusions,
                neighbor_ids,
            },
        );
    }

    // contamination of the evaluation window, per TPAWS station
    let mut labels: BTreeMap<(String, NaiveDate), TruthLabel> = BTreeMap::new();
    let mut observed: BTreeMap<String, DailySeries> = BTreeMap::new();
    for (si, target) in tpaws.iter().enumerate() {
        let truth_eval = restrict(&net.daily[&target.id], eval_dates);
        let spec = InjectionSpec {
            seed: cfg.injection.seed.wrapping_add(si as u64),
            ..cfg.injection.clone()
        };
        let injected = inject_errors(&truth_eval, &spec);
        for (&date, &true_value) in &truth_eval.values {
            labels.insert(
                (target.id.clone(), date),
                TruthLabel { true_value, contaminated: injected.labels.contains_key(&date) },
            );
        }
        observed.insert(target.id.clone(), injected.contaminated);
    }

    // assessment
    let mut assessments = Vec::new();
    let mut per_test_outcomes: Vec<(TestId, Vec<(String, NaiveDate, Option<bool>)>)> = cfg
        .enabled_tests
        .iter()
        .map(|t| (*t, Vec::new()))
        .collect();
    for target in &tpaws {
        let sm = &models[&target.id];
        let obs_series = &observed[&target.id];
        let ctx = DailyContext { elevation_m: target.elevation_m, ..Default::default() };
        for &date in eval_dates {
            let Some(value) = obs_series.get(date) else { continue };
            let obs = Observation {
                station_id: target.id.clone(),
                date,
                variable: cfg.synthetic.variable,
                value,
                quality_hint: None,
            };
            let verdict = domain_test(&obs, &ctx);
            let mut results: Vec<TestResult> = Vec::new();
            let mut exclusions = sm.calibration_exclusions.clone();

            let todays_neighbors: BTreeMap<String, f64> = sm
                .neighbor_ids
                .iter()
                .filter_map(|id| net.daily[id].get(date).map(|v| (id.clone(), v)))
                .collect();
            if let Some(m) = &sm.spatial {
                match run_spatial_test(m, &obs, &todays_neighbors) {
                    Ok(r) => results.push(r),
                    Err(e) => exclusions.push(Exclusion { test_id: TestId::Spatial, reason: e.0 }),
                }
            }
            if let Some(m) = &sm.trend {
                let prev = date.pred_opt().and_then(|p| obs_series.get(p));
                let diffs: BTreeMap<String, f64> = sm
                    .neighbor_ids
                    .iter()
                    .filter_map(|id| {
                        let today = net.daily[id].get(date)?;
                        let yesterday = net.daily[id].get(date.pred_opt()?)?;
                        Some((id.clone(), today - yesterday))
                    })
                    .collect();
                match run_trend_test(m, &obs, prev, &diffs) {
                    Ok(r) => results.push(r),
                    Err(e) => exclusions.push(Exclusion { test_id: TestId::Trend, reason: e.0 }),
                }
            }
            if let Some(m) = &sm.st {
                let prev = date.pred_opt();
                let prev2 = prev.and_then(|p| p.pred_opt());
                let inputs = StInputs {
                    target_lag1: prev.and_then(|p| obs_series.get(p)),
                    target_lag2: prev2.and_then(|p| obs_series.get(p)),
                    similar_today: m
                        .similar_ids
                        .iter()
                        .filter_map(|id| net.daily[id].get(date).map(|v| (id.clone(), v)))
                        .collect(),
                    similar_lag1: m
                        .similar_ids
                        .iter()
                        .filter_map(|id| {
                            net.daily[id].get(prev?).map(|v| (id.clone(), v))
                        })
                        .collect(),
                };
                match run_st_test(m, &obs, &inputs) {
                    Ok(r) => results.push(r),
                    Err(e) => exclusions
                        .push(Exclusion { test_id: TestId::SpatioTemporal, reason: e.0 }),
                }
            }
            for (product, m) in &sm.gridded {
                let gv = grid_series[&(target.id.clone(), *product)].get(date);
                match run_gridded_test(m, &obs, gv) {
                    Ok(r) => results.push(r),
                    Err(e) => exclusions
                        .push(Exclusion { test_id: TestId::Gridded(*product), reason: e.0 }),
                }
            }

            // per-test outcomes before pre-assessment drops one of the pair
            for (tid, outcomes) in per_test_outcomes.iter_mut() {
                let flagged = results
                    .iter()
                    .find(|r| r.test_id == *tid)
                    .map(|r| r.cl < cfg.cl_threshold);
                outcomes.push((target.id.clone(), date, flagged));
            }

            // pre-assessment: keep only the winner of spatial vs ST
            let spatial_mse =
                results.iter().find(|r| r.test_id == TestId::Spatial).map(|r| r.cal_mse);
            let st_mse = results
                .iter()
                .find(|r| r.test_id == TestId::SpatioTemporal)
                .map(|r| r.cal_mse);
            if spatial_mse.is_some() && st_mse.is_some() {
                let keep = pre_assess(spatial_mse, st_mse, &[]);
                let drop = if keep == TestId::Spatial {
                    TestId::SpatioTemporal
                } else {
                    TestId::Spatial
                };
                results.retain(|r| r.test_id != drop);
                exclusions.push(Exclusion {
                    test_id: drop,
                    reason: "pre-assessment: lower normalized weight".into(),
                });
            }

            assessments.push(fuse(&obs, verdict, &results, exclusions));
        }
    }

    let merged = evaluate(&assessments, &labels, cfg.cl_threshold, &cfg.bands)?;
    let mut per_test = Vec::new();
    for (tid, outcomes) in &per_test_outcomes {
        per_test.push((tid.name(), tally(outcomes, &labels, &cfg.bands)?));
    }
    Ok(ExperimentReport {
        cl_threshold: cfg.cl_threshold,
        per_test,
        merged,
        na_count: merged_na(&assessments),
    })
}

fn merged_na(assessments: &[Assessment]) -> usize {
    assessments.iter().filter(|a| a.is_na()).count()
}
