//! Command-line interface: calibrate, assess, inject, evaluate, report.
//! Exit codes: 0 success, 1 usage error, 2 data error. Data errors go to
//! stderr with the machine-parsable prefix `ERROR <code>:`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::PathBuf;

use chrono::NaiveDate;
use clap::{Parser, Subcommand};
use serde_json::Value;

use crate::assessment::{fuse, pre_assess, Assessment, Exclusion, TestId, TestResult};
use crate::core::{
    domain_test, DailyContext, DailySeries, GridProduct, GridProductKind, Observation,
    StationMeta, StationSource, VariableKind,
};
use crate::harness::{evaluate, inject_errors, wind_bands, Band, TruthLabel};
use crate::io::{
    assessments_to_json, load_injection_spec, load_run_config, read_daily, read_grid,
    read_labels, read_stations, IoError, ModelStore, RunConfig,
};
use crate::tests_point::{
    calibrate_gridded, calibrate_spatial, calibrate_trend, extract_grid_value,
    run_gridded_test, run_spatial_test, run_trend_test, select_neighbors, GriddedModel,
    SpatialModel, TrendModel,
};
use crate::tests_st::{fit_st_models, run_st_test, screen_similar_stations, StInputs, StModelSet};

#[derive(Parser)]
#[command(name = "obsqa", about = "Quality assessment for third-party weather observations")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit and persist per-station test models over a date window
    Calibrate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        from: String,
        #[arg(long)]
        to: String,
    },
    /// Assess observations for one date and write an assessment report
    Assess {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        date: String,
        #[arg(long)]
        station: Option<String>,
        #[arg(long)]
        variable: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Contaminate the configured daily file and write data + truth labels
    Inject {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score stored models against a truth-label file
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        threshold: f64,
    },
    /// Render an assessment report (traceback, lowest CL first)
    Report {
        #[arg(long)]
        assessment: PathBuf,
        #[arg(long, value_parser = ["text", "json"])]
        format: String,
    },
}

/// Run the CLI on the given argv; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints its own help/usage; --help and --version are success
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("ERROR E_USAGE: {msg}");
            1
        }
        Err(CliError::Data(e)) => {
            eprintln!("ERROR {}: {e}", e.code());
            2
        }
    }
}

enum CliError {
    Usage(String),
    Data(IoError),
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Data(e)
    }
}

fn parse_date(s: &str) -> Result<NaiveDate, CliError> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .map_err(|_| CliError::Usage(format!("bad date `{s}`, expected YYYY-MM-DD")))
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Calibrate { config, from, to } => {
            let cfg = load_run_config(&config)?;
            let from = parse_date(&from)?;
            let to = parse_date(&to)?;
            if from > to {
                return Err(CliError::Usage("--from is after --to".into()));
            }
            calibrate(&cfg, from, to)?;
            Ok(())
        }
        Cmd::Assess { config, date, station, variable, out } => {
            let mut cfg = load_run_config(&config)?;
            if let Some(v) = variable {
                cfg.variable = VariableKind::parse(&v)
                    .ok_or_else(|| CliError::Usage(format!("unknown variable `{v}`")))?;
            }
            let date = parse_date(&date)?;
            let json = assess(&cfg, date, station.as_deref())?;
            match out {
                Some(path) => std::fs::write(&path, json.as_bytes()).map_err(|source| {
                    IoError::File { path: path.display().to_string(), source }
                })?,
                None => println!("{json}"),
            }
            Ok(())
        }
        Cmd::Inject { config, spec, out } => {
            let cfg = load_run_config(&config)?;
            let spec = load_injection_spec(&spec)?;
            inject(&cfg, &spec, &out)?;
            Ok(())
        }
        Cmd::Evaluate { config, labels, threshold } => {
            let cfg = load_run_config(&config)?;
            if !(0.0..=1.0).contains(&threshold) {
                return Err(CliError::Usage("--threshold outside [0, 1]".into()));
            }
            let labels = read_labels(&labels)?;
            let text = evaluate_cmd(&cfg, &labels, threshold)?;
            print!("{text}");
            Ok(())
        }
        Cmd::Report { assessment, format } => {
            let text = std::fs::read_to_string(&assessment).map_err(|source| {
                IoError::File { path: assessment.display().to_string(), source }
            })?;
            let value: Value = serde_json::from_str(&text).map_err(IoError::from)?;
            if format == "json" {
                let canonical = crate::io::to_canonical_json(&value)?;
                println!("{canonical}");
            } else {
                print!("{}", render_report_text(&value)?);
            }
            Ok(())
        }
    }
}

struct World {
    stations: Vec<StationMeta>,
    daily: BTreeMap<String, DailySeries>,
    grids: Vec<GridProduct>,
}

fn load_world(cfg: &RunConfig) -> Result<World, IoError> {
    let stations = read_stations(&cfg.stations)?;
    let daily = read_daily(&cfg.daily, cfg.variable)?;
    let mut grids = Vec::new();
    for path in &cfg.grids {
        let grid = read_grid(path)?;
        if grid.variable == cfg.variable {
            grids.push(grid);
        }
    }
    Ok(World { stations, daily, grids })
}

fn restrict(series: &DailySeries, from: NaiveDate, to: NaiveDate) -> DailySeries {
    DailySeries {
        station_id: series.station_id.clone(),
        variable: series.variable,
        values: series.values.range(from..=to).map(|(d, v)| (*d, *v)).collect(),
    }
}

fn calibrate(cfg: &RunConfig, from: NaiveDate, to: NaiveDate) -> Result<(), IoError> {
    let world = load_world(cfg)?;
    let store = ModelStore::new(&cfg.model_store)?;
    for target in world.stations.iter().filter(|s| s.source == StationSource::Tpaws) {
        let Some(series) = world.daily.get(&target.id) else {
            eprintln!("note: no daily data for {}", target.id);
            continue;
        };
        let target_cal = restrict(series, from, to);
        let neighbors = select_neighbors(target, &world.stations, cfg.radius_km);
        let neighbor_cal: BTreeMap<String, DailySeries> = neighbors
            .iter()
            .filter_map(|n| world.daily.get(&n.id).map(|s| (n.id.clone(), restrict(s, from, to))))
            .collect();
        for &test in &cfg.enabled_tests {
            let outcome: Result<(), String> = match test {
                TestId::Spatial => calibrate_spatial(&target_cal, &neighbor_cal, &cfg.point)
                    .map_err(|e| e.to_string())
                    .and_then(|m| {
                        store.save(&target.id, cfg.variable, test, &m).map_err(|e| e.to_string())
                    }),
                TestId::Trend => calibrate_trend(&target_cal, &neighbor_cal, &cfg.point)
                    .map_err(|e| e.to_string())
                    .and_then(|m| {
                        store.save(&target.id, cfg.variable, test, &m).map_err(|e| e.to_string())
                    }),
                TestId::SpatioTemporal => {
                    screen_similar_stations(&target_cal, &neighbor_cal, &cfg.point)
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
                            fit_st_models(&target_cal, &similar, &cfg.point)
                                .map_err(|e| e.to_string())
                        })
                        .and_then(|m| {
                            store
                                .save(&target.id, cfg.variable, test, &m)
                                .map_err(|e| e.to_string())
                        })
                }
                TestId::Gridded(product) => {
                    match world.grids.iter().find(|g| g.product == product) {
                        None => Err(format!("no grid file for product {}", product.name())),
                        Some(grid) => {
                            let mut gs = DailySeries::new(
                                format!("grid@{}", target.id),
                                cfg.variable,
                            );
                            for &date in &grid.dates {
                                if !(from..=to).contains(&date) {
                                    continue;
                                }
                                if let Ok(v) = extract_grid_value(
                                    grid,
                                    target.latitude,
                                    target.longitude,
                                    date,
                                ) {
                                    gs.values.insert(date, v);
                                }
                            }
                            calibrate_gridded(&target_cal, &gs, product, &cfg.point)
                                .map_err(|e| e.to_string())
                                .and_then(|m| {
                                    store
                                        .save(&target.id, cfg.variable, test, &m)
                                        .map_err(|e| e.to_string())
                                })
                        }
                    }
                }
                TestId::Domain | TestId::Subdaily => Ok(()),
            };
            match outcome {
                Ok(()) => println!("calibrated {} for {}", test.name(), target.id),
                Err(reason) => {
                    eprintln!("note: skipped {} for {}: {reason}", test.name(), target.id)
                }
            }
        }
    }
    Ok(())
}

#[derive(Default)]
struct LoadedModels {
    spatial: Option<SpatialModel>,
    trend: Option<TrendModel>,
    st: Option<StModelSet>,
    gridded: BTreeMap<GridProductKind, GriddedModel>,
}

fn load_models(
    store: &ModelStore,
    station: &str,
    variable: VariableKind,
    enabled: &[TestId],
) -> Result<LoadedModels, IoError> {
    let mut models = LoadedModels::default();
    for &test in enabled {
        macro_rules! try_load {
            ($slot:expr) => {
                match store.load(station, variable, test) {
                    Ok(m) => $slot = Some(m),
                    Err(IoError::NotCalibrated { .. }) => {}
                    Err(e) => return Err(e),
                }
            };
        }
        match test {
            TestId::Spatial => try_load!(models.spatial),
            TestId::Trend => try_load!(models.trend),
            TestId::SpatioTemporal => try_load!(models.st),
            TestId::Gridded(product) => match store.load(station, variable, test) {
                Ok(m) => {
                    models.gridded.insert(product, m);
                }
                Err(IoError::NotCalibrated { .. }) => {}
                Err(e) => return Err(e),
            },
            TestId::Domain | TestId::Subdaily => {}
        }
    }
    Ok(models)
}

fn assess_one(
    cfg: &RunConfig,
    world: &World,
    models: &LoadedModels,
    target: &StationMeta,
    date: NaiveDate,
) -> Option<Assessment> {
    let obs_series = world.daily.get(&target.id)?;
    let value = obs_series.get(date)?;
    let obs = Observation {
        station_id: target.id.clone(),
        date,
        variable: cfg.variable,
        value,
        quality_hint: None,
    };
    let ctx = DailyContext { elevation_m: target.elevation_m, ..Default::default() };
    let verdict = domain_test(&obs, &ctx);
    let neighbors = select_neighbors(target, &world.stations, cfg.radius_km);
    let mut results: Vec<TestResult> = Vec::new();
    let mut exclusions: Vec<Exclusion> = Vec::new();
    for &test in &cfg.enabled_tests {
        match test {
            TestId::Spatial => {
                let Some(m) = &models.spatial else {
                    exclusions.push(Exclusion { test_id: test, reason: "not calibrated".into() });
                    continue;
                };
                let todays: BTreeMap<String, f64> = neighbors
                    .iter()
                    .filter_map(|n| {
                        world.daily.get(&n.id)?.get(date).map(|v| (n.id.clone(), v))
                    })
                    .collect();
                match run_spatial_test(m, &obs, &todays) {
                    Ok(r) => results.push(r),
                    Err(e) => exclusions.push(Exclusion { test_id: test, reason: e.0 }),
                }
            }
            TestId::Trend => {
                let Some(m) = &models.trend else {
                    exclusions.push(Exclusion { test_id: test, reason: "not calibrated".into() });
                    continue;
                };
                let prev = date.pred_opt().and_then(|p| obs_series.get(p));
                let diffs: BTreeMap<String, f64> = neighbors
                    .iter()
                    .filter_map(|n| {
                        let s = world.daily.get(&n.id)?;
                        let today = s.get(date)?;
                        let yesterday = s.get(date.pred_opt()?)?;
                        Some((n.id.clone(), today - yesterday))
                    })
                    .collect();
                match run_trend_test(m, &obs, prev, &diffs) {
                    Ok(r) => results.push(r),
                    Err(e) => exclusions.push(Exclusion { test_id: test, reason: e.0 }),
                }
            }
            TestId::SpatioTemporal => {
                let Some(m) = &models.st else {
                    exclusions.push(Exclusion { test_id: test, reason: "not calibrated".into() });
                    continue;
                };
                let prev = date.pred_opt();
                let inputs = StInputs {
                    target_lag1: prev.and_then(|p| obs_series.get(p)),
                    target_lag2: prev
                        .and_then(|p| p.pred_opt())
                        .and_then(|p| obs_series.get(p)),
                    similar_today: m
                        .similar_ids
                        .iter()
                        .filter_map(|id| {
                            world.daily.get(id)?.get(date).map(|v| (id.clone(), v))
                        })
                        .collect(),
                    similar_lag1: m
                        .similar_ids
                        .iter()
                        .filter_map(|id| {
                            world.daily.get(id)?.get(prev?).map(|v| (id.clone(), v))
                        })
                        .collect(),
                };
                match run_st_test(m, &obs, &inputs) {
                    Ok(r) => results.push(r),
                    Err(e) => exclusions.push(Exclusion { test_id: test, reason: e.0 }),
                }
            }
            TestId::Gridded(product) => {
                let Some(m) = models.gridded.get(&product) else {
                    exclusions.push(Exclusion { test_id: test, reason: "not calibrated".into() });
                    continue;
                };
                let gv = world
                    .grids
                    .iter()
                    .find(|g| g.product == product)
                    .and_then(|g| {
                        extract_grid_value(g, target.latitude, target.longitude, date).ok()
                    });
                match run_gridded_test(m, &obs, gv) {
                    Ok(r) => results.push(r),
                    Err(e) => exclusions.push(Exclusion { test_id: test, reason: e.0 }),
                }
            }
            TestId::Domain | TestId::Subdaily => {}
        }
    }

    // pre-assessment: keep only the winner between spatial and spatiotemporal
    let spatial_mse = results.iter().find(|r| r.test_id == TestId::Spatial).map(|r| r.cal_mse);
    let st_mse = results
        .iter()
        .find(|r| r.test_id == TestId::SpatioTemporal)
        .map(|r| r.cal_mse);
    if spatial_mse.is_some() && st_mse.is_some() {
        let keep = pre_assess(spatial_mse, st_mse, &[]);
        let drop = if keep == TestId::Spatial { TestId::SpatioTemporal } else { TestId::Spatial };
        results.retain(|r| r.test_id != drop);
        exclusions.push(Exclusion {
            test_id: drop,
            reason: "pre-assessment: lower normalized weight".into(),
        });
    }
    Some(fuse(&obs, verdict, &results, exclusions))
}

fn assess(cfg: &RunConfig, date: NaiveDate, station: Option<&str>) -> Result<String, IoError> {
    let world = load_world(cfg)?;
    let store = ModelStore::new(&cfg.model_store)?;
    let mut assessments = Vec::new();
    for target in world.stations.iter().filter(|s| s.source == StationSource::Tpaws) {
        if station.is_some_and(|id| id != target.id) {
            continue;
        }
        let models = load_models(&store, &target.id, cfg.variable, &cfg.enabled_tests)?;
        if let Some(a) = assess_one(cfg, &world, &models, target, date) {
            assessments.push(a);
        }
    }
    assessments_to_json(&assessments)
}

fn inject(
    cfg: &RunConfig,
    spec: &crate::harness::InjectionSpec,
    out: &std::path::Path,
) -> Result<(), IoError> {
    let world = load_world(cfg)?;
    std::fs::create_dir_all(out).map_err(|source| IoError::File {
        path: out.display().to_string(),
        source,
    })?;
    let mut data = format!(
        "# unit: {}\nstation_id,date,value\n",
        cfg.variable.canonical_unit().symbol()
    );
    let mut labels = String::from("station_id,date,true_value,contaminated\n");
    let tpaws_ids: Vec<String> = world
        .stations
        .iter()
        .filter(|s| s.source == StationSource::Tpaws)
        .map(|s| s.id.clone())
        .collect();
    for (station, series) in &world.daily {
        if !tpaws_ids.contains(station) {
            // official stations pass through unchanged and unlabeled
            for (date, value) in &series.values {
                data.push_str(&format!("{station},{date},{}\n", crate::io::fmt_g17(*value)));
            }
            continue;
        }
        let idx = tpaws_ids.iter().position(|id| id == station).unwrap() as u64;
        let per_station = crate::harness::InjectionSpec {
            seed: spec.seed.wrapping_add(idx),
            ..spec.clone()
        };
        let injected = inject_errors(series, &per_station);
        for (date, value) in &injected.contaminated.values {
            data.push_str(&format!("{station},{date},{}\n", crate::io::fmt_g17(*value)));
            let true_value = series.values[date];
            let flag = u8::from(injected.labels.contains_key(date));
            labels.push_str(&format!(
                "{station},{date},{},{flag}\n",
                crate::io::fmt_g17(true_value)
            ));
        }
    }
    for (name, body) in [("daily_contaminated.csv", &data), ("labels.csv", &labels)] {
        let path = out.join(name);
        std::fs::write(&path, body.as_bytes()).map_err(|source| IoError::File {
            path: path.display().to_string(),
            source,
        })?;
    }
    Ok(())
}

fn evaluate_cmd(
    cfg: &RunConfig,
    labels: &BTreeMap<(String, NaiveDate), TruthLabel>,
    threshold: f64,
) -> Result<String, IoError> {
    let world = load_world(cfg)?;
    let store = ModelStore::new(&cfg.model_store)?;
    let mut assessments = Vec::new();
    let mut by_station: BTreeMap<&String, Vec<NaiveDate>> = BTreeMap::new();
    for (station, date) in labels.keys() {
        by_station.entry(station).or_default().push(*date);
    }
    for (station, dates) in by_station {
        let Some(target) = world.stations.iter().find(|s| &s.id == station) else {
            return Err(IoError::Config(format!("label for unknown station `{station}`")));
        };
        let models = load_models(&store, station, cfg.variable, &cfg.enabled_tests)?;
        for date in dates {
            if let Some(a) = assess_one(cfg, &world, &models, target, date) {
                assessments.push(a);
            }
        }
    }
    let bands: Vec<Band> = if cfg.variable == VariableKind::WindGust {
        wind_bands()
    } else {
        Vec::new()
    };
    let stats = evaluate(&assessments, labels, threshold, &bands)
        .map_err(|e| IoError::Config(e.to_string()))?;
    let mut out = String::new();
    out.push_str(&format!("assessed: {}\n", assessments.len()));
    out.push_str(&format!(
        "hits: {} / {} contaminated\n",
        stats.overall.hits,
        stats.overall.contaminated()
    ));
    out.push_str(&format!(
        "false alarms: {} / {} clean\n",
        stats.overall.false_alarms,
        stats.overall.clean()
    ));
    out.push_str(&format!("not applicable: {}\n", stats.overall.na));
    for (name, counts) in &stats.per_band {
        out.push_str(&format!(
            "band {name}: hits {}/{} false alarms {}/{}\n",
            counts.hits,
            counts.contaminated(),
            counts.false_alarms,
            counts.clean()
        ));
    }
    Ok(out)
}

fn render_report_text(value: &Value) -> Result<String, IoError> {
    let items = value
        .get("assessments")
        .and_then(Value::as_array)
        .ok_or_else(|| IoError::Config("report file has no `assessments` array".into()))?;
    let mut out = String::new();
    for item in items {
        let s = |key: &str| item.get(key).and_then(Value::as_str).unwrap_or("?");
        out.push_str(&format!(
            "{} {} {} = {}\n",
            s("station_id"),
            s("date"),
            s("variable"),
            item.get("value").and_then(Value::as_f64).map_or("?".into(), crate::io::fmt_g17),
        ));
        match item.get("final_cl").and_then(Value::as_f64) {
            Some(cl) => out.push_str(&format!("final CL: {}\n", crate::io::fmt_g17(cl))),
            None => out.push_str("final CL: NA\n"),
        }
        if item.get("domain_pass") == Some(&Value::Bool(false)) {
            out.push_str("domain test: FAIL\n");
        }
        if let Some(tb) = item.get("traceback") {
            if let Some(contributing) = tb.get("contributing").and_then(Value::as_array) {
                for entry in contributing {
                    out.push_str(&format!(
                        "  {} cl={} weight={}\n",
                        entry
                            .get("test_id")
                            .map(|t| render_test_id(t))
                            .unwrap_or_else(|| "?".into()),
                        entry.get("cl").and_then(Value::as_f64).map_or("?".into(), crate::io::fmt_g17),
                        entry
                            .get("weight")
                            .and_then(Value::as_f64)
                            .map_or("?".into(), crate::io::fmt_g17),
                    ));
                }
            }
            if let Some(excluded) = tb.get("excluded").and_then(Value::as_array) {
                for ex in excluded {
                    out.push_str(&format!(
                        "  {} excluded: {}\n",
                        ex.get("test_id").map(|t| render_test_id(t)).unwrap_or_else(|| "?".into()),
                        ex.get("reason").and_then(Value::as_str).unwrap_or("?"),
                    ));
                }
            }
        }
        out.push('\n');
    }
    Ok(out)
}

fn render_test_id(v: &Value) -> String {
    match v {
        Value::String(s) => s.to_lowercase(),
        Value::Object(map) => map
            .iter()
            .next()
            .map(|(k, inner)| format!("{}_{}", k.to_lowercase(), render_test_id(inner)))
            .unwrap_or_else(|| "?".into()),
        other => other.to_string(),
    }
}
