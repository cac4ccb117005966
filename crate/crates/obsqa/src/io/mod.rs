//! Data ingestion (stations, daily and sub-daily observations, grid
//! products), model-store persistence with canonical byte-stable JSON, flat
//! `key = value` run configuration, report emission, and the CLI driver.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, FixedOffset, NaiveDate};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::assessment::{traceback, Assessment, TestId};
use crate::core::{
    convert_units, DailySeries, GridProduct, GridProductKind, StationMeta, StationSource,
    SubdailySeries, Unit, VariableKind,
};
use crate::harness::Sign;
use crate::tests_point::PointTestConfig;

pub mod cli;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    /// every offending line is listed; nothing is silently coerced
    #[error("parse error in {path}:\n{}", issues.join("\n"))]
    Parse { path: String, issues: Vec<String> },
    #[error("config error: {0}")]
    Config(String),
    #[error("no calibrated model for ({station}, {variable}, {test})")]
    NotCalibrated { station: String, variable: String, test: String },
    #[error("model schema version mismatch: expected {expected}, found {found}")]
    Version { expected: u32, found: u64 },
    #[error("io error on {path}: {source}")]
    File { path: String, source: std::io::Error },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl IoError {
    /// machine-parsable code for the `ERROR <code>:` stderr prefix
    pub fn code(&self) -> &'static str {
        match self {
            IoError::Parse { .. } => "E_PARSE",
            IoError::Config(_) => "E_CONFIG",
            IoError::NotCalibrated { .. } => "E_NOT_CALIBRATED",
            IoError::Version { .. } => "E_VERSION",
            IoError::File { .. } => "E_IO",
            IoError::Json(_) => "E_JSON",
        }
    }
}

fn read_to_string(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|source| IoError::File {
        path: path.display().to_string(),
        source,
    })
}

// ---------------------------------------------------------------------------
// canonical JSON
// ---------------------------------------------------------------------------

/// `%.17g`: up to 17 significant digits, trailing zeros trimmed, scientific
/// notation outside [1e-4, 1e17). 17 significant digits round-trip any f64,
/// so load-then-resave is byte-identical.
pub fn fmt_g17(x: f64) -> String {
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".to_string() } else { "0".to_string() };
    }
    if !x.is_finite() {
        // JSON cannot carry these; callers must not persist them
        return if x.is_nan() { "nan".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let exp = x.abs().log10().floor() as i32;
    let mut s = if exp < -4 || exp >= 17 {
        let body = format!("{:.16e}", x);
        // normalize Rust's `1.5e5` into `1.5e+05`
        let (mantissa, e) = body.split_once('e').unwrap();
        let e: i32 = e.parse().unwrap();
        let mantissa = mantissa.trim_end_matches('0').trim_end_matches('.');
        return format!("{}e{}{:02}", mantissa, if e < 0 { '-' } else { '+' }, e.abs());
    } else {
        let decimals = (16 - exp).max(0) as usize;
        format!("{:.*}", decimals, x)
    };
    if s.contains('.') {
        s = s.trim_end_matches('0').trim_end_matches('.').to_string();
    }
    s
}

fn write_canonical(value: &Value, out: &mut String) {
    match value {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                out.push_str(&i.to_string());
            } else if let Some(u) = n.as_u64() {
                out.push_str(&u.to_string());
            } else {
                out.push_str(&fmt_g17(n.as_f64().unwrap()));
            }
        }
        Value::String(s) => out.push_str(&serde_json::to_string(s).unwrap()),
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        Value::Object(map) => {
            // serde_json maps are BTreeMap-backed: keys already sorted
            out.push('{');
            for (i, (k, v)) in map.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k).unwrap());
                out.push(':');
                write_canonical(v, out);
            }
            out.push('}');
        }
    }
}

/// Canonical serialization: sorted keys, floats in `%.17g`, no whitespace.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String, IoError> {
    let v = serde_json::to_value(value)?;
    let mut out = String::new();
    write_canonical(&v, &mut out);
    Ok(out)
}

// ---------------------------------------------------------------------------
// readers
// ---------------------------------------------------------------------------

fn parse_error(path: &Path, issues: Vec<String>) -> IoError {
    IoError::Parse { path: path.display().to_string(), issues }
}

/// CSV `id,lat,lon,elev_m,source`. All bad lines are reported together;
/// duplicate ids are rejected.
pub fn read_stations(path: &Path) -> Result<Vec<StationMeta>, IoError> {
    let text = read_to_string(path)?;
    let mut issues = Vec::new();
    let mut out = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if i == 0 {
            if line != "id,lat,lon,elev_m,source" {
                issues.push(format!("line 1: expected header `id,lat,lon,elev_m,source`"));
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            issues.push(format!("line {lineno}: expected 5 fields, got {}", fields.len()));
            continue;
        }
        let parse_f = |s: &str, what: &str, issues: &mut Vec<String>| -> Option<f64> {
            match s.trim().parse::<f64>() {
                Ok(v) => Some(v),
                Err(_) => {
                    issues.push(format!("line {lineno}: bad {what} `{s}`"));
                    None
                }
            }
        };
        let lat = parse_f(fields[1], "lat", &mut issues);
        let lon = parse_f(fields[2], "lon", &mut issues);
        let elev = parse_f(fields[3], "elev_m", &mut issues);
        let source = match fields[4].trim() {
            "official" => Some(StationSource::Official),
            "tpaws" => Some(StationSource::Tpaws),
            other => {
                issues.push(format!("line {lineno}: bad source `{other}`"));
                None
            }
        };
        let (Some(lat), Some(lon), Some(elev), Some(source)) = (lat, lon, elev, source) else {
            continue;
        };
        let meta = StationMeta {
            id: fields[0].trim().to_string(),
            latitude: lat,
            longitude: lon,
            elevation_m: elev,
            source,
        };
        if let Err(e) = meta.validate() {
            issues.push(format!("line {lineno}: {e}"));
            continue;
        }
        if !seen.insert(meta.id.clone()) {
            issues.push(format!("line {lineno}: duplicate station id `{}`", meta.id));
            continue;
        }
        out.push(meta);
    }
    if issues.is_empty() {
        Ok(out)
    } else {
        Err(parse_error(path, issues))
    }
}

/// CSV `station_id,date,value` with a `# unit: <u>` declaration; values are
/// converted to the variable's canonical unit. Duplicate (station, date)
/// pairs are rejected; missing days are simply absent.
pub fn read_daily(
    path: &Path,
    variable: VariableKind,
) -> Result<BTreeMap<String, DailySeries>, IoError> {
    let text = read_to_string(path)?;
    let mut issues = Vec::new();
    let mut out: BTreeMap<String, DailySeries> = BTreeMap::new();
    let mut unit: Option<Unit> = None;
    let mut header_seen = false;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(u) = rest.trim().strip_prefix("unit:") {
                match Unit::parse(u) {
                    Some(u) => unit = Some(u),
                    None => issues.push(format!("line {lineno}: unknown unit `{}`", u.trim())),
                }
            }
            continue;
        }
        if !header_seen {
            header_seen = true;
            if line != "station_id,date,value" {
                issues.push(format!(
                    "line {lineno}: expected header `station_id,date,value`"
                ));
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            issues.push(format!("line {lineno}: expected 3 fields, got {}", fields.len()));
            continue;
        }
        let date = match NaiveDate::parse_from_str(fields[1].trim(), "%Y-%m-%d") {
            Ok(d) => d,
            Err(_) => {
                issues.push(format!("line {lineno}: bad date `{}`", fields[1]));
                continue;
            }
        };
        let raw: f64 = match fields[2].trim().parse() {
            Ok(v) => v,
            Err(_) => {
                issues.push(format!("line {lineno}: bad value `{}`", fields[2]));
                continue;
            }
        };
        let Some(unit) = unit else {
            issues.push(format!("line {lineno}: data before `# unit:` declaration"));
            continue;
        };
        let value = match convert_units(raw, unit, variable.canonical_unit()) {
            Ok(v) => v,
            Err(e) => {
                issues.push(format!("line {lineno}: {e}"));
                continue;
            }
        };
        let station = fields[0].trim().to_string();
        let series = out
            .entry(station.clone())
            .or_insert_with(|| DailySeries::new(station.clone(), variable));
        if series.values.insert(date, value).is_some() {
            issues.push(format!("line {lineno}: duplicate ({station}, {date})"));
        }
    }
    if issues.is_empty() {
        Ok(out)
    } else {
        Err(parse_error(path, issues))
    }
}

/// Self-describing grid text: header lines `product:`, `variable:`,
/// `origin_lat:`, `origin_lon:`, `cell_dlat:`, `cell_dlon:`, `nrows:`,
/// `ncols:`, then one `date: YYYY-MM-DD` line followed by nrows lines of
/// ncols space-separated values each (token `NaN` for missing cells).
pub fn read_grid(path: &Path) -> Result<GridProduct, IoError> {
    let text = read_to_string(path)?;
    let mut issues = Vec::new();
    let mut header: BTreeMap<String, String> = BTreeMap::new();
    let mut dates: Vec<NaiveDate> = Vec::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    let mut current: Option<Vec<f64>> = None;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(d) = line.strip_prefix("date:") {
            if let Some(layer) = current.take() {
                values.push(layer);
            }
            match NaiveDate::parse_from_str(d.trim(), "%Y-%m-%d") {
                Ok(date) => {
                    if dates.last().is_some_and(|&last| date <= last) {
                        issues.push(format!("line {lineno}: dates out of order at {date}"));
                    }
                    dates.push(date);
                    current = Some(Vec::new());
                }
                Err(_) => issues.push(format!("line {lineno}: bad date `{}`", d.trim())),
            }
            continue;
        }
        if let Some((key, val)) = line.split_once(':') {
            if current.is_none() && !key.contains(' ') && key.chars().all(|c| c.is_ascii_alphabetic() || c == '_') {
                header.insert(key.trim().to_string(), val.trim().to_string());
                continue;
            }
        }
        match &mut current {
            Some(layer) => {
                for tok in line.split_whitespace() {
                    if tok == "NaN" {
                        layer.push(f64::NAN);
                    } else {
                        match tok.parse::<f64>() {
                            Ok(v) => layer.push(v),
                            Err(_) => {
                                issues.push(format!("line {lineno}: bad value `{tok}`"))
                            }
                        }
                    }
                }
            }
            None => issues.push(format!("line {lineno}: values before any `date:` line")),
        }
    }
    if let Some(layer) = current.take() {
        values.push(layer);
    }

    fn req(
        header: &BTreeMap<String, String>,
        key: &str,
        issues: &mut Vec<String>,
    ) -> Option<String> {
        match header.get(key) {
            Some(v) => Some(v.clone()),
            None => {
                issues.push(format!("header: missing `{key}:`"));
                None
            }
        }
    }
    fn fnum(
        header: &BTreeMap<String, String>,
        key: &str,
        issues: &mut Vec<String>,
    ) -> Option<f64> {
        let s = req(header, key, issues)?;
        match s.parse() {
            Ok(v) => Some(v),
            Err(_) => {
                issues.push(format!("header: bad number for `{key}`"));
                None
            }
        }
    }
    let product = req(&header, "product", &mut issues).and_then(|s| {
        let p = GridProductKind::parse(&s);
        if p.is_none() {
            issues.push(format!("header: unknown product `{s}`"));
        }
        p
    });
    let variable = req(&header, "variable", &mut issues).and_then(|s| {
        let v = VariableKind::parse(&s);
        if v.is_none() {
            issues.push(format!("header: unknown variable `{s}`"));
        }
        v
    });
    let origin_lat = fnum(&header, "origin_lat", &mut issues);
    let origin_lon = fnum(&header, "origin_lon", &mut issues);
    let cell_dlat = fnum(&header, "cell_dlat", &mut issues);
    let cell_dlon = fnum(&header, "cell_dlon", &mut issues);
    let nrows = fnum(&header, "nrows", &mut issues).map(|v| v as usize);
    let ncols = fnum(&header, "ncols", &mut issues).map(|v| v as usize);

    if let (Some(nr), Some(nc)) = (nrows, ncols) {
        let expected = nr * nc;
        for (li, layer) in values.iter().enumerate() {
            if layer.len() != expected {
                issues.push(format!(
                    "layer {}: expected {} values ({}x{}), got {}",
                    li + 1,
                    expected,
                    nr,
                    nc,
                    layer.len()
                ));
            }
        }
    }
    if values.len() != dates.len() {
        issues.push(format!(
            "found {} dates but {} value layers",
            dates.len(),
            values.len()
        ));
    }
    if !issues.is_empty() {
        return Err(parse_error(path, issues));
    }
    Ok(GridProduct {
        product: product.unwrap(),
        variable: variable.unwrap(),
        origin_lat: origin_lat.unwrap(),
        origin_lon: origin_lon.unwrap(),
        cell_dlat: cell_dlat.unwrap(),
        cell_dlon: cell_dlon.unwrap(),
        nrows: nrows.unwrap(),
        ncols: ncols.unwrap(),
        dates,
        values,
    })
}

/// Round-trip writer for the grid format above; `read_grid` of the output is
/// bit-exact for finite values.
pub fn write_grid(grid: &GridProduct) -> String {
    let mut out = String::new();
    out.push_str(&format!("product: {}\n", grid.product.name()));
    out.push_str(&format!("variable: {}\n", grid.variable.name()));
    out.push_str(&format!("origin_lat: {}\n", fmt_g17(grid.origin_lat)));
    out.push_str(&format!("origin_lon: {}\n", fmt_g17(grid.origin_lon)));
    out.push_str(&format!("cell_dlat: {}\n", fmt_g17(grid.cell_dlat)));
    out.push_str(&format!("cell_dlon: {}\n", fmt_g17(grid.cell_dlon)));
    out.push_str(&format!("nrows: {}\n", grid.nrows));
    out.push_str(&format!("ncols: {}\n", grid.ncols));
    for (date, layer) in grid.dates.iter().zip(&grid.values) {
        out.push_str(&format!("date: {date}\n"));
        for r in 0..grid.nrows {
            let row: Vec<String> = (0..grid.ncols)
                .map(|c| {
                    let v = layer[r * grid.ncols + c];
                    if v.is_nan() { "NaN".to_string() } else { fmt_g17(v) }
                })
                .collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
    }
    out
}

/// CSV `station_id,timestamp,value` with ISO-8601 offset timestamps. Rows are
/// grouped into one `SubdailySeries` per (station, local day); a
/// cross-midnight timestamp belongs to the local day of the timestamp itself.
/// Timestamps must be strictly increasing per station.
pub fn read_subdaily(
    path: &Path,
    variable: VariableKind,
) -> Result<Vec<SubdailySeries>, IoError> {
    let text = read_to_string(path)?;
    let mut issues = Vec::new();
    let mut last_instant: BTreeMap<String, DateTime<FixedOffset>> = BTreeMap::new();
    let mut grouped: BTreeMap<(String, NaiveDate), Vec<(f64, f64)>> = BTreeMap::new();
    let mut header_seen = false;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !header_seen {
            header_seen = true;
            if line != "station_id,timestamp,value" {
                issues.push(format!(
                    "line {lineno}: expected header `station_id,timestamp,value`"
                ));
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            issues.push(format!("line {lineno}: expected 3 fields, got {}", fields.len()));
            continue;
        }
        let ts = match DateTime::parse_from_rfc3339(fields[1].trim()) {
            Ok(t) => t,
            Err(_) => {
                issues.push(format!("line {lineno}: bad timestamp `{}`", fields[1]));
                continue;
            }
        };
        let value: f64 = match fields[2].trim().parse() {
            Ok(v) => v,
            Err(_) => {
                issues.push(format!("line {lineno}: bad value `{}`", fields[2]));
                continue;
            }
        };
        let station = fields[0].trim().to_string();
        if let Some(prev) = last_instant.get(&station) {
            if ts <= *prev {
                issues.push(format!(
                    "line {lineno}: non-monotone timestamp for {station}: {ts} after {prev}"
                ));
                continue;
            }
        }
        last_instant.insert(station.clone(), ts);
        let local = ts.naive_local();
        let hour = local.time().hour() as f64 + local.time().minute() as f64 / 60.0;
        grouped.entry((station, local.date())).or_default().push((hour, value));
    }
    if !issues.is_empty() {
        return Err(parse_error(path, issues));
    }
    Ok(grouped
        .into_iter()
        .map(|((station_id, date), values)| SubdailySeries {
            station_id,
            date,
            variable,
            values,
        })
        .collect())
}

use chrono::Timelike;

// ---------------------------------------------------------------------------
// model store
// ---------------------------------------------------------------------------

/// One persisted record: schema version plus the serialized model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelRecord {
    pub schema_version: u32,
    pub station_id: String,
    pub variable: String,
    pub test: String,
    pub model: Value,
}

/// File-per-record store under a root directory; one record per
/// (station, variable, test). Writes are whole-file atomic (temp + rename)
/// and canonical, so load-then-resave is byte-identical.
#[derive(Debug, Clone)]
pub struct ModelStore {
    root: PathBuf,
}

impl ModelStore {
    pub fn new(root: impl Into<PathBuf>) -> Result<ModelStore, IoError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|source| IoError::File {
            path: root.display().to_string(),
            source,
        })?;
        Ok(ModelStore { root })
    }

    fn record_path(&self, station: &str, variable: VariableKind, test: TestId) -> PathBuf {
        self.root
            .join(format!("{}__{}__{}.json", station, variable.name(), test.name()))
    }

    pub fn save<M: Serialize>(
        &self,
        station: &str,
        variable: VariableKind,
        test: TestId,
        model: &M,
    ) -> Result<(), IoError> {
        let record = ModelRecord {
            schema_version: SCHEMA_VERSION,
            station_id: station.to_string(),
            variable: variable.name().to_string(),
            test: test.name(),
            model: serde_json::to_value(model)?,
        };
        let bytes = to_canonical_json(&record)?;
        let path = self.record_path(station, variable, test);
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, bytes.as_bytes()).map_err(|source| IoError::File {
            path: tmp.display().to_string(),
            source,
        })?;
        fs::rename(&tmp, &path).map_err(|source| IoError::File {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load_record(
        &self,
        station: &str,
        variable: VariableKind,
        test: TestId,
    ) -> Result<ModelRecord, IoError> {
        let path = self.record_path(station, variable, test);
        if !path.exists() {
            return Err(IoError::NotCalibrated {
                station: station.to_string(),
                variable: variable.name().to_string(),
                test: test.name(),
            });
        }
        let text = read_to_string(&path)?;
        let value: Value = serde_json::from_str(&text)?;
        let found = value
            .get("schema_version")
            .and_then(Value::as_u64)
            .unwrap_or(0);
        if found != SCHEMA_VERSION as u64 {
            return Err(IoError::Version { expected: SCHEMA_VERSION, found });
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn load<M: DeserializeOwned>(
        &self,
        station: &str,
        variable: VariableKind,
        test: TestId,
    ) -> Result<M, IoError> {
        let record = self.load_record(station, variable, test)?;
        Ok(serde_json::from_value(record.model)?)
    }

    pub fn raw_bytes(
        &self,
        station: &str,
        variable: VariableKind,
        test: TestId,
    ) -> Result<String, IoError> {
        read_to_string(&self.record_path(station, variable, test))
    }
}

// ---------------------------------------------------------------------------
// run config
// ---------------------------------------------------------------------------

/// Parsed flat `key = value` run configuration. All referenced input paths
/// are checked at load time; unknown keys are rejected.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub stations: PathBuf,
    pub daily: PathBuf,
    pub grids: Vec<PathBuf>,
    pub subdaily: Option<PathBuf>,
    pub model_store: PathBuf,
    pub variable: VariableKind,
    pub radius_km: f64,
    pub cl_threshold: f64,
    pub seed: u64,
    pub enabled_tests: Vec<TestId>,
    /// fixed per-station UTC offset (no DST), e.g. `+08:00`
    pub utc_offsets: BTreeMap<String, String>,
    pub point: PointTestConfig,
}

pub fn parse_test_id(s: &str) -> Option<TestId> {
    match s {
        "domain" => Some(TestId::Domain),
        "spatial" => Some(TestId::Spatial),
        "spatiotemporal" => Some(TestId::SpatioTemporal),
        "trend" => Some(TestId::Trend),
        "subdaily" => Some(TestId::Subdaily),
        _ => s
            .strip_prefix("gridded_")
            .and_then(GridProductKind::parse)
            .map(TestId::Gridded),
    }
}

pub fn load_run_config(path: &Path) -> Result<RunConfig, IoError> {
    let text = read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut kv: BTreeMap<String, String> = BTreeMap::new();
    let mut issues = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) => {
                if kv.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                    issues.push(format!("line {}: duplicate key `{}`", i + 1, k.trim()));
                }
            }
            None => issues.push(format!("line {}: expected `key = value`", i + 1)),
        }
    }
    if !issues.is_empty() {
        return Err(parse_error(path, issues));
    }

    let known = [
        "stations", "daily", "grids", "subdaily", "model_store", "variable", "radius_km",
        "cl_threshold", "seed", "enabled_tests", "min_overlap_days", "cv_folds",
        "cv_grid_points",
    ];
    for key in kv.keys() {
        if !known.contains(&key.as_str()) && !key.starts_with("utc_offset.") {
            return Err(IoError::Config(format!("unknown config key `{key}`")));
        }
    }

    let resolve = |rel: &str| -> PathBuf {
        let p = PathBuf::from(rel);
        if p.is_absolute() { p } else { base.join(p) }
    };
    let get = |key: &str| -> Result<&String, IoError> {
        kv.get(key).ok_or_else(|| IoError::Config(format!("missing config key `{key}`")))
    };
    let must_exist = |p: PathBuf| -> Result<PathBuf, IoError> {
        if p.exists() {
            Ok(p)
        } else {
            Err(IoError::Config(format!("path does not exist: {}", p.display())))
        }
    };

    let stations = must_exist(resolve(get("stations")?))?;
    let daily = must_exist(resolve(get("daily")?))?;
    let grids: Vec<PathBuf> = match kv.get("grids") {
        Some(s) if !s.is_empty() => s
            .split(',')
            .map(|g| must_exist(resolve(g.trim())))
            .collect::<Result<_, _>>()?,
        _ => Vec::new(),
    };
    let subdaily = match kv.get("subdaily") {
        Some(s) if !s.is_empty() => Some(must_exist(resolve(s))?),
        _ => None,
    };
    let model_store = resolve(get("model_store")?);
    let variable = VariableKind::parse(get("variable")?)
        .ok_or_else(|| IoError::Config(format!("unknown variable `{}`", kv["variable"])))?;
    let parse_num = |key: &str, default: f64| -> Result<f64, IoError> {
        match kv.get(key) {
            Some(s) => s
                .parse()
                .map_err(|_| IoError::Config(format!("bad number for `{key}`: `{s}`"))),
            None => Ok(default),
        }
    };
    let radius_km = parse_num("radius_km", crate::tests_point::DEFAULT_RADIUS_KM)?;
    let cl_threshold = parse_num("cl_threshold", 0.05)?;
    let seed = parse_num("seed", 42.0)? as u64;
    let enabled_tests: Vec<TestId> = match kv.get("enabled_tests") {
        Some(s) => s
            .split(',')
            .map(|t| {
                parse_test_id(t.trim())
                    .ok_or_else(|| IoError::Config(format!("unknown test `{}`", t.trim())))
            })
            .collect::<Result<_, _>>()?,
        None => vec![TestId::Spatial, TestId::Trend],
    };
    let mut point = PointTestConfig::default();
    point.min_overlap_days = parse_num("min_overlap_days", point.min_overlap_days as f64)? as usize;
    point.cv_folds = parse_num("cv_folds", point.cv_folds as f64)? as usize;
    point.cv_grid_points = parse_num("cv_grid_points", point.cv_grid_points as f64)? as usize;
    let utc_offsets = kv
        .iter()
        .filter_map(|(k, v)| {
            k.strip_prefix("utc_offset.").map(|s| (s.to_string(), v.clone()))
        })
        .collect();

    Ok(RunConfig {
        stations,
        daily,
        grids,
        subdaily,
        model_store,
        variable,
        radius_km,
        cl_threshold,
        seed,
        enabled_tests,
        utc_offsets,
        point,
    })
}

// ---------------------------------------------------------------------------
// injection spec + labels files
// ---------------------------------------------------------------------------

pub fn load_injection_spec(path: &Path) -> Result<crate::harness::InjectionSpec, IoError> {
    let text = read_to_string(path)?;
    let mut kv: BTreeMap<String, String> = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some((k, v)) = line.split_once('=') {
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let num = |key: &str| -> Result<f64, IoError> {
        kv.get(key)
            .ok_or_else(|| IoError::Config(format!("missing injection key `{key}`")))?
            .parse()
            .map_err(|_| IoError::Config(format!("bad number for `{key}`")))
    };
    let sign = match kv.get("sign").map(String::as_str) {
        Some("positive") | None => Sign::Positive,
        Some("negative") => Sign::Negative,
        Some("both") => Sign::Both,
        Some(other) => return Err(IoError::Config(format!("unknown sign `{other}`"))),
    };
    let spec = crate::harness::InjectionSpec {
        fraction: num("fraction")?,
        magnitude_low: num("magnitude_low")?,
        magnitude_high: num("magnitude_high")?,
        sign,
        seed: num("seed")? as u64,
    };
    spec.validate().map_err(|e| IoError::Config(e.to_string()))?;
    Ok(spec)
}

/// CSV `station_id,date,true_value,contaminated` (contaminated is 0/1).
pub fn read_labels(
    path: &Path,
) -> Result<BTreeMap<(String, NaiveDate), crate::harness::TruthLabel>, IoError> {
    let text = read_to_string(path)?;
    let mut issues = Vec::new();
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || i == 0 {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            issues.push(format!("line {}: expected 4 fields", i + 1));
            continue;
        }
        let date = match NaiveDate::parse_from_str(fields[1].trim(), "%Y-%m-%d") {
            Ok(d) => d,
            Err(_) => {
                issues.push(format!("line {}: bad date `{}`", i + 1, fields[1]));
                continue;
            }
        };
        let (Ok(true_value), Ok(flag)) =
            (fields[2].trim().parse::<f64>(), fields[3].trim().parse::<u8>())
        else {
            issues.push(format!("line {}: bad value/flag", i + 1));
            continue;
        };
        out.insert(
            (fields[0].trim().to_string(), date),
            crate::harness::TruthLabel { true_value, contaminated: flag != 0 },
        );
    }
    if issues.is_empty() {
        Ok(out)
    } else {
        Err(parse_error(path, issues))
    }
}

// ---------------------------------------------------------------------------
// report rendering
// ---------------------------------------------------------------------------

/// Canonical JSON for a batch of assessments, ordered by (station, date) with
/// contributing tests already in ascending-CL traceback order.
pub fn assessments_to_json(assessments: &[Assessment]) -> Result<String, IoError> {
    let mut sorted: Vec<&Assessment> = assessments.iter().collect();
    sorted.sort_by(|a, b| {
        (&a.observation.station_id, a.observation.date)
            .cmp(&(&b.observation.station_id, b.observation.date))
    });
    let items: Vec<Value> = sorted
        .iter()
        .map(|a| {
            let tb = traceback(a);
            Ok(serde_json::json!({
                "station_id": a.observation.station_id,
                "date": a.observation.date.to_string(),
                "variable": a.observation.variable.name(),
                "value": a.observation.value,
                "final_cl": a.final_cl,
                "domain_pass": a.domain_verdict.passed(),
                "traceback": serde_json::to_value(&tb)?,
            }))
        })
        .collect::<Result<_, serde_json::Error>>()?;
    to_canonical_json(&serde_json::json!({ "assessments": items }))
}

/// Human-readable traceback, lowest-CL contributing tests first.
pub fn assessment_to_text(assessment: &Assessment) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{} {} {} = {}\n",
        assessment.observation.station_id,
        assessment.observation.date,
        assessment.observation.variable.name(),
        fmt_g17(assessment.observation.value),
    ));
    match assessment.final_cl {
        Some(cl) => out.push_str(&format!("final CL: {}\n", fmt_g17(cl))),
        None => out.push_str("final CL: NA\n"),
    }
    if !assessment.domain_verdict.passed() {
        out.push_str("domain test: FAIL\n");
    }
    let tb = traceback(assessment);
    for entry in &tb.contributing {
        out.push_str(&format!(
            "  {:<14} cl={} weight={}\n",
            entry.test_id.name(),
            fmt_g17(entry.cl),
            fmt_g17(entry.weight),
        ));
    }
    for ex in &tb.excluded {
        out.push_str(&format!("  {:<14} excluded: {}\n", ex.test_id.name(), ex.reason));
    }
    out
}
