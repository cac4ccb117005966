//! Shared domain types, unit handling, physical limits, and the domain test
//! that gates all further testing.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Measurement units understood by the engine. Each weather variable has
/// exactly one canonical unit; everything internal runs in canonical units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Unit {
    Celsius,
    Millimetres,
    KmPerHour,
    MetresPerSecond,
    Percent,
}

impl Unit {
    pub fn symbol(self) -> &'static str {
        match self {
            Unit::Celsius => "degC",
            Unit::Millimetres => "mm",
            Unit::KmPerHour => "km/h",
            Unit::MetresPerSecond => "m/s",
            Unit::Percent => "%",
        }
    }

    pub fn parse(s: &str) -> Option<Unit> {
        match s.trim() {
            "degC" | "C" | "celsius" => Some(Unit::Celsius),
            "mm" => Some(Unit::Millimetres),
            "km/h" | "kmh" => Some(Unit::KmPerHour),
            "m/s" | "ms" => Some(Unit::MetresPerSecond),
            "%" | "percent" => Some(Unit::Percent),
            _ => None,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum UnitError {
    #[error("incompatible units: {from} -> {to}")]
    IncompatibleUnits { from: &'static str, to: &'static str },
}

/// Exact affine unit conversion. Only speed units are interconvertible;
/// everything else converts only to itself.
pub fn convert_units(value: f64, from: Unit, to: Unit) -> Result<f64, UnitError> {
    if from == to {
        return Ok(value);
    }
    match (from, to) {
        (Unit::MetresPerSecond, Unit::KmPerHour) => Ok(value * 3.6),
        (Unit::KmPerHour, Unit::MetresPerSecond) => Ok(value / 3.6),
        _ => Err(UnitError::IncompatibleUnits {
            from: from.symbol(),
            to: to.symbol(),
        }),
    }
}

/// The weather variables the engine assesses.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum VariableKind {
    Tmax,
    Tmin,
    Rain,
    WindGust,
    Humidity9am,
    Humidity3pm,
}

impl VariableKind {
    pub fn canonical_unit(self) -> Unit {
        match self {
            VariableKind::Tmax | VariableKind::Tmin => Unit::Celsius,
            VariableKind::Rain => Unit::Millimetres,
            VariableKind::WindGust => Unit::KmPerHour,
            VariableKind::Humidity9am | VariableKind::Humidity3pm => Unit::Percent,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            VariableKind::Tmax => "tmax",
            VariableKind::Tmin => "tmin",
            VariableKind::Rain => "rain",
            VariableKind::WindGust => "wind_gust",
            VariableKind::Humidity9am => "humidity_9am",
            VariableKind::Humidity3pm => "humidity_3pm",
        }
    }

    pub fn parse(s: &str) -> Option<VariableKind> {
        match s {
            "tmax" => Some(VariableKind::Tmax),
            "tmin" => Some(VariableKind::Tmin),
            "rain" => Some(VariableKind::Rain),
            "wind_gust" => Some(VariableKind::WindGust),
            "humidity_9am" => Some(VariableKind::Humidity9am),
            "humidity_3pm" => Some(VariableKind::Humidity3pm),
            _ => None,
        }
    }

    pub fn all() -> [VariableKind; 6] {
        [
            VariableKind::Tmax,
            VariableKind::Tmin,
            VariableKind::Rain,
            VariableKind::WindGust,
            VariableKind::Humidity9am,
            VariableKind::Humidity3pm,
        ]
    }
}

/// Gridded official data products and the variables each may assess.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum GridProductKind {
    Nwp,
    Agcd,
    Era,
    Radar,
}

impl GridProductKind {
    /// Source-to-variable routing: which product may assess which variable.
    pub fn supports(self, variable: VariableKind) -> bool {
        use VariableKind::*;
        match self {
            GridProductKind::Nwp => {
                matches!(variable, Tmax | Tmin | WindGust | Humidity9am | Humidity3pm)
            }
            GridProductKind::Agcd => {
                matches!(variable, Tmax | Tmin | Rain | Humidity9am | Humidity3pm)
            }
            GridProductKind::Era => matches!(variable, WindGust),
            GridProductKind::Radar => matches!(variable, Rain),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GridProductKind::Nwp => "nwp",
            GridProductKind::Agcd => "agcd",
            GridProductKind::Era => "era",
            GridProductKind::Radar => "radar",
        }
    }

    pub fn parse(s: &str) -> Option<GridProductKind> {
        match s {
            "nwp" => Some(GridProductKind::Nwp),
            "agcd" => Some(GridProductKind::Agcd),
            "era" => Some(GridProductKind::Era),
            "radar" => Some(GridProductKind::Radar),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StationSource {
    Official,
    Tpaws,
}

/// Station metadata. `id` must be unique within a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationMeta {
    pub id: String,
    pub latitude: f64,
    pub longitude: f64,
    pub elevation_m: f64,
    pub source: StationSource,
}

impl StationMeta {
    pub fn validate(&self) -> Result<(), String> {
        if !(-90.0..=90.0).contains(&self.latitude) {
            return Err(format!("latitude {} out of [-90, 90]", self.latitude));
        }
        if !(-180.0..=180.0).contains(&self.longitude) {
            return Err(format!("longitude {} out of [-180, 180]", self.longitude));
        }
        if !self.elevation_m.is_finite() {
            return Err("elevation not finite".to_string());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QualityHint {
    Raw,
    OfficialQCed,
}

/// One timestamped daily measurement in canonical units. Missing values are
/// represented by absence, never by a sentinel number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub station_id: String,
    pub date: NaiveDate,
    pub variable: VariableKind,
    pub value: f64,
    pub quality_hint: Option<QualityHint>,
}

/// A per-station daily series of one variable. Days with no observation are
/// simply absent from the map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailySeries {
    pub station_id: String,
    pub variable: VariableKind,
    pub values: BTreeMap<NaiveDate, f64>,
}

impl DailySeries {
    pub fn new(station_id: impl Into<String>, variable: VariableKind) -> Self {
        DailySeries {
            station_id: station_id.into(),
            variable,
            values: BTreeMap::new(),
        }
    }

    pub fn get(&self, date: NaiveDate) -> Option<f64> {
        self.values.get(&date).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Day-to-day differences: value(d) - value(d-1), defined only where both
    /// days are present.
    pub fn differenced(&self) -> DailySeries {
        let mut out = DailySeries::new(self.station_id.clone(), self.variable);
        for (&date, &v) in &self.values {
            if let Some(prev) = date.pred_opt().and_then(|p| self.get(p)) {
                out.values.insert(date, v - prev);
            }
        }
        out
    }
}

/// Sub-daily readings for one station and one local calendar day.
/// `values` holds (hour offset within the day in hours, value) pairs with
/// strictly increasing timestamps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubdailySeries {
    pub station_id: String,
    pub date: NaiveDate,
    pub variable: VariableKind,
    pub values: Vec<(f64, f64)>,
}

impl SubdailySeries {
    pub fn validate(&self) -> Result<(), String> {
        for w in self.values.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err("timestamps not strictly increasing".to_string());
            }
        }
        if let Some((first, _)) = self.values.first() {
            if *first < 0.0 {
                return Err("timestamp before start of day".to_string());
            }
        }
        if let Some((last, _)) = self.values.last() {
            if *last >= 24.0 {
                return Err("timestamp past end of day".to_string());
            }
        }
        Ok(())
    }
}

/// A gridded official data product: a regular lat/lon lattice of daily
/// values. `origin_lat`/`origin_lon` locate the center of cell (0, 0); cell
/// (r, c) is centered at origin + (r * cell_dlat, c * cell_dlon). Values are
/// stored row-major per date; missing cells are NaN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridProduct {
    pub product: GridProductKind,
    pub variable: VariableKind,
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub cell_dlat: f64,
    pub cell_dlon: f64,
    pub nrows: usize,
    pub ncols: usize,
    pub dates: Vec<NaiveDate>,
    /// one row-major layer of nrows * ncols values per date
    pub values: Vec<Vec<f64>>,
}

impl GridProduct {
    pub fn layer(&self, date: NaiveDate) -> Option<&[f64]> {
        let idx = self.dates.binary_search(&date).ok()?;
        Some(&self.values[idx])
    }
}

/// Physical limits for one variable on one day, in canonical units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalLimits {
    pub lower: f64,
    pub upper: f64,
}

/// Same-day context needed by the coupled temperature limits.
#[derive(Debug, Clone, Copy, Default)]
pub struct DailyContext {
    pub same_day_tmin: Option<f64>,
    pub same_day_tmax: Option<f64>,
    pub elevation_m: f64,
}

/// Static Tmin lower bound: -30 degC, or -40 degC above 1000 m.
fn tmin_static_lower(elevation_m: f64) -> f64 {
    if elevation_m > 1000.0 {
        -40.0
    } else {
        -30.0
    }
}

/// Physical limits per variable. Temperatures couple to the other
/// temperature observed on the same day; when that value is missing the
/// bound degrades to the static bound of the other temperature row.
pub fn variable_limits(variable: VariableKind, ctx: &DailyContext) -> PhysicalLimits {
    match variable {
        VariableKind::Tmax => PhysicalLimits {
            lower: ctx
                .same_day_tmin
                .unwrap_or_else(|| tmin_static_lower(ctx.elevation_m)),
            upper: 60.0,
        },
        VariableKind::Tmin => PhysicalLimits {
            lower: tmin_static_lower(ctx.elevation_m),
            upper: ctx.same_day_tmax.map_or(60.0, |t| t.min(60.0)),
        },
        VariableKind::Rain => PhysicalLimits {
            lower: 0.0,
            upper: 2000.0,
        },
        VariableKind::WindGust => PhysicalLimits {
            lower: 3.6,
            upper: 540.0,
        },
        VariableKind::Humidity9am | VariableKind::Humidity3pm => PhysicalLimits {
            lower: 0.0,
            upper: 100.0,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BoundKind {
    Lower,
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DomainVerdict {
    Pass,
    Fail { bound: BoundKind, limit: f64 },
}

impl DomainVerdict {
    pub fn passed(&self) -> bool {
        matches!(self, DomainVerdict::Pass)
    }
}

/// Range check against the physical limits. Boundary values are inclusive.
/// A failure short-circuits all downstream tests and forces the final
/// confidence level to zero.
pub fn domain_test(obs: &Observation, ctx: &DailyContext) -> DomainVerdict {
    let limits = variable_limits(obs.variable, ctx);
    if obs.value < limits.lower {
        DomainVerdict::Fail {
            bound: BoundKind::Lower,
            limit: limits.lower,
        }
    } else if obs.value > limits.upper {
        DomainVerdict::Fail {
            bound: BoundKind::Upper,
            limit: limits.upper,
        }
    } else {
        DomainVerdict::Pass
    }
}
