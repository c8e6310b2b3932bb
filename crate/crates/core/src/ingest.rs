//! Trip-record and turnstile ingestion.
//!
//! Trip CSVs are parsed leniently (bad rows go to a rejection log), filtered
//! to weekday evening peaks, and binned into a [`DemandTensor`] over an
//! equirectangular cell grid and fixed time slices. Turnstile CSVs carry
//! cumulative counters; consecutive differences per turnstile are summed
//! per cell into [`TurnstileCounts`].

use std::collections::{BTreeMap, HashMap};
use std::io::Read;

use chrono::{Datelike, NaiveDate, NaiveDateTime, NaiveTime, Weekday};
use serde::{Deserialize, Serialize};

use crate::env::{
    DriverClass, FleetGroup, OrderRate, OrderSource, ScenarioConfig, TravelTimeConfig,
    DEFAULT_BOUNDARY_PENALTY,
};
use crate::error::{Error, Result};

const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Counter differences outside this range are treated as counter resets.
pub const MAX_TURNSTILE_DIFF: i64 = 100_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripRecord {
    pub pickup_time: NaiveDateTime,
    pub dropoff_time: NaiveDateTime,
    pub pickup_lon: f64,
    pub pickup_lat: f64,
    pub dropoff_lon: f64,
    pub dropoff_lat: f64,
    pub fare: f64,
}

/// Column names of the trip CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripColumns {
    pub pickup_time: String,
    pub dropoff_time: String,
    pub pickup_lon: String,
    pub pickup_lat: String,
    pub dropoff_lon: String,
    pub dropoff_lat: String,
    pub fare: String,
}

impl Default for TripColumns {
    fn default() -> Self {
        TripColumns {
            pickup_time: "pickup_datetime".into(),
            dropoff_time: "dropoff_datetime".into(),
            pickup_lon: "pickup_longitude".into(),
            pickup_lat: "pickup_latitude".into(),
            dropoff_lon: "dropoff_longitude".into(),
            dropoff_lat: "dropoff_latitude".into(),
            fare: "fare".into(),
        }
    }
}

/// A skipped input row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    /// 1-based line number in the source, header included.
    pub line: u64,
    pub reason: String,
}

impl std::fmt::Display for Rejection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}", self.line, self.reason)
    }
}

const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

fn column_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::MissingColumn(name.to_string()))
}

fn parse_number(field: &str) -> std::result::Result<f64, String> {
    let cleaned: String = field.trim().chars().filter(|&c| c != ',').collect();
    cleaned
        .parse::<f64>()
        .map_err(|_| format!("not a number: {field:?}"))
}

/// Parse a trip CSV. Malformed rows are logged, not fatal.
pub fn parse_trips<R: Read>(input: R, columns: &TripColumns) -> Result<(Vec<TripRecord>, Vec<Rejection>)> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let headers = reader.headers()?.clone();
    if headers.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let idx = [
        column_index(&headers, &columns.pickup_time)?,
        column_index(&headers, &columns.dropoff_time)?,
        column_index(&headers, &columns.pickup_lon)?,
        column_index(&headers, &columns.pickup_lat)?,
        column_index(&headers, &columns.dropoff_lon)?,
        column_index(&headers, &columns.dropoff_lat)?,
        column_index(&headers, &columns.fare)?,
    ];

    let mut trips = Vec::new();
    let mut rejected = Vec::new();
    for row in reader.records() {
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                rejected.push(Rejection { line, reason: e.to_string() });
                continue;
            }
        };
        let line = row.position().map_or(0, |p| p.line());
        match trip_from_row(&row, &idx) {
            Ok(t) => trips.push(t),
            Err(reason) => rejected.push(Rejection { line, reason }),
        }
    }
    Ok((trips, rejected))
}

fn trip_from_row(row: &csv::StringRecord, idx: &[usize; 7]) -> std::result::Result<TripRecord, String> {
    let field = |i: usize| row.get(idx[i]).ok_or_else(|| format!("missing field {}", idx[i]));
    let time = |i: usize| -> std::result::Result<NaiveDateTime, String> {
        let s = field(i)?;
        NaiveDateTime::parse_from_str(s.trim(), TIMESTAMP_FORMAT).map_err(|e| format!("bad timestamp {s:?}: {e}"))
    };
    let pickup_time = time(0)?;
    let dropoff_time = time(1)?;
    if dropoff_time < pickup_time {
        return Err("dropoff before pickup".into());
    }
    let trip = TripRecord {
        pickup_time,
        dropoff_time,
        pickup_lon: parse_number(field(2)?)?,
        pickup_lat: parse_number(field(3)?)?,
        dropoff_lon: parse_number(field(4)?)?,
        dropoff_lat: parse_number(field(5)?)?,
        fare: parse_number(field(6)?)?,
    };
    if !(trip.fare > 0.0 && trip.fare.is_finite()) {
        return Err(format!("fare must be positive, got {}", trip.fare));
    }
    let coords = [trip.pickup_lon, trip.pickup_lat, trip.dropoff_lon, trip.dropoff_lat];
    if coords.iter().any(|c| !c.is_finite()) {
        return Err("non-finite coordinate".into());
    }
    Ok(trip)
}

/// Daily analysis window cut into equal slices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSpec {
    pub start: NaiveTime,
    pub end: NaiveTime,
    pub slice_minutes: u32,
}

impl TimeSpec {
    /// 4 PM to 8 PM in eighty 3-minute slices.
    pub fn evening_peak() -> Self {
        TimeSpec {
            start: NaiveTime::from_hms_opt(16, 0, 0).expect("valid time"),
            end: NaiveTime::from_hms_opt(20, 0, 0).expect("valid time"),
            slice_minutes: 3,
        }
    }

    pub fn window_minutes(&self) -> i64 {
        (self.end - self.start).num_minutes()
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.window_minutes();
        if self.slice_minutes == 0 || w <= 0 || w % self.slice_minutes as i64 != 0 {
            return Err(Error::InvalidArgument(format!(
                "window of {w} minutes is not a positive multiple of {}-minute slices",
                self.slice_minutes
            )));
        }
        Ok(())
    }

    pub fn num_slices(&self) -> usize {
        (self.window_minutes() / self.slice_minutes as i64) as usize
    }

    pub fn contains(&self, t: NaiveTime) -> bool {
        t >= self.start && t < self.end
    }

    /// Slice index of a pickup inside the window.
    pub fn slice_of(&self, t: NaiveTime) -> Option<usize> {
        self.contains(t)
            .then(|| ((t - self.start).num_seconds() / (60 * self.slice_minutes as i64)) as usize)
    }

    /// Whole slices spanned by a trip, at least one.
    pub fn travel_slices(&self, pickup: NaiveDateTime, dropoff: NaiveDateTime) -> usize {
        let secs = (dropoff - pickup).num_seconds().max(0) as f64;
        let per = 60.0 * self.slice_minutes as f64;
        ((secs / per).ceil() as usize).max(1)
    }
}

/// Keep weekday trips whose pickup falls inside the window.
pub fn filter_weekday_peak(records: Vec<TripRecord>, time: &TimeSpec) -> Vec<TripRecord> {
    records
        .into_iter()
        .filter(|r| {
            !matches!(r.pickup_time.weekday(), Weekday::Sat | Weekday::Sun)
                && time.contains(r.pickup_time.time())
        })
        .collect()
}

/// Square cells laid out from a south-west origin, rows growing northward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin_lon: f64,
    pub origin_lat: f64,
    pub side_m: f64,
    pub width: usize,
    pub height: usize,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.side_m > 0.0) || self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("grid needs a positive side and dimensions".into()));
        }
        Ok(())
    }

    /// Equirectangular projection at the origin latitude.
    pub fn cell_of(&self, lon: f64, lat: f64) -> Option<usize> {
        let rad = std::f64::consts::PI / 180.0;
        let x = (lon - self.origin_lon) * rad * self.origin_lat.to_radians().cos() * EARTH_RADIUS_M;
        let y = (lat - self.origin_lat) * rad * EARTH_RADIUS_M;
        if x < 0.0 || y < 0.0 {
            return None;
        }
        let col = (x / self.side_m).floor() as usize;
        let row = (y / self.side_m).floor() as usize;
        (col < self.width && row < self.height).then_some(row * self.width + col)
    }
}

/// Orders per `(origin, destination, slice)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemandEntry {
    pub origin: usize,
    pub destination: usize,
    pub slice: usize,
    pub count: u64,
    pub mean_fare: f64,
    pub mean_travel_slices: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DemandTensor {
    pub width: usize,
    pub height: usize,
    pub slices: usize,
    /// Observation days the counts were accumulated over.
    pub days: usize,
    pub entries: Vec<DemandEntry>,
    /// Records dropped for falling outside the grid or the window.
    pub dropped: u64,
}

impl DemandTensor {
    pub fn total(&self) -> u64 {
        self.entries.iter().map(|e| e.count).sum()
    }
}

/// Bin records into cells and slices. Records whose pickup or dropoff falls
/// outside the grid, or whose pickup is outside the window, are dropped and
/// counted.
pub fn discretize(records: &[TripRecord], grid: &GridSpec, time: &TimeSpec) -> Result<DemandTensor> {
    grid.validate()?;
    time.validate()?;
    #[derive(Default)]
    struct Acc {
        count: u64,
        fare: f64,
        travel: f64,
    }
    let mut acc: BTreeMap<(usize, usize, usize), Acc> = BTreeMap::new();
    let mut dropped = 0;
    let mut days: Vec<NaiveDate> = Vec::new();
    for r in records {
        let cells = (
            grid.cell_of(r.pickup_lon, r.pickup_lat),
            grid.cell_of(r.dropoff_lon, r.dropoff_lat),
            time.slice_of(r.pickup_time.time()),
        );
        let (Some(o), Some(d), Some(s)) = cells else {
            dropped += 1;
            continue;
        };
        let day = r.pickup_time.date();
        if !days.contains(&day) {
            days.push(day);
        }
        let e = acc.entry((o, d, s)).or_default();
        e.count += 1;
        e.fare += r.fare;
        e.travel += time.travel_slices(r.pickup_time, r.dropoff_time) as f64;
    }
    Ok(DemandTensor {
        width: grid.width,
        height: grid.height,
        slices: time.num_slices(),
        days: days.len().max(1),
        entries: acc
            .into_iter()
            .map(|((origin, destination, slice), a)| DemandEntry {
                origin,
                destination,
                slice,
                count: a.count,
                mean_fare: a.fare / a.count as f64,
                mean_travel_slices: a.travel / a.count as f64,
            })
            .collect(),
        dropped,
    })
}

/// Baseline subway flow of one cell.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridFlow {
    pub grid: usize,
    pub net_entries: u64,
    pub net_exits: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnstileCounts {
    pub grids: Vec<GridFlow>,
}

impl TurnstileCounts {
    pub fn get(&self, grid: usize) -> Option<&GridFlow> {
        self.grids.iter().find(|g| g.grid == grid)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnstileColumns {
    pub id: String,
    pub date: String,
    pub time: String,
    pub entries: String,
    pub exits: String,
    pub grid: String,
}

impl Default for TurnstileColumns {
    fn default() -> Self {
        TurnstileColumns {
            id: "turnstile_id".into(),
            date: "date".into(),
            time: "time".into(),
            entries: "entries".into(),
            exits: "exits".into(),
            grid: "grid".into(),
        }
    }
}

/// Net entries/exits per cell from cumulative turnstile readings.
///
/// Readings are sorted by time per turnstile; each consecutive difference
/// outside `[0, MAX_TURNSTILE_DIFF]` is discarded. Rows that fail to parse
/// are logged.
pub fn parse_turnstile<R: Read>(input: R, columns: &TurnstileColumns) -> Result<(TurnstileCounts, Vec<Rejection>)> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let headers = reader.headers()?.clone();
    let idx = [
        column_index(&headers, &columns.id)?,
        column_index(&headers, &columns.date)?,
        column_index(&headers, &columns.time)?,
        column_index(&headers, &columns.entries)?,
        column_index(&headers, &columns.exits)?,
        column_index(&headers, &columns.grid)?,
    ];

    struct Reading {
        at: NaiveDateTime,
        entries: i64,
        exits: i64,
    }
    let mut per_id: HashMap<String, (usize, Vec<Reading>)> = HashMap::new();
    let mut rejected = Vec::new();
    for row in reader.records() {
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                rejected.push(Rejection { line, reason: e.to_string() });
                continue;
            }
        };
        let line = row.position().map_or(0, |p| p.line());
        let parsed = (|| -> std::result::Result<(String, usize, Reading), String> {
            let get = |i: usize| row.get(idx[i]).map(str::trim).ok_or_else(|| "short row".to_string());
            let date = NaiveDate::parse_from_str(get(1)?, "%m/%d/%Y").map_err(|e| format!("bad date: {e}"))?;
            let time = NaiveTime::parse_from_str(get(2)?, "%H:%M:%S").map_err(|e| format!("bad time: {e}"))?;
            let entries = parse_number(get(3)?)? as i64;
            let exits = parse_number(get(4)?)? as i64;
            let grid = get(5)?.parse::<usize>().map_err(|_| "bad grid index".to_string())?;
            Ok((get(0)?.to_string(), grid, Reading { at: date.and_time(time), entries, exits }))
        })();
        match parsed {
            Ok((id, grid, reading)) => per_id.entry(id).or_insert_with(|| (grid, Vec::new())).1.push(reading),
            Err(reason) => rejected.push(Rejection { line, reason }),
        }
    }

    let mut totals: BTreeMap<usize, (u64, u64)> = BTreeMap::new();
    for (grid, mut readings) in per_id.into_values() {
        readings.sort_by_key(|r| r.at);
        let slot = totals.entry(grid).or_default();
        for pair in readings.windows(2) {
            let de = pair[1].entries - pair[0].entries;
            let dx = pair[1].exits - pair[0].exits;
            if (0..=MAX_TURNSTILE_DIFF).contains(&de) {
                slot.0 += de as u64;
            }
            if (0..=MAX_TURNSTILE_DIFF).contains(&dx) {
                slot.1 += dx as u64;
            }
        }
    }
    let counts = TurnstileCounts {
        grids: totals
            .into_iter()
            .map(|(grid, (net_entries, net_exits))| GridFlow { grid, net_entries, net_exits })
            .collect(),
    };
    Ok((counts, rejected))
}

/// Parameters for turning an ingested demand tensor into a trainable scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CityAssembly {
    pub cbd: Vec<usize>,
    pub restricted: Vec<usize>,
    pub yellow: usize,
    pub green: usize,
    /// Multiplies every per-day order rate; shrinks demand to the desk-scale fleet.
    pub demand_scale: f64,
}

/// Poisson scenario whose per-tick order rates are the daily empirical means
/// times `demand_scale`. Travel times are the rounded mean slices per pair.
pub fn scenario_from_demand(
    tensor: &DemandTensor,
    turnstile: Option<TurnstileCounts>,
    assembly: &CityAssembly,
) -> ScenarioConfig {
    let mut rates = Vec::new();
    let mut travel: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for e in &tensor.entries {
        let mean = e.count as f64 / tensor.days as f64 * assembly.demand_scale;
        if mean > 0.0 {
            rates.push(OrderRate {
                origin: e.origin,
                destination: e.destination,
                appear_time: e.slice + 1,
                mean,
                fare: e.mean_fare,
                passengers: 1,
            });
        }
        let key = (e.origin.min(e.destination), e.origin.max(e.destination));
        travel.entry(key).or_insert_with(|| (e.mean_travel_slices.round() as usize).max(1));
    }
    ScenarioConfig {
        width: tensor.width,
        height: tensor.height,
        horizon: tensor.slices,
        cbd: assembly.cbd.clone(),
        restricted: assembly.restricted.clone(),
        travel_time: TravelTimeConfig::Table {
            entries: travel.into_iter().map(|((a, b), t)| (a, b, t)).collect(),
        },
        orders: OrderSource::Poisson { rates },
        fleet: vec![
            FleetGroup { class: DriverClass::Yellow, count: assembly.yellow, grid: None },
            FleetGroup { class: DriverClass::Green, count: assembly.green, grid: None },
        ],
        boundary_penalty: DEFAULT_BOUNDARY_PENALTY,
        turnstile,
    }
}
