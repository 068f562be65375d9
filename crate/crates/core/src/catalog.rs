//! Earthquake catalogs: event records, energy features, CSV ingestion and
//! export, spatial binning and quality filtering.

use std::collections::HashSet;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Upper bound of the magnitude scale accepted on ingestion.
pub const MAX_MAGNITUDE: f64 = 9.1;
/// Deepest hypocentre accepted on ingestion, in km.
pub const MAX_DEPTH_KM: f64 = 800.0;

/// Observational quality metrics attached to an event. Every field is
/// optional because catalogs report them unevenly.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Quality {
    pub n_stations: Option<u32>,
    /// Minimum station distance, degrees.
    pub min_station_dist: Option<f64>,
    /// RMS travel-time residual, seconds.
    pub rms_residual: Option<f64>,
    /// Azimuthal gap, degrees.
    pub azimuthal_gap: Option<f64>,
    pub err_horizontal: Option<f64>,
    pub err_depth: Option<f64>,
    pub err_magnitude: Option<f64>,
}

impl Quality {
    fn is_empty(&self) -> bool {
        *self == Quality::default()
    }
}

/// One catalog row.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub id: String,
    /// Seconds since the Unix epoch, UTC.
    pub time: f64,
    pub latitude: f64,
    pub longitude: f64,
    /// Hypocentral depth in km.
    pub depth: f64,
    pub magnitude: f64,
    pub magnitude_type: String,
    pub tsunami: bool,
    pub event_type: String,
    pub quality: Option<Quality>,
    /// Radiated energy in Joules, always derived from `magnitude`.
    pub energy: f64,
    pub log10_energy: f64,
}

impl Event {
    /// Builds a validated event with derived energy fields and default
    /// metadata (`Mw`, `earthquake`, no tsunami, no quality group).
    pub fn new(
        id: impl Into<String>,
        time: f64,
        latitude: f64,
        longitude: f64,
        depth: f64,
        magnitude: f64,
    ) -> Result<Self> {
        if !time.is_finite() {
            return Err(Error::InvalidInput(format!("non-finite time {time}")));
        }
        check_coordinates(latitude, longitude)?;
        if !(0.0..=MAX_DEPTH_KM).contains(&depth) {
            return Err(Error::InvalidInput(format!(
                "depth {depth} km outside [0, {MAX_DEPTH_KM}]"
            )));
        }
        if !(0.0..=MAX_MAGNITUDE).contains(&magnitude) {
            return Err(Error::InvalidInput(format!(
                "magnitude {magnitude} outside [0, {MAX_MAGNITUDE}]"
            )));
        }
        let (energy, log10_energy) = compute_energy(magnitude)?;
        Ok(Event {
            id: id.into(),
            time,
            latitude,
            longitude,
            depth,
            magnitude,
            magnitude_type: "Mw".to_string(),
            tsunami: false,
            event_type: "earthquake".to_string(),
            quality: None,
            energy,
            log10_energy,
        })
    }

    pub fn with_tsunami(mut self, tsunami: bool) -> Self {
        self.tsunami = tsunami;
        self
    }

    pub fn with_quality(mut self, quality: Quality) -> Self {
        self.quality = if quality.is_empty() {
            None
        } else {
            Some(quality)
        };
        self
    }
}

/// Energy-magnitude relation `log10(E) = 1.5 M + 4.8`, E in Joules.
pub fn compute_energy(magnitude: f64) -> Result<(f64, f64)> {
    if !magnitude.is_finite() {
        return Err(Error::InvalidInput(format!(
            "non-finite magnitude {magnitude}"
        )));
    }
    let log10_energy = 1.5 * magnitude + 4.8;
    Ok((10f64.powf(log10_energy), log10_energy))
}

fn check_coordinates(latitude: f64, longitude: f64) -> Result<()> {
    if !(-90.0..=90.0).contains(&latitude) {
        return Err(Error::InvalidInput(format!(
            "latitude {latitude} outside [-90, 90]"
        )));
    }
    if !(-180.0..=180.0).contains(&longitude) {
        return Err(Error::InvalidInput(format!(
            "longitude {longitude} outside [-180, 180]"
        )));
    }
    Ok(())
}

/// Global bin of a coordinate on a lattice of `cell_size` degree cells.
/// Row 0 is the southern edge, column 0 the antimeridian; the north pole and
/// `longitude = 180` fall into the last bin.
pub fn grid_index(latitude: f64, longitude: f64, cell_size: f64) -> Result<(usize, usize)> {
    check_coordinates(latitude, longitude)?;
    if ![1.0, 2.0, 4.0].contains(&cell_size) {
        return Err(Error::InvalidInput(format!(
            "cell size {cell_size} not one of 1, 2, 4 degrees"
        )));
    }
    let rows = (180.0 / cell_size) as usize;
    let cols = (360.0 / cell_size) as usize;
    let row = (((latitude + 90.0) / cell_size).floor() as usize).min(rows - 1);
    let col = (((longitude + 180.0) / cell_size).floor() as usize).min(cols - 1);
    Ok((row, col))
}

/// Time-ordered, immutable collection of events.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    events: Vec<Event>,
    magnitude_completeness: f64,
}

impl Catalog {
    /// Sorts `events` by time (stable, so equal timestamps keep their input
    /// order) and wraps them.
    pub fn new(mut events: Vec<Event>) -> Self {
        events.sort_by(|a, b| a.time.total_cmp(&b.time));
        Catalog {
            events,
            magnitude_completeness: 0.0,
        }
    }

    pub fn with_completeness(mut self, magnitude_completeness: f64) -> Self {
        self.magnitude_completeness = magnitude_completeness;
        self
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn magnitude_completeness(&self) -> f64 {
        self.magnitude_completeness
    }

    /// `(t_min, t_max)`, or `None` for an empty catalog.
    pub fn time_span(&self) -> Option<(f64, f64)> {
        Some((self.events.first()?.time, self.events.last()?.time))
    }

    /// Events with `start <= time < end`.
    pub fn window(&self, start: f64, end: f64) -> &[Event] {
        let lo = self.events.partition_point(|e| e.time < start);
        let hi = self.events.partition_point(|e| e.time < end);
        &self.events[lo..hi.max(lo)]
    }

    /// Events with `start < time <= end`.
    pub fn window_after(&self, start: f64, end: f64) -> &[Event] {
        let lo = self.events.partition_point(|e| e.time <= start);
        let hi = self.events.partition_point(|e| e.time <= end);
        &self.events[lo..hi.max(lo)]
    }

    /// Index of `event` in the catalog, matched on time, id and location.
    pub fn position(&self, event: &Event) -> Option<usize> {
        let lo = self.events.partition_point(|e| e.time < event.time);
        self.events[lo..]
            .iter()
            .take_while(|e| e.time == event.time)
            .position(|e| {
                e.id == event.id
                    && e.latitude == event.latitude
                    && e.longitude == event.longitude
                    && e.magnitude == event.magnitude
            })
            .map(|i| lo + i)
    }
}

/// Column names used to read a catalog. Defaults follow the USGS-style
/// names of the global catalog this pipeline targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMapping {
    pub id: String,
    pub time: String,
    pub latitude: String,
    pub longitude: String,
    pub depth: String,
    pub magnitude: String,
    pub magnitude_type: String,
    pub tsunami: String,
    pub event_type: String,
    pub n_stations: String,
    pub min_station_dist: String,
    pub rms_residual: String,
    pub azimuthal_gap: String,
    pub err_horizontal: String,
    pub err_depth: String,
    pub err_magnitude: String,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        ColumnMapping {
            id: "id".into(),
            time: "time".into(),
            latitude: "latitude".into(),
            longitude: "longitude".into(),
            depth: "depth".into(),
            magnitude: "mag".into(),
            magnitude_type: "magType".into(),
            tsunami: "tsunami".into(),
            event_type: "type".into(),
            n_stations: "nst".into(),
            min_station_dist: "dmin".into(),
            rms_residual: "rms".into(),
            azimuthal_gap: "gap".into(),
            err_horizontal: "horizontalError".into(),
            err_depth: "depthError".into(),
            err_magnitude: "magError".into(),
        }
    }
}

/// Bookkeeping from [`parse_catalog`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParseReport {
    pub rows_read: usize,
    pub rows_dropped: usize,
    pub duplicate_ids: usize,
}

/// Reads a comma-separated catalog from `path`.
pub fn parse_catalog(
    path: impl AsRef<Path>,
    mapping: &ColumnMapping,
) -> Result<(Catalog, ParseReport)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_catalog(file, mapping).map_err(|e| match e {
        Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Reads a comma-separated catalog with a header row. Rows whose mandatory
/// fields are missing or out of bounds are dropped and counted; energy
/// columns in the input are ignored and recomputed.
pub fn read_catalog<R: Read>(reader: R, mapping: &ColumnMapping) -> Result<(Catalog, ParseReport)> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse(e.to_string()))?
        .clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let mandatory = |name: &str| {
        find(name).ok_or_else(|| Error::Schema {
            column: name.to_string(),
        })
    };

    let time_col = mandatory(&mapping.time)?;
    let lat_col = mandatory(&mapping.latitude)?;
    let lon_col = mandatory(&mapping.longitude)?;
    let depth_col = mandatory(&mapping.depth)?;
    let mag_col = mandatory(&mapping.magnitude)?;
    let id_col = find(&mapping.id);
    let mag_type_col = find(&mapping.magnitude_type);
    let tsunami_col = find(&mapping.tsunami);
    let type_col = find(&mapping.event_type);
    let quality_cols = [
        find(&mapping.n_stations),
        find(&mapping.min_station_dist),
        find(&mapping.rms_residual),
        find(&mapping.azimuthal_gap),
        find(&mapping.err_horizontal),
        find(&mapping.err_depth),
        find(&mapping.err_magnitude),
    ];

    let mut report = ParseReport::default();
    let mut events = Vec::new();
    let mut seen = HashSet::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::Parse(e.to_string()))?;
        report.rows_read += 1;
        let field = |col: Option<usize>| col.and_then(|c| record.get(c)).filter(|s| !s.is_empty());
        let number = |col: usize| field(Some(col)).and_then(|s| s.parse::<f64>().ok());

        let parsed = (|| {
            let time = parse_time(field(Some(time_col))?)?;
            let id = field(id_col).map_or_else(|| format!("row{}", row + 1), str::to_string);
            Event::new(
                id,
                time,
                number(lat_col)?,
                number(lon_col)?,
                number(depth_col)?,
                number(mag_col)?,
            )
            .ok()
        })();
        let Some(mut event) = parsed else {
            report.rows_dropped += 1;
            continue;
        };

        if let Some(s) = field(mag_type_col) {
            event.magnitude_type = s.to_string();
        }
        if let Some(s) = field(type_col) {
            event.event_type = s.to_string();
        }
        event.tsunami = field(tsunami_col).is_some_and(|s| {
            matches!(s.to_ascii_lowercase().as_str(), "1" | "true" | "yes")
                || s.parse::<f64>().is_ok_and(|v| v != 0.0)
        });
        let q = |i: usize| quality_cols[i].and_then(number);
        event = event.with_quality(Quality {
            n_stations: q(0).filter(|v| *v >= 0.0).map(|v| v.round() as u32),
            min_station_dist: q(1),
            rms_residual: q(2),
            azimuthal_gap: q(3),
            err_horizontal: q(4),
            err_depth: q(5),
            err_magnitude: q(6),
        });

        if !seen.insert(event.id.clone()) {
            report.duplicate_ids += 1;
        }
        events.push(event);
    }
    if report.duplicate_ids > 0 {
        log::warn!(
            "catalog contains {} duplicate event ids",
            report.duplicate_ids
        );
    }
    if report.rows_dropped > 0 {
        log::info!("dropped {} invalid rows", report.rows_dropped);
    }
    Ok((Catalog::new(events), report))
}

/// Parses an ISO 8601 timestamp (fractional seconds allowed, UTC assumed
/// when no zone is given) or a plain number of epoch seconds.
pub fn parse_time(text: &str) -> Option<f64> {
    let text = text.trim();
    if let Ok(secs) = text.parse::<f64>() {
        return secs.is_finite().then_some(secs);
    }
    let to_secs =
        |dt: DateTime<Utc>| dt.timestamp() as f64 + f64::from(dt.timestamp_subsec_nanos()) * 1e-9;
    if let Ok(dt) = DateTime::parse_from_rfc3339(text) {
        return Some(to_secs(dt.with_timezone(&Utc)));
    }
    let naive = text.trim_end_matches('Z');
    for fmt in [
        "%Y-%m-%dT%H:%M:%S%.f",
        "%Y-%m-%d %H:%M:%S%.f",
        "%Y-%m-%dT%H:%M",
    ] {
        if let Ok(ndt) = NaiveDateTime::parse_from_str(naive, fmt) {
            return Some(to_secs(Utc.from_utc_datetime(&ndt)));
        }
    }
    None
}

/// ISO 8601 UTC with microsecond precision. Stable under
/// `format_time(parse_time(format_time(t)))`.
pub fn format_time(time: f64) -> String {
    let micros = (time * 1e6).round() as i64;
    let secs = micros.div_euclid(1_000_000);
    let sub = micros.rem_euclid(1_000_000);
    match DateTime::from_timestamp(secs, (sub * 1000) as u32) {
        Some(dt) => dt.format("%Y-%m-%dT%H:%M:%S%.6fZ").to_string(),
        None => format!("{time}"),
    }
}

/// Formats a float with six significant digits.
pub fn format_sig6(value: f64) -> String {
    if value == 0.0 || !value.is_finite() {
        return format!("{}", if value == 0.0 { 0.0 } else { value });
    }
    let rounded: f64 = format!("{value:.5e}").parse().unwrap_or(value);
    let magnitude = rounded.abs();
    if !(1e-4..1e7).contains(&magnitude) {
        format!("{rounded:e}")
    } else {
        format!("{rounded}")
    }
}

const OUTPUT_HEADER: [&str; 18] = [
    "id",
    "time",
    "latitude",
    "longitude",
    "depth",
    "mag",
    "magType",
    "tsunami",
    "type",
    "nst",
    "dmin",
    "rms",
    "gap",
    "horizontalError",
    "depthError",
    "magError",
    "energy",
    "log_energy",
];

/// Writes the catalog with a fixed column order and six-significant-digit
/// floats; the output reads back with the default [`ColumnMapping`].
pub fn write_catalog<W: Write>(catalog: &Catalog, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let to_err = |e: csv::Error| Error::Parse(e.to_string());
    wtr.write_record(OUTPUT_HEADER).map_err(to_err)?;
    let opt = |v: Option<f64>| v.map(format_sig6).unwrap_or_default();
    for e in catalog.events() {
        let q = e.quality.clone().unwrap_or_default();
        wtr.write_record([
            e.id.clone(),
            format_time(e.time),
            format_sig6(e.latitude),
            format_sig6(e.longitude),
            format_sig6(e.depth),
            format_sig6(e.magnitude),
            e.magnitude_type.clone(),
            if e.tsunami { "1" } else { "0" }.to_string(),
            e.event_type.clone(),
            q.n_stations.map(|n| n.to_string()).unwrap_or_default(),
            opt(q.min_station_dist),
            opt(q.rms_residual),
            opt(q.azimuthal_gap),
            opt(q.err_horizontal),
            opt(q.err_depth),
            opt(q.err_magnitude),
            format_sig6(e.energy),
            format_sig6(e.log10_energy),
        ])
        .map_err(to_err)?;
    }
    wtr.flush().map_err(|e| Error::Parse(e.to_string()))?;
    Ok(())
}

pub fn write_catalog_file(catalog: &Catalog, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_catalog(catalog, std::io::BufWriter::new(file))
}

/// Thresholds for [`filter_quality`]. Unset fields are not checked.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QualityCriteria {
    pub min_stations: Option<u32>,
    pub max_min_station_dist: Option<f64>,
    pub max_rms_residual: Option<f64>,
    pub max_azimuthal_gap: Option<f64>,
    pub max_err_horizontal: Option<f64>,
    pub max_err_depth: Option<f64>,
    pub max_err_magnitude: Option<f64>,
}

impl QualityCriteria {
    pub fn is_empty(&self) -> bool {
        *self == QualityCriteria::default()
    }

    /// Events without a quality group, and metrics an event does not
    /// report, pass.
    pub fn accepts(&self, event: &Event) -> bool {
        let Some(q) = &event.quality else {
            return true;
        };
        let at_most = |limit: Option<f64>, value: Option<f64>| match (limit, value) {
            (Some(limit), Some(value)) => value <= limit,
            _ => true,
        };
        let stations_ok = match (self.min_stations, q.n_stations) {
            (Some(min), Some(n)) => n >= min,
            _ => true,
        };
        stations_ok
            && at_most(self.max_min_station_dist, q.min_station_dist)
            && at_most(self.max_rms_residual, q.rms_residual)
            && at_most(self.max_azimuthal_gap, q.azimuthal_gap)
            && at_most(self.max_err_horizontal, q.err_horizontal)
            && at_most(self.max_err_depth, q.err_depth)
            && at_most(self.max_err_magnitude, q.err_magnitude)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FilterReport {
    pub passed: usize,
    pub failed: usize,
    /// Events that passed only because they carry no quality group.
    pub missing_quality: usize,
}

/// Keeps the events accepted by `criteria`, preserving order.
pub fn filter_quality(catalog: &Catalog, criteria: &QualityCriteria) -> (Catalog, FilterReport) {
    let mut report = FilterReport::default();
    if criteria.is_empty() {
        report.passed = catalog.len();
        return (catalog.clone(), report);
    }
    let mut kept = Vec::with_capacity(catalog.len());
    for event in catalog.events() {
        if event.quality.is_none() {
            report.missing_quality += 1;
        }
        if criteria.accepts(event) {
            report.passed += 1;
            kept.push(event.clone());
        } else {
            report.failed += 1;
        }
    }
    if report.missing_quality > 0 && report.missing_quality == catalog.len() {
        log::warn!("no event carries quality metrics; quality filter passed everything");
    }
    let filtered = Catalog {
        events: kept,
        magnitude_completeness: catalog.magnitude_completeness,
    };
    (filtered, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const CSV3: &str = "\
id,time,latitude,longitude,depth,mag,magType,tsunami,type,gap
b,2020-01-02T00:00:00Z,10,20,5,5.5,mw,0,earthquake,90
a,2020-01-01T00:00:00.5Z,-10,-20,50,4.0,ml,1,earthquake,270
c,2020-01-03T12:00:00,0,0,700,6.1,mw,0,earthquake,
";

    #[test]
    fn energy_matches_formula() {
        let (e, l) = compute_energy(5.0).unwrap();
        assert!((l - 12.3).abs() < 1e-12);
        assert!((e / 10f64.powf(12.3) - 1.0).abs() < 1e-12);
        assert!((compute_energy(0.0).unwrap().1 - 4.8).abs() < 1e-12);
        assert!((compute_energy(9.1).unwrap().1 - 18.45).abs() < 1e-12);
        assert!(compute_energy(f64::NAN).is_err());
        assert!(compute_energy(f64::INFINITY).is_err());
    }

    #[test]
    fn grid_index_corners() {
        assert_eq!(grid_index(-90.0, -180.0, 1.0).unwrap(), (0, 0));
        assert_eq!(grid_index(0.0, 0.0, 1.0).unwrap(), (90, 180));
        assert_eq!(grid_index(90.0, 180.0, 1.0).unwrap(), (179, 359));
        assert_eq!(grid_index(90.0, 180.0, 4.0).unwrap(), (44, 89));
        assert!(grid_index(91.0, 0.0, 1.0).is_err());
        assert!(grid_index(0.0, 0.0, 3.0).is_err());
    }

    #[test]
    fn grid_index_is_surjective_on_dense_sweep() {
        for cell in [1.0, 2.0, 4.0] {
            let (rows, cols) = ((180.0 / cell) as usize, (360.0 / cell) as usize);
            let mut hit = vec![false; rows * cols];
            let step = cell / 2.0;
            let mut lat = -90.0;
            while lat <= 90.0 {
                let mut lon = -180.0;
                while lon <= 180.0 {
                    let (r, c) = grid_index(lat, lon, cell).unwrap();
                    hit[r * cols + c] = true;
                    lon += step;
                }
                lat += step;
            }
            assert!(hit.iter().all(|h| *h), "cell {cell}");
        }
    }

    #[test]
    fn parses_and_sorts() {
        let (cat, report) = read_catalog(CSV3.as_bytes(), &ColumnMapping::default()).unwrap();
        assert_eq!(cat.len(), 3);
        assert_eq!(report.rows_dropped, 0);
        let ids: Vec<_> = cat.events().iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert!(cat.events()[0].tsunami);
        assert_eq!(cat.events()[0].time, 1_577_836_800.5);
        // no zone designator: UTC assumed
        assert_eq!(cat.events()[2].time, 1_577_836_800.0 + 2.5 * 86_400.0);
        assert_eq!(
            cat.events()[0].quality.as_ref().unwrap().azimuthal_gap,
            Some(270.0)
        );
        assert!(cat.events()[2].quality.is_none());
    }

    #[test]
    fn drops_out_of_bounds_rows() {
        let text = "time,latitude,longitude,depth,mag\n\
                    2020-01-01T00:00:00Z,95,0,10,5\n\
                    2020-01-01T00:00:00Z,45,0,10,5\n\
                    garbage,45,0,10,5\n";
        let (cat, report) = read_catalog(text.as_bytes(), &ColumnMapping::default()).unwrap();
        assert_eq!(cat.len(), 1);
        assert_eq!(report.rows_dropped, 2);
        assert_eq!(cat.events()[0].id, "row2");
    }

    #[test]
    fn energy_columns_are_recomputed() {
        let text = "time,latitude,longitude,depth,mag,energy,log_energy\n\
                    0,0,0,10,5,1,1\n";
        let (cat, _) = read_catalog(text.as_bytes(), &ColumnMapping::default()).unwrap();
        assert!((cat.events()[0].log10_energy - 12.3).abs() < 1e-12);
    }

    #[test]
    fn missing_column_names_it() {
        let text = "time,latitude,longitude,depth\n0,0,0,0\n";
        match read_catalog(text.as_bytes(), &ColumnMapping::default()) {
            Err(Error::Schema { column }) => assert_eq!(column, "mag"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unreadable_file_is_io_error() {
        let err = parse_catalog("/nonexistent/catalog.csv", &ColumnMapping::default()).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn duplicate_ids_are_kept() {
        let text = "id,time,latitude,longitude,depth,mag\nx,0,0,0,1,3\nx,1,0,0,1,3\n";
        let (cat, report) = read_catalog(text.as_bytes(), &ColumnMapping::default()).unwrap();
        assert_eq!(cat.len(), 2);
        assert_eq!(report.duplicate_ids, 1);
    }

    #[test]
    fn quality_filter_cases() {
        let (cat, _) = read_catalog(CSV3.as_bytes(), &ColumnMapping::default()).unwrap();
        let criteria = QualityCriteria {
            max_azimuthal_gap: Some(180.0),
            ..Default::default()
        };
        let (kept, report) = filter_quality(&cat, &criteria);
        // gap 90 passes, gap 270 fails, missing quality group passes
        assert_eq!(kept.len(), 2);
        assert_eq!(report.failed, 1);
        assert_eq!(report.missing_quality, 1);

        let (same, report) = filter_quality(&cat, &QualityCriteria::default());
        assert_eq!(same.events(), cat.events());
        assert_eq!(report.passed, 3);

        let bare = Catalog::new(
            (0..4)
                .map(|i| Event::new(format!("e{i}"), i as f64, 0.0, 0.0, 1.0, 3.0).unwrap())
                .collect(),
        );
        let (kept, report) = filter_quality(&bare, &criteria);
        assert_eq!(kept.len(), 4);
        assert_eq!(report.missing_quality, 4);
    }

    #[test]
    fn windows_are_half_open() {
        let cat = Catalog::new(
            (0..5)
                .map(|i| Event::new(format!("e{i}"), i as f64, 0.0, 0.0, 1.0, 3.0).unwrap())
                .collect(),
        );
        assert_eq!(cat.window(1.0, 3.0).len(), 2);
        assert_eq!(cat.window_after(1.0, 3.0).len(), 2);
        assert_eq!(cat.window_after(1.0, 3.0)[0].time, 2.0);
        assert_eq!(cat.window(3.0, 1.0).len(), 0);
        assert_eq!(cat.position(&cat.events()[3]), Some(3));
    }

    #[test]
    fn time_formatting_round_trips() {
        for t in [0.0, 1.5, 1_700_000_000.123_456, -86_400.25] {
            let s = format_time(t);
            let back = parse_time(&s).unwrap();
            assert!((back - t).abs() < 1e-6, "{t} -> {s} -> {back}");
            assert_eq!(format_time(back), s);
        }
    }

    fn arb_event() -> impl Strategy<Value = Event> {
        (
            0.0..2.0e9f64,
            -90.0..=90.0f64,
            -180.0..=180.0f64,
            0.0..=700.0f64,
            0.0..=9.1f64,
            any::<bool>(),
            proptest::option::of(0.0..360.0f64),
        )
            .prop_map(|(t, lat, lon, d, m, ts, gap)| {
                Event::new("ev", t, lat, lon, d, m)
                    .unwrap()
                    .with_tsunami(ts)
                    .with_quality(Quality {
                        azimuthal_gap: gap,
                        ..Default::default()
                    })
            })
    }

    proptest! {
        #[test]
        fn energy_log_round_trip(m in -2.0..10.0f64) {
            let (e, l) = compute_energy(m).unwrap();
            let expected = 1.5 * m + 4.8;
            prop_assert!((e.log10() - expected).abs() <= 1e-12 * expected.abs().max(1.0));
            prop_assert!((l - expected).abs() <= 1e-12 * expected.abs().max(1.0));
        }

        #[test]
        fn parse_serialize_parse_is_fixed_point(events in proptest::collection::vec(arb_event(), 0..20)) {
            let mut raw = Vec::new();
            write_catalog(&Catalog::new(events.clone()), &mut raw).unwrap();
            let (first, report) = read_catalog(raw.as_slice(), &ColumnMapping::default()).unwrap();
            prop_assert_eq!(report.rows_dropped, 0);
            prop_assert_eq!(first.len(), events.len());
            let mut text = Vec::new();
            write_catalog(&first, &mut text).unwrap();
            let (second, _) = read_catalog(text.as_slice(), &ColumnMapping::default()).unwrap();
            let mut again = Vec::new();
            write_catalog(&second, &mut again).unwrap();
            prop_assert_eq!(String::from_utf8(text).unwrap(), String::from_utf8(again).unwrap());
            for (a, b) in first.events().iter().zip(second.events()) {
                prop_assert_eq!(a.time, b.time);
                prop_assert_eq!(a.magnitude, b.magnitude);
                prop_assert_eq!(a.energy, b.energy);
            }
        }
    }
}
