//! Crash record ingestion.
//!
//! Records arrive as a pre-joined CSV, one row per crash, carrying the
//! crash-level maximum KABCO injury and a set of 0/1 indicator covariates.
//! Missing indicator cells are read as 0 and counted per column.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Indicator covariates in the order they are written to CSV.
pub const COVARIATES: [&str; 29] = [
    "rear_end",
    "angle",
    "head_on",
    "sideswipe",
    "hit_fixed_object",
    "hit_pedestrian",
    "hit_bicycle",
    "state_road",
    "local_road",
    "curve_road",
    "speed_limit_ge50",
    "unsignalized_intersection",
    "signalized_intersection",
    "snow",
    "work_zone",
    "dark",
    "light",
    "rural",
    "older_driver",
    "young_driver",
    "drunk_driving",
    "exceeding_speed_limit",
    "fatigued",
    "drug_related",
    "running_stop_sign",
    "running_red_light",
    "unbelted",
    "large_truck",
    "overturn",
];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Police-reported injury level on the KABCO scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum KabcoLevel {
    O,
    C,
    B,
    A,
    K,
}

impl KabcoLevel {
    pub const ALL: [KabcoLevel; 5] = [
        KabcoLevel::K,
        KabcoLevel::A,
        KabcoLevel::B,
        KabcoLevel::C,
        KabcoLevel::O,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            KabcoLevel::K => "K",
            KabcoLevel::A => "A",
            KabcoLevel::B => "B",
            KabcoLevel::C => "C",
            KabcoLevel::O => "O",
        }
    }

    pub fn severity_class(self) -> SeverityClass {
        severity_class(self)
    }

    pub fn equivalent_fatality(self) -> f64 {
        equivalent_fatality(self)
    }
}

impl fmt::Display for KabcoLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for KabcoLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "K" => Ok(KabcoLevel::K),
            "A" => Ok(KabcoLevel::A),
            "B" => Ok(KabcoLevel::B),
            "C" => Ok(KabcoLevel::C),
            "O" => Ok(KabcoLevel::O),
            other => Err(format!("unknown KABCO level {other:?}")),
        }
    }
}

/// Ordinal response: 0 = no injury, 1 = minor injury, 2 = serious injury.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SeverityClass(u8);

impl SeverityClass {
    pub const NONE: SeverityClass = SeverityClass(0);
    pub const MINOR: SeverityClass = SeverityClass(1);
    pub const SERIOUS: SeverityClass = SeverityClass(2);

    pub fn new(ordinal: u8) -> Option<Self> {
        (ordinal <= 2).then_some(SeverityClass(ordinal))
    }

    pub fn ordinal(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// O maps to no injury, B and C to minor injury, K and A to serious injury.
pub fn severity_class(level: KabcoLevel) -> SeverityClass {
    match level {
        KabcoLevel::O => SeverityClass::NONE,
        KabcoLevel::B | KabcoLevel::C => SeverityClass::MINOR,
        KabcoLevel::K | KabcoLevel::A => SeverityClass::SERIOUS,
    }
}

/// Fatality-equivalent weight of a crash at the given maximum injury level.
pub fn equivalent_fatality(level: KabcoLevel) -> f64 {
    match level {
        KabcoLevel::K => 1.0,
        KabcoLevel::A => 0.1107,
        KabcoLevel::B => 0.0310,
        KabcoLevel::C => 0.0148,
        KabcoLevel::O => 0.0049,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrashRecord {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
    pub max_injury: KabcoLevel,
    pub covariates: BTreeMap<String, u8>,
}

impl CrashRecord {
    pub fn severity(&self) -> SeverityClass {
        severity_class(self.max_injury)
    }

    /// Indicator value, 0 when the covariate is absent from the record.
    pub fn covariate(&self, name: &str) -> u8 {
        self.covariates.get(name).copied().unwrap_or(0)
    }
}

/// Maps logical fields onto CSV header names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMapping {
    pub id: String,
    pub lat: String,
    pub lon: String,
    pub max_injury: String,
    /// Covariate name -> CSV column.
    pub covariates: BTreeMap<String, String>,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        ColumnMapping {
            id: "id".into(),
            lat: "lat".into(),
            lon: "lon".into(),
            max_injury: "max_injury".into(),
            covariates: COVARIATES
                .iter()
                .map(|c| (c.to_string(), c.to_string()))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseMode {
    FailFast,
    #[default]
    SkipAndReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RowError {
    /// 1-based data row number (the header is row 0).
    pub row: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct IngestReport {
    pub records: Vec<CrashRecord>,
    pub row_errors: Vec<RowError>,
    /// Empty covariate cells per covariate, each read as 0.
    pub missing: BTreeMap<String, usize>,
}

struct ResolvedColumns {
    id: usize,
    lat: usize,
    lon: usize,
    max_injury: usize,
    covariates: Vec<(String, usize)>,
}

fn resolve(headers: &csv::StringRecord, mapping: &ColumnMapping) -> Result<ResolvedColumns, IngestError> {
    let mut absent = Vec::new();
    let mut find = |name: &str| match headers.iter().position(|h| h.trim() == name) {
        Some(i) => i,
        None => {
            absent.push(format!("{name:?}"));
            usize::MAX
        }
    };
    let id = find(&mapping.id);
    let lat = find(&mapping.lat);
    let lon = find(&mapping.lon);
    let max_injury = find(&mapping.max_injury);
    let covariates = mapping
        .covariates
        .iter()
        .map(|(cov, col)| (cov.clone(), find(col)))
        .collect();
    if !absent.is_empty() {
        return Err(IngestError::Schema(format!("missing columns {}", absent.join(", "))));
    }
    Ok(ResolvedColumns {
        id,
        lat,
        lon,
        max_injury,
        covariates,
    })
}

fn parse_row(
    row: &csv::StringRecord,
    cols: &ResolvedColumns,
    missing: &mut BTreeMap<String, usize>,
) -> Result<CrashRecord, String> {
    let field = |i: usize| row.get(i).map(str::trim).unwrap_or("");
    let lat: f64 = field(cols.lat)
        .parse()
        .map_err(|_| format!("unparseable latitude {:?}", field(cols.lat)))?;
    let lon: f64 = field(cols.lon)
        .parse()
        .map_err(|_| format!("unparseable longitude {:?}", field(cols.lon)))?;
    if !(-90.0..=90.0).contains(&lat) {
        return Err(format!("latitude out of range: {lat}"));
    }
    if !(-180.0..=180.0).contains(&lon) {
        return Err(format!("longitude out of range: {lon}"));
    }
    let max_injury: KabcoLevel = field(cols.max_injury).parse()?;

    let mut covariates = BTreeMap::new();
    let mut blanks = Vec::new();
    for (name, idx) in &cols.covariates {
        let value = match field(*idx) {
            "" => {
                blanks.push(name);
                0
            }
            "0" => 0,
            "1" => 1,
            other => return Err(format!("covariate {name} must be 0 or 1, got {other:?}")),
        };
        covariates.insert(name.clone(), value);
    }
    // Only count blanks once the row is known to be valid.
    for name in blanks {
        *missing.entry(name.clone()).or_insert(0) += 1;
    }
    Ok(CrashRecord {
        id: field(cols.id).to_string(),
        lat,
        lon,
        max_injury,
        covariates,
    })
}

/// Parse crash records from CSV.
///
/// In [`ParseMode::FailFast`] the first bad row aborts with
/// [`IngestError::Row`]; otherwise bad rows are collected in the report.
pub fn parse_crashes<R: Read>(
    source: R,
    mapping: &ColumnMapping,
    mode: ParseMode,
) -> Result<IngestReport, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(source);
    let headers = reader.headers()?.clone();
    let cols = resolve(&headers, mapping)?;

    let mut report = IngestReport::default();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 1;
        let parsed = row
            .map_err(|e| e.to_string())
            .and_then(|r| parse_row(&r, &cols, &mut report.missing));
        match parsed {
            Ok(rec) => report.records.push(rec),
            Err(message) => match mode {
                ParseMode::FailFast => return Err(IngestError::Row { row: row_no, message }),
                ParseMode::SkipAndReport => report.row_errors.push(RowError { row: row_no, message }),
            },
        }
    }
    Ok(report)
}

/// Write records using the default column names. `covariates` fixes the
/// column order; absent indicators are written as 0.
pub fn write_crashes<W: Write>(
    sink: W,
    records: &[CrashRecord],
    covariates: &[String],
) -> Result<(), IngestError> {
    let mut writer = csv::Writer::from_writer(sink);
    let mut header = vec!["id", "lat", "lon", "max_injury"];
    header.extend(covariates.iter().map(String::as_str));
    writer.write_record(&header)?;
    for rec in records {
        let mut row = vec![
            rec.id.clone(),
            rec.lat.to_string(),
            rec.lon.to_string(),
            rec.max_injury.to_string(),
        ];
        row.extend(covariates.iter().map(|c| rec.covariate(c).to_string()));
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

/// Union of covariate names across records, sorted.
pub fn covariate_union(records: &[CrashRecord]) -> Vec<String> {
    let mut names: Vec<String> = records
        .iter()
        .flat_map(|r| r.covariates.keys().cloned())
        .collect();
    names.sort();
    names.dedup();
    names
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> String {
        let mut h = String::from("id,lat,lon,max_injury");
        for c in COVARIATES {
            h.push(',');
            h.push_str(c);
        }
        h
    }

    fn row(id: &str, lat: &str, lon: &str, sev: &str) -> String {
        let mut r = format!("{id},{lat},{lon},{sev}");
        for _ in COVARIATES {
            r.push_str(",0");
        }
        r
    }

    #[test]
    fn kabco_parse_is_case_insensitive() {
        assert_eq!("k".parse::<KabcoLevel>().unwrap(), KabcoLevel::K);
        assert_eq!(" o ".parse::<KabcoLevel>().unwrap(), KabcoLevel::O);
        assert!("X".parse::<KabcoLevel>().is_err());
        assert!("".parse::<KabcoLevel>().is_err());
    }

    #[test]
    fn severity_mapping() {
        assert_eq!(severity_class(KabcoLevel::O).ordinal(), 0);
        assert_eq!(severity_class(KabcoLevel::C).ordinal(), 1);
        assert_eq!(severity_class(KabcoLevel::B).ordinal(), 1);
        assert_eq!(severity_class(KabcoLevel::A).ordinal(), 2);
        assert_eq!(severity_class(KabcoLevel::K).ordinal(), 2);
    }

    #[test]
    fn severity_and_weights_are_monotone() {
        // ALL runs from most to least severe.
        for pair in KabcoLevel::ALL.windows(2) {
            assert!(severity_class(pair[0]) >= severity_class(pair[1]));
            assert!(equivalent_fatality(pair[0]) > equivalent_fatality(pair[1]));
        }
        assert_eq!(equivalent_fatality(KabcoLevel::K), 1.0);
        assert_eq!(equivalent_fatality(KabcoLevel::A), 0.1107);
        assert_eq!(equivalent_fatality(KabcoLevel::B), 0.0310);
        assert_eq!(equivalent_fatality(KabcoLevel::C), 0.0148);
        assert_eq!(equivalent_fatality(KabcoLevel::O), 0.0049);
    }

    #[test]
    fn parses_severity_token() {
        let csv = format!("{}\n{}\n", header(), row("a", "40.1", "-77.5", "K"));
        let rep = parse_crashes(csv.as_bytes(), &ColumnMapping::default(), ParseMode::FailFast).unwrap();
        assert_eq!(rep.records.len(), 1);
        assert_eq!(rep.records[0].max_injury, KabcoLevel::K);
    }

    #[test]
    fn latitude_out_of_range_is_row_error() {
        let csv = format!("{}\n{}\n", header(), row("a", "95.0", "-77.5", "O"));
        let err = parse_crashes(csv.as_bytes(), &ColumnMapping::default(), ParseMode::FailFast).unwrap_err();
        match err {
            IngestError::Row { row, message } => {
                assert_eq!(row, 1);
                assert!(message.contains("latitude out of range"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn skip_mode_reports_malformed_rows() {
        let csv = format!(
            "{}\n{}\n{}\n{}\n",
            header(),
            row("a", "40.1", "-77.5", "K"),
            row("b", "north", "-77.5", "A"),
            row("c", "40.2", "-77.4", "o"),
        );
        let rep = parse_crashes(csv.as_bytes(), &ColumnMapping::default(), ParseMode::SkipAndReport).unwrap();
        assert_eq!(rep.records.len(), 2);
        assert_eq!(rep.row_errors.len(), 1);
        assert_eq!(rep.row_errors[0].row, 2);
    }

    #[test]
    fn missing_column_is_schema_error() {
        let csv = "id,lat,lon\n1,40,-77\n";
        let err = parse_crashes(csv.as_bytes(), &ColumnMapping::default(), ParseMode::SkipAndReport).unwrap_err();
        assert!(matches!(err, IngestError::Schema(m) if m.contains("max_injury")));
    }

    #[test]
    fn blank_covariates_default_to_zero_and_are_counted() {
        let csv = "id,lat,lon,max_injury,snow,dark\n1,40,-77,B,,1\n2,40,-77,C,,\n";
        let mut mapping = ColumnMapping::default();
        mapping.covariates = [("snow", "snow"), ("dark", "dark")]
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect();
        let rep = parse_crashes(csv.as_bytes(), &mapping, ParseMode::FailFast).unwrap();
        assert_eq!(rep.records[0].covariate("snow"), 0);
        assert_eq!(rep.records[0].covariate("dark"), 1);
        assert_eq!(rep.missing["snow"], 2);
        assert_eq!(rep.missing["dark"], 1);
    }

    #[test]
    fn non_binary_covariate_rejected() {
        let csv = "id,lat,lon,max_injury,snow\n1,40,-77,B,2\n";
        let mut mapping = ColumnMapping::default();
        mapping.covariates = [("snow".to_string(), "snow".to_string())].into_iter().collect();
        let rep = parse_crashes(csv.as_bytes(), &mapping, ParseMode::SkipAndReport).unwrap();
        assert!(rep.records.is_empty());
        assert_eq!(rep.row_errors.len(), 1);
    }

    #[test]
    fn custom_column_names() {
        let csv = "CRN,Y,X,SEV,SNOW_FLAG\nz1,41,-76,a,1\n";
        let mapping = ColumnMapping {
            id: "CRN".into(),
            lat: "Y".into(),
            lon: "X".into(),
            max_injury: "SEV".into(),
            covariates: [("snow".to_string(), "SNOW_FLAG".to_string())].into_iter().collect(),
        };
        let rep = parse_crashes(csv.as_bytes(), &mapping, ParseMode::FailFast).unwrap();
        assert_eq!(rep.records[0].id, "z1");
        assert_eq!(rep.records[0].max_injury, KabcoLevel::A);
        assert_eq!(rep.records[0].covariate("snow"), 1);
    }
}
