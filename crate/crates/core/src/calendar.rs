//! Time and calendar features for hourly timestamps.
//!
//! Every timestamp maps to nine exogenous features: hour of day, day
//! of week and month, each encoded cyclically as a sine/cosine pair,
//! plus three binary indicators (workday, holiday, next day workday).
//! Default holiday calendars for the supported regions ship as CSV
//! data files under `data/holidays/v1/` and can be overridden at run
//! time with any file of the same `date,name` layout.

use std::collections::BTreeSet;
use std::f64::consts::TAU;
use std::ops::RangeInclusive;
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Timelike, Weekday};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of exogenous features per timestamp.
pub const NUM_FEATURES: usize = 9;

const PORTUGAL_CSV: &str = include_str!("../data/holidays/v1/portugal.csv");
const NEW_SOUTH_WALES_CSV: &str = include_str!("../data/holidays/v1/new_south_wales.csv");

#[derive(Debug, Error)]
pub enum CalendarError {
    #[error("timestamp {ts} outside calendar years {}..={}", .years.start(), .years.end())]
    OutOfCalendarRange {
        ts: NaiveDateTime,
        years: RangeInclusive<i32>,
    },
    #[error("failed to read holiday file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad holiday entry at line {line}: {msg}")]
    BadEntry { line: usize, msg: String },
}

/// Geographic tag selecting the holiday calendar for a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Portugal,
    NewSouthWales,
    Custom,
}

impl Region {
    pub fn as_str(&self) -> &'static str {
        match self {
            Region::Portugal => "portugal",
            Region::NewSouthWales => "new_south_wales",
            Region::Custom => "custom",
        }
    }
}

impl std::str::FromStr for Region {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "portugal" | "pt" => Ok(Region::Portugal),
            "new_south_wales" | "nsw" | "ausgrid" => Ok(Region::NewSouthWales),
            "custom" | "none" => Ok(Region::Custom),
            other => Err(format!("unknown region '{other}'")),
        }
    }
}

/// Set of holiday dates for one region, with the span of years it
/// covers. Lookups outside the covered years are an error rather than
/// silently "not a holiday".
#[derive(Debug, Clone)]
pub struct HolidayCalendar {
    region: Region,
    dates: BTreeSet<NaiveDate>,
    years: RangeInclusive<i32>,
}

impl HolidayCalendar {
    /// Built-in calendar for a region (2010-2014 for the shipped data).
    pub fn for_region(region: Region) -> Self {
        match region {
            Region::Portugal => Self::parse_csv(PORTUGAL_CSV, region).expect("embedded data"),
            Region::NewSouthWales => {
                Self::parse_csv(NEW_SOUTH_WALES_CSV, region).expect("embedded data")
            }
            // no holidays; cover a wide span so arbitrary datasets work
            Region::Custom => Self::from_dates(Region::Custom, BTreeSet::new(), 1970..=2100),
        }
    }

    /// Loads a `date,name` CSV, inferring coverage from the years present.
    pub fn from_file(path: &Path, region: Region) -> Result<Self, CalendarError> {
        let text = std::fs::read_to_string(path).map_err(|source| CalendarError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse_csv(&text, region)
    }

    pub fn from_dates(
        region: Region,
        dates: BTreeSet<NaiveDate>,
        years: RangeInclusive<i32>,
    ) -> Self {
        Self { region, dates, years }
    }

    fn parse_csv(text: &str, region: Region) -> Result<Self, CalendarError> {
        let mut dates = BTreeSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (i == 0 && line.to_ascii_lowercase().starts_with("date")) {
                continue;
            }
            let field = line.split(',').next().unwrap_or("").trim();
            let date = NaiveDate::parse_from_str(field, "%Y-%m-%d").map_err(|e| {
                CalendarError::BadEntry {
                    line: i + 1,
                    msg: format!("'{field}': {e}"),
                }
            })?;
            dates.insert(date);
        }
        if dates.is_empty() {
            return Err(CalendarError::BadEntry {
                line: 0,
                msg: "holiday file contains no dates".into(),
            });
        }
        let first = dates.iter().next().unwrap().year();
        let last = dates.iter().next_back().unwrap().year();
        Ok(Self {
            region,
            dates,
            years: first..=last,
        })
    }

    pub fn region(&self) -> Region {
        self.region
    }

    pub fn covered_years(&self) -> RangeInclusive<i32> {
        self.years.clone()
    }

    pub fn covers(&self, ts: NaiveDateTime) -> bool {
        self.years.contains(&ts.year())
    }

    pub fn is_holiday(&self, date: NaiveDate) -> bool {
        self.dates.contains(&date)
    }

    /// Monday-Friday and not a holiday.
    pub fn is_workday(&self, date: NaiveDate) -> bool {
        let weekend = matches!(date.weekday(), Weekday::Sat | Weekday::Sun);
        !weekend && !self.is_holiday(date)
    }
}

/// The nine features for one timestamp, in the fixed column order used
/// throughout the crate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector {
    pub hour_sin: f64,
    pub hour_cos: f64,
    pub dow_sin: f64,
    pub dow_cos: f64,
    pub month_sin: f64,
    pub month_cos: f64,
    pub is_workday: f64,
    pub is_holiday: f64,
    pub next_day_workday: f64,
}

impl FeatureVector {
    pub fn to_array(self) -> [f64; NUM_FEATURES] {
        [
            self.hour_sin,
            self.hour_cos,
            self.dow_sin,
            self.dow_cos,
            self.month_sin,
            self.month_cos,
            self.is_workday,
            self.is_holiday,
            self.next_day_workday,
        ]
    }
}

/// Encodes one timestamp. Hour uses period 24, day of week period 7
/// with Monday = 0, month period 12 with January = 0.
pub fn encode_timestamp(
    ts: NaiveDateTime,
    cal: &HolidayCalendar,
) -> Result<FeatureVector, CalendarError> {
    let next_day = ts + Duration::hours(24);
    if !cal.covers(ts) || !cal.covers(next_day) {
        let bad = if cal.covers(ts) { next_day } else { ts };
        return Err(CalendarError::OutOfCalendarRange {
            ts: bad,
            years: cal.covered_years(),
        });
    }
    let (hour_sin, hour_cos) = cyclic(ts.hour() as f64, 24.0);
    let dow = ts.weekday().num_days_from_monday() as f64;
    let (dow_sin, dow_cos) = cyclic(dow, 7.0);
    let (month_sin, month_cos) = cyclic((ts.month() - 1) as f64, 12.0);
    Ok(FeatureVector {
        hour_sin,
        hour_cos,
        dow_sin,
        dow_cos,
        month_sin,
        month_cos,
        is_workday: cal.is_workday(ts.date()) as u8 as f64,
        is_holiday: cal.is_holiday(ts.date()) as u8 as f64,
        next_day_workday: cal.is_workday(next_day.date()) as u8 as f64,
    })
}

fn cyclic(value: f64, period: f64) -> (f64, f64) {
    let angle = TAU * value / period;
    (angle.sin(), angle.cos())
}

/// Feature rows for a whole timestamp index, stored row-major T x 9.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    data: Vec<f64>,
    rows: usize,
}

impl FeatureMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * NUM_FEATURES..(i + 1) * NUM_FEATURES]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Encodes every timestamp in order. An empty index yields a 0 x 9
/// matrix.
pub fn build_feature_matrix(
    timestamps: &[NaiveDateTime],
    cal: &HolidayCalendar,
) -> Result<FeatureMatrix, CalendarError> {
    let mut data = Vec::with_capacity(timestamps.len() * NUM_FEATURES);
    for &ts in timestamps {
        data.extend_from_slice(&encode_timestamp(ts, cal)?.to_array());
    }
    Ok(FeatureMatrix {
        data,
        rows: timestamps.len(),
    })
}
