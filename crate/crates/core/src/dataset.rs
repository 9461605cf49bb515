//! Raw load-data ingestion: CSV parsing, hourly resampling, the
//! 70/10/20 temporal split and per-client standardization.
//!
//! Two raw layouts are accepted. The wide layout is one timestamp
//! column plus one column per client and doubles as the canonical
//! exchange format written by `gridcast convert`. The Ausgrid layout is
//! one row per client-day with 48 half-hour energy columns and a
//! consumption-category field; only the general-consumption (GC) rows
//! are used.
//!
//! Clients with unparsable values, duplicate or missing days, or gaps
//! after alignment are dropped and reported, never imputed.

use std::collections::HashMap;
use std::path::Path;

use chrono::{Duration, NaiveDate, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::calendar::Region;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("file not found: {0}")]
    FileNotFound(String),
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed row at line {line}: {msg}")]
    MalformedRow { line: usize, msg: String },
    #[error("no usable records in input")]
    EmptyDataset,
    #[error("client {client} mixes time resolutions")]
    InconsistentResolution { client: String },
    #[error("client time ranges share no common span")]
    NoCommonTimeRange,
    #[error("dataset has {rows} rows, need at least {min}")]
    TooShort { rows: usize, min: usize },
    #[error("client {0} is constant over the training range")]
    ConstantSeries(String),
}

/// Raw input layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceFormat {
    Wide,
    AusgridLong,
}

impl std::str::FromStr for SourceFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "wide" => Ok(SourceFormat::Wide),
            "ausgrid" | "ausgrid_long" => Ok(SourceFormat::AusgridLong),
            other => Err(format!("unknown source format '{other}'")),
        }
    }
}

/// One client's raw points, strictly increasing in time.
#[derive(Debug, Clone)]
pub struct RawClient {
    pub id: String,
    pub points: Vec<(NaiveDateTime, f64)>,
}

/// A client dropped during ingestion, with the reason.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Exclusion {
    pub client_id: String,
    pub reason: String,
}

/// Parsed raw records grouped per client, plus the exclusion report.
#[derive(Debug, Clone)]
pub struct RawDataset {
    pub clients: Vec<RawClient>,
    pub excluded: Vec<Exclusion>,
    pub format: SourceFormat,
}

impl RawDataset {
    /// Total number of (timestamp, client, load) records kept.
    pub fn num_records(&self) -> usize {
        self.clients.iter().map(|c| c.points.len()).sum()
    }
}

/// Aligned hourly load matrix: T timestamps x C clients, no gaps, no
/// missing entries.
#[derive(Debug, Clone)]
pub struct HourlyDataset {
    values: Vec<f64>, // row-major T x C
    timestamps: Vec<NaiveDateTime>,
    client_ids: Vec<String>,
    region: Region,
}

impl HourlyDataset {
    /// Builds a dataset from already-aligned parts, checking the type
    /// invariants: hourly contiguity, finite values, C >= 1.
    pub fn from_parts(
        values: Vec<f64>,
        timestamps: Vec<NaiveDateTime>,
        client_ids: Vec<String>,
        region: Region,
    ) -> Result<Self, IngestError> {
        if client_ids.is_empty() || timestamps.is_empty() {
            return Err(IngestError::EmptyDataset);
        }
        if values.len() != timestamps.len() * client_ids.len() {
            return Err(IngestError::MalformedRow {
                line: 0,
                msg: format!(
                    "value matrix has {} entries, expected {} x {}",
                    values.len(),
                    timestamps.len(),
                    client_ids.len()
                ),
            });
        }
        for w in timestamps.windows(2) {
            if w[1] - w[0] != Duration::hours(1) {
                return Err(IngestError::MalformedRow {
                    line: 0,
                    msg: format!("timestamp index has a gap between {} and {}", w[0], w[1]),
                });
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(IngestError::MalformedRow {
                line: 0,
                msg: "non-finite load value".into(),
            });
        }
        Ok(Self {
            values,
            timestamps,
            client_ids,
            region,
        })
    }

    pub fn num_hours(&self) -> usize {
        self.timestamps.len()
    }

    pub fn num_clients(&self) -> usize {
        self.client_ids.len()
    }

    pub fn value(&self, t: usize, c: usize) -> f64 {
        self.values[t * self.client_ids.len() + c]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let c = self.client_ids.len();
        &self.values[t * c..(t + 1) * c]
    }

    pub fn client_series(&self, c: usize) -> Vec<f64> {
        (0..self.num_hours()).map(|t| self.value(t, c)).collect()
    }

    pub fn timestamps(&self) -> &[NaiveDateTime] {
        &self.timestamps
    }

    pub fn client_ids(&self) -> &[String] {
        &self.client_ids
    }

    pub fn region(&self) -> Region {
        self.region
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Content hash over dimensions, client ids, region and the exact
    /// value bits; identifies the dataset in run manifests.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.num_hours() as u64).to_le_bytes());
        h.update((self.num_clients() as u64).to_le_bytes());
        h.update(self.region.as_str().as_bytes());
        if let Some(first) = self.timestamps.first() {
            h.update(first.and_utc().timestamp().to_le_bytes());
        }
        for id in &self.client_ids {
            h.update(id.as_bytes());
            h.update([0]);
        }
        for v in &self.values {
            h.update(v.to_le_bytes());
        }
        hex(&h.finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Contiguous 70/10/20 partition of an [`HourlyDataset`], shared by all
/// clients. Boundaries use integer floor arithmetic.
#[derive(Debug, Clone)]
pub struct SplitDataset {
    data: HourlyDataset,
    train_end: usize,
    val_end: usize,
}

impl SplitDataset {
    pub fn data(&self) -> &HourlyDataset {
        &self.data
    }

    /// `(t_train_end, t_val_end)` row indices.
    pub fn boundaries(&self) -> (usize, usize) {
        (self.train_end, self.val_end)
    }

    pub fn train_range(&self) -> std::ops::Range<usize> {
        0..self.train_end
    }

    pub fn val_range(&self) -> std::ops::Range<usize> {
        self.train_end..self.val_end
    }

    pub fn test_range(&self) -> std::ops::Range<usize> {
        self.val_end..self.data.num_hours()
    }
}

/// Splits into train/val/test as floor(0.7 T) / floor(0.1 T) / rest.
pub fn split_dataset(data: HourlyDataset) -> Result<SplitDataset, IngestError> {
    let t = data.num_hours();
    if t < 10 {
        return Err(IngestError::TooShort { rows: t, min: 10 });
    }
    let train_end = t * 7 / 10;
    let val_end = train_end + t / 10;
    Ok(SplitDataset {
        data,
        train_end,
        val_end,
    })
}

/// Per-client standardization parameters, fitted on the train range
/// only, population (1/N) convention.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalerParams {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ScalerParams {
    /// Hash over the exact parameter bits, recorded in checkpoints.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in self.mean.iter().chain(&self.std) {
            h.update(v.to_le_bytes());
        }
        hex(&h.finalize())
    }
}

/// Fits mean/std per client on the train range. Constant training
/// series are rejected.
pub fn fit_standardizer(split: &SplitDataset) -> Result<ScalerParams, IngestError> {
    let ds = split.data();
    let n = split.train_range().len();
    if n == 0 {
        return Err(IngestError::TooShort { rows: 0, min: 1 });
    }
    let c = ds.num_clients();
    let mut mean = vec![0.0; c];
    for t in split.train_range() {
        for (m, v) in mean.iter_mut().zip(ds.row(t)) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut var = vec![0.0; c];
    for t in split.train_range() {
        for ((s, v), m) in var.iter_mut().zip(ds.row(t)).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    let mut std = vec![0.0; c];
    for (i, s) in var.iter().enumerate() {
        let sd = (s / n as f64).sqrt();
        if sd <= 0.0 {
            return Err(IngestError::ConstantSeries(ds.client_ids()[i].clone()));
        }
        std[i] = sd;
    }
    Ok(ScalerParams { mean, std })
}

/// A split dataset whose values have been standardized with
/// train-fitted parameters; all downstream sampling and metrics read
/// these values.
#[derive(Debug, Clone)]
pub struct StandardizedDataset {
    split: SplitDataset,
    scaler: ScalerParams,
}

impl StandardizedDataset {
    pub fn data(&self) -> &HourlyDataset {
        self.split.data()
    }

    pub fn split(&self) -> &SplitDataset {
        &self.split
    }

    pub fn scaler(&self) -> &ScalerParams {
        &self.scaler
    }

    /// Undoes the transform, recovering the raw-scale dataset.
    pub fn invert(&self) -> SplitDataset {
        let ds = self.split.data();
        let c = ds.num_clients();
        let values: Vec<f64> = ds
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.scaler.std[i % c] + self.scaler.mean[i % c])
            .collect();
        SplitDataset {
            data: HourlyDataset {
                values,
                timestamps: ds.timestamps().to_vec(),
                client_ids: ds.client_ids().to_vec(),
                region: ds.region(),
            },
            train_end: self.split.train_end,
            val_end: self.split.val_end,
        }
    }
}

/// Applies `x' = (x - mean[c]) / std[c]` to all three splits.
pub fn apply_standardizer(split: SplitDataset, scaler: ScalerParams) -> StandardizedDataset {
    let c = split.data().num_clients();
    let values: Vec<f64> = split
        .data()
        .values()
        .iter()
        .enumerate()
        .map(|(i, v)| (v - scaler.mean[i % c]) / scaler.std[i % c])
        .collect();
    let data = HourlyDataset {
        values,
        timestamps: split.data().timestamps().to_vec(),
        client_ids: split.data().client_ids().to_vec(),
        region: split.data().region(),
    };
    StandardizedDataset {
        split: SplitDataset {
            data,
            train_end: split.train_end,
            val_end: split.val_end,
        },
        scaler,
    }
}

/// Convenience: split, fit on train, standardize.
pub fn standardize(data: HourlyDataset) -> Result<StandardizedDataset, IngestError> {
    let split = split_dataset(data)?;
    let scaler = fit_standardizer(&split)?;
    Ok(apply_standardizer(split, scaler))
}

/// Reads a raw CSV in the given layout. Structural problems (missing
/// file, broken rows) are errors; per-client data problems (unparsable
/// values, duplicate or missing days) drop the client into the
/// exclusion report instead.
pub fn load_raw_csv(path: &Path, format: SourceFormat) -> Result<RawDataset, IngestError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            IngestError::FileNotFound(path.display().to_string())
        } else {
            IngestError::Io {
                path: path.display().to_string(),
                source: e,
            }
        }
    })?;
    match format {
        SourceFormat::Wide => parse_wide(&text),
        SourceFormat::AusgridLong => parse_ausgrid(&text),
    }
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M"] {
        if let Ok(ts) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(ts);
        }
    }
    None
}

fn parse_wide(text: &str) -> Result<RawDataset, IngestError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(IngestError::EmptyDataset)?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 2 {
        return Err(IngestError::MalformedRow {
            line: 1,
            msg: "wide header needs a timestamp column and at least one client column".into(),
        });
    }
    let ids: Vec<String> = cols[1..].iter().map(|s| s.to_string()).collect();
    let n_clients = ids.len();

    let mut rows: Vec<(NaiveDateTime, usize, Vec<Option<f64>>)> = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != n_clients + 1 {
            return Err(IngestError::MalformedRow {
                line: line_no,
                msg: format!("expected {} fields, got {}", n_clients + 1, fields.len()),
            });
        }
        let ts = parse_timestamp(fields[0]).ok_or_else(|| IngestError::MalformedRow {
            line: line_no,
            msg: format!("unparsable timestamp '{}'", fields[0]),
        })?;
        let loads: Vec<Option<f64>> = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect();
        rows.push((ts, line_no, loads));
    }
    if rows.is_empty() {
        return Err(IngestError::EmptyDataset);
    }
    rows.sort_by_key(|(ts, _, _)| *ts);
    for w in rows.windows(2) {
        if w[0].0 == w[1].0 {
            return Err(IngestError::MalformedRow {
                line: w[1].1,
                msg: format!("duplicate timestamp {}", w[1].0),
            });
        }
    }

    let mut bad: HashMap<usize, usize> = HashMap::new(); // client -> first bad line
    for (_, line_no, loads) in &rows {
        for (c, v) in loads.iter().enumerate() {
            if v.is_none() {
                bad.entry(c).or_insert(*line_no);
            }
        }
    }

    let mut clients = Vec::new();
    let mut excluded = Vec::new();
    for (c, id) in ids.into_iter().enumerate() {
        if let Some(line) = bad.get(&c) {
            excluded.push(Exclusion {
                client_id: id,
                reason: format!("missing or unparsable load value (first at line {line})"),
            });
            continue;
        }
        let points = rows
            .iter()
            .map(|(ts, _, loads)| (*ts, loads[c].unwrap()))
            .collect();
        clients.push(RawClient { id, points });
    }
    if clients.is_empty() {
        return Err(IngestError::EmptyDataset);
    }
    Ok(RawDataset {
        clients,
        excluded,
        format: SourceFormat::Wide,
    })
}

fn parse_ausgrid_date(s: &str) -> Option<NaiveDate> {
    let s = s.trim();
    for fmt in ["%d/%m/%Y", "%Y-%m-%d", "%d-%b-%y"] {
        if let Ok(d) = NaiveDate::parse_from_str(s, fmt) {
            return Some(d);
        }
    }
    None
}

fn parse_ausgrid(text: &str) -> Result<RawDataset, IngestError> {
    // the published file carries a disclaimer line above the header
    let mut header: Option<(usize, Vec<String>)> = None;
    for (i, line) in text.lines().enumerate().take(10) {
        let lower = line.to_ascii_lowercase();
        if lower.contains("customer") && lower.contains("date") {
            header = Some((i, line.split(',').map(|s| s.trim().to_string()).collect()));
            break;
        }
    }
    let (header_idx, cols) = header.ok_or(IngestError::MalformedRow {
        line: 1,
        msg: "no header row with Customer and date columns found".into(),
    })?;

    let find = |name: &str| {
        cols.iter()
            .position(|c| c.eq_ignore_ascii_case(name))
    };
    let customer_col = find("customer").ok_or(IngestError::MalformedRow {
        line: header_idx + 1,
        msg: "missing Customer column".into(),
    })?;
    let category_col = find("consumption category").ok_or(IngestError::MalformedRow {
        line: header_idx + 1,
        msg: "missing Consumption Category column".into(),
    })?;
    let date_col = find("date").ok_or(IngestError::MalformedRow {
        line: header_idx + 1,
        msg: "missing date column".into(),
    })?;
    // half-hour columns look like 0:30, 1:00, ..., 24:00 (period end)
    let mut slot_cols = Vec::new();
    for (idx, c) in cols.iter().enumerate() {
        if let Some((h, m)) = c.split_once(':') {
            if let (Ok(h), Ok(m)) = (h.parse::<u32>(), m.parse::<u32>()) {
                if h <= 24 && (m == 0 || m == 30) {
                    slot_cols.push((idx, (h * 60 + m) as usize));
                }
            }
        }
    }
    if slot_cols.len() != 48 {
        return Err(IngestError::MalformedRow {
            line: header_idx + 1,
            msg: format!("expected 48 half-hour columns, found {}", slot_cols.len()),
        });
    }
    slot_cols.sort_by_key(|&(_, minutes)| minutes);

    struct ClientDays {
        days: HashMap<NaiveDate, [f64; 48]>,
        bad: Option<String>,
    }
    let mut per_client: HashMap<String, ClientDays> = HashMap::new();
    let mut order: Vec<String> = Vec::new();

    for (i, line) in text.lines().enumerate().skip(header_idx + 1) {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < cols.len() {
            return Err(IngestError::MalformedRow {
                line: line_no,
                msg: format!("expected {} fields, got {}", cols.len(), fields.len()),
            });
        }
        if !fields[category_col].eq_ignore_ascii_case("GC") {
            continue; // keep only general consumption
        }
        let id = fields[customer_col].to_string();
        if id.is_empty() {
            return Err(IngestError::MalformedRow {
                line: line_no,
                msg: "empty customer id".into(),
            });
        }
        let entry = per_client.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            ClientDays {
                days: HashMap::new(),
                bad: None,
            }
        });
        if entry.bad.is_some() {
            continue;
        }
        let Some(date) = parse_ausgrid_date(fields[date_col]) else {
            return Err(IngestError::MalformedRow {
                line: line_no,
                msg: format!("unparsable date '{}'", fields[date_col]),
            });
        };
        let mut slots = [0.0f64; 48];
        let mut ok = true;
        for (slot, &(col, _)) in slots.iter_mut().zip(&slot_cols) {
            match fields[col].parse::<f64>() {
                Ok(v) if v.is_finite() => *slot = v,
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            entry.bad = Some(format!("unparsable load value at line {line_no}"));
            continue;
        }
        if entry.days.insert(date, slots).is_some() {
            entry.bad = Some(format!("duplicate day {date} at line {line_no}"));
        }
    }

    let mut clients = Vec::new();
    let mut excluded = Vec::new();
    for id in order {
        let cd = per_client.remove(&id).unwrap();
        if let Some(reason) = cd.bad {
            excluded.push(Exclusion {
                client_id: id,
                reason,
            });
            continue;
        }
        if cd.days.is_empty() {
            continue;
        }
        let mut dates: Vec<NaiveDate> = cd.days.keys().copied().collect();
        dates.sort();
        let (first, last) = (dates[0], *dates.last().unwrap());
        let expected = (last - first).num_days() + 1;
        if dates.len() as i64 != expected {
            excluded.push(Exclusion {
                client_id: id,
                reason: format!(
                    "missing days: span {first}..{last} covers {expected} days, found {}",
                    dates.len()
                ),
            });
            continue;
        }
        // explode each day into 48 half-hour points labelled by period
        // start: column ending at h:30 covers [h:00, h:30)
        let mut points = Vec::with_capacity(dates.len() * 48);
        for date in dates {
            let slots = &cd.days[&date];
            let midnight = date.and_hms_opt(0, 0, 0).unwrap();
            for (k, &v) in slots.iter().enumerate() {
                points.push((midnight + Duration::minutes(30 * k as i64), v));
            }
        }
        clients.push(RawClient { id, points });
    }
    if clients.is_empty() {
        return Err(IngestError::EmptyDataset);
    }
    Ok(RawDataset {
        clients,
        excluded,
        format: SourceFormat::AusgridLong,
    })
}

/// Report of clients dropped while resampling and aligning.
#[derive(Debug, Clone, Default)]
pub struct ResampleReport {
    pub dropped: Vec<Exclusion>,
}

/// Resamples raw records to hourly resolution and aligns all clients to
/// the intersection of their time ranges.
///
/// Half-hour data is aggregated by summation into the hour beginning at
/// each timestamp (energy semantics); hourly data passes through.
/// Clients whose aligned series still contain gaps are dropped and
/// reported.
pub fn resample_hourly(
    raw: &RawDataset,
    region: Region,
) -> Result<(HourlyDataset, ResampleReport), IngestError> {
    struct HourlyClient {
        id: String,
        start: NaiveDateTime,
        // value per hour from start; None marks a gap
        values: Vec<Option<f64>>,
    }

    let mut hourly: Vec<HourlyClient> = Vec::new();
    for client in &raw.clients {
        if client.points.is_empty() {
            continue;
        }
        for w in client.points.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(IngestError::MalformedRow {
                    line: 0,
                    msg: format!("client {} has non-increasing timestamps", client.id),
                });
            }
        }
        let step = detect_resolution(client)?;
        let floor_hour = |ts: NaiveDateTime| {
            ts - Duration::minutes(ts.minute() as i64) - Duration::seconds(ts.second() as i64)
        };
        let start = floor_hour(client.points[0].0);
        let end = floor_hour(client.points[client.points.len() - 1].0);
        let n_hours = ((end - start).num_hours() + 1) as usize;
        let mut values: Vec<Option<f64>> = vec![None; n_hours];
        match step {
            Resolution::Hourly => {
                for &(ts, v) in &client.points {
                    let idx = (ts - start).num_hours() as usize;
                    values[idx] = Some(v);
                }
            }
            Resolution::HalfHourly => {
                // an hour is present only when both halves are
                let mut halves: Vec<(Option<f64>, Option<f64>)> = vec![(None, None); n_hours];
                for &(ts, v) in &client.points {
                    let idx = ((floor_hour(ts) - start).num_hours()) as usize;
                    if ts.minute() == 0 {
                        halves[idx].0 = Some(v);
                    } else {
                        halves[idx].1 = Some(v);
                    }
                }
                for (slot, (a, b)) in values.iter_mut().zip(halves) {
                    if let (Some(a), Some(b)) = (a, b) {
                        *slot = Some(a + b);
                    }
                }
            }
        }
        hourly.push(HourlyClient {
            id: client.id.clone(),
            start,
            values,
        });
    }
    if hourly.is_empty() {
        return Err(IngestError::EmptyDataset);
    }

    let common_start = hourly.iter().map(|c| c.start).max().unwrap();
    let common_end = hourly
        .iter()
        .map(|c| c.start + Duration::hours(c.values.len() as i64 - 1))
        .min()
        .unwrap();
    if common_end < common_start {
        return Err(IngestError::NoCommonTimeRange);
    }
    let t = ((common_end - common_start).num_hours() + 1) as usize;

    let mut kept: Vec<(String, Vec<f64>)> = Vec::new();
    let mut dropped = Vec::new();
    for c in hourly {
        let offset = (common_start - c.start).num_hours() as usize;
        let window = &c.values[offset..offset + t];
        match window.iter().copied().collect::<Option<Vec<f64>>>() {
            Some(series) => kept.push((c.id, series)),
            None => {
                let gaps = window.iter().filter(|v| v.is_none()).count();
                dropped.push(Exclusion {
                    client_id: c.id,
                    reason: format!("{gaps} missing hours after alignment"),
                });
            }
        }
    }
    if kept.is_empty() {
        return Err(IngestError::EmptyDataset);
    }
    if t < 24 {
        return Err(IngestError::TooShort { rows: t, min: 24 });
    }

    let timestamps: Vec<NaiveDateTime> =
        (0..t).map(|i| common_start + Duration::hours(i as i64)).collect();
    let c = kept.len();
    let mut values = vec![0.0; t * c];
    for (ci, (_, series)) in kept.iter().enumerate() {
        for (ti, &v) in series.iter().enumerate() {
            values[ti * c + ci] = v;
        }
    }
    let client_ids = kept.into_iter().map(|(id, _)| id).collect();
    let ds = HourlyDataset::from_parts(values, timestamps, client_ids, region)?;
    Ok((ds, ResampleReport { dropped }))
}

enum Resolution {
    Hourly,
    HalfHourly,
}

/// Native resolution from grid membership: all points on the hour is
/// hourly, all points on the half-hour grid is 30-minute data. Points
/// off both grids mean the client mixes resolutions. Gaps within a
/// grid are tolerated here; they surface as dropped clients during
/// alignment.
fn detect_resolution(client: &RawClient) -> Result<Resolution, IngestError> {
    let on_hour = client
        .points
        .iter()
        .all(|(ts, _)| ts.second() == 0 && ts.minute() == 0);
    if on_hour {
        return Ok(Resolution::Hourly);
    }
    let on_half = client
        .points
        .iter()
        .all(|(ts, _)| ts.second() == 0 && (ts.minute() == 0 || ts.minute() == 30));
    if on_half {
        return Ok(Resolution::HalfHourly);
    }
    Err(IngestError::InconsistentResolution {
        client: client.id.clone(),
    })
}

/// Writes the canonical wide CSV: ISO-8601 hourly timestamps, one
/// column per client, values printed with shortest round-trip
/// precision.
pub fn write_wide_csv(ds: &HourlyDataset, path: &Path) -> Result<(), IngestError> {
    let map_err = |source: std::io::Error| IngestError::Io {
        path: path.display().to_string(),
        source,
    };
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(map_err)?;
    let mut w = std::io::BufWriter::new(file);
    write!(w, "timestamp").map_err(map_err)?;
    for id in ds.client_ids() {
        write!(w, ",{id}").map_err(map_err)?;
    }
    writeln!(w).map_err(map_err)?;
    for t in 0..ds.num_hours() {
        write!(w, "{}", ds.timestamps()[t].format("%Y-%m-%dT%H:%M:%S")).map_err(map_err)?;
        for v in ds.row(t) {
            write!(w, ",{v}").map_err(map_err)?;
        }
        writeln!(w).map_err(map_err)?;
    }
    w.flush().map_err(map_err)
}

/// JSON sidecar written next to the canonical CSV by `convert`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvertSidecar {
    pub region: Region,
    pub rows: usize,
    pub clients: Vec<String>,
    pub dropped: Vec<Exclusion>,
    pub split_boundaries: (usize, usize),
    pub dataset_hash: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn dt(y: i32, m: u32, d: u32, h: u32, min: u32) -> NaiveDateTime {
        NaiveDate::from_ymd_opt(y, m, d)
            .unwrap()
            .and_hms_opt(h, min, 0)
            .unwrap()
    }

    fn synthetic_hourly(t: usize, c: usize) -> HourlyDataset {
        let values: Vec<f64> = (0..t * c).map(|i| (i % 31) as f64 * 0.5 + 1.0).collect();
        let timestamps = (0..t)
            .map(|i| dt(2012, 1, 1, 0, 0) + Duration::hours(i as i64))
            .collect();
        let ids = (0..c).map(|i| format!("C{i:03}")).collect();
        HourlyDataset::from_parts(values, timestamps, ids, Region::Custom).unwrap()
    }

    fn write_temp(content: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("in.csv");
        std::fs::write(&path, content).unwrap();
        (dir, path)
    }

    #[test]
    fn wide_three_timestamps_two_clients_gives_six_records() {
        let (_d, path) = write_temp(
            "timestamp,A,B\n\
             2012-01-01 00:00:00,1.0,2.0\n\
             2012-01-01 01:00:00,1.5,2.5\n\
             2012-01-01 02:00:00,1.1,2.1\n",
        );
        let raw = load_raw_csv(&path, SourceFormat::Wide).unwrap();
        assert_eq!(raw.num_records(), 6);
        assert_eq!(raw.clients.len(), 2);
        assert!(raw.excluded.is_empty());
    }

    #[test]
    fn wide_header_only_is_empty_dataset() {
        let (_d, path) = write_temp("timestamp,A,B\n");
        assert!(matches!(
            load_raw_csv(&path, SourceFormat::Wide),
            Err(IngestError::EmptyDataset)
        ));
    }

    #[test]
    fn missing_file_is_reported() {
        let err = load_raw_csv(Path::new("/nonexistent/x.csv"), SourceFormat::Wide).unwrap_err();
        assert!(matches!(err, IngestError::FileNotFound(_)));
    }

    #[test]
    fn wide_bad_value_excludes_only_that_client() {
        let (_d, path) = write_temp(
            "timestamp,A,B\n\
             2012-01-01 00:00:00,1.0,2.0\n\
             2012-01-01 01:00:00,,2.5\n",
        );
        let raw = load_raw_csv(&path, SourceFormat::Wide).unwrap();
        assert_eq!(raw.clients.len(), 1);
        assert_eq!(raw.clients[0].id, "B");
        assert_eq!(raw.excluded.len(), 1);
        assert_eq!(raw.excluded[0].client_id, "A");
    }

    #[test]
    fn wide_duplicate_timestamp_is_malformed() {
        let (_d, path) = write_temp(
            "timestamp,A\n\
             2012-01-01 00:00:00,1.0\n\
             2012-01-01 00:00:00,1.5\n",
        );
        assert!(matches!(
            load_raw_csv(&path, SourceFormat::Wide),
            Err(IngestError::MalformedRow { line: 3, .. })
        ));
    }

    fn ausgrid_header() -> String {
        let mut cols = vec![
            "Customer".to_string(),
            "Generator Capacity".to_string(),
            "Postcode".to_string(),
            "Consumption Category".to_string(),
            "date".to_string(),
        ];
        for k in 1..=48u32 {
            let minutes = 30 * k;
            cols.push(format!("{}:{:02}", minutes / 60, minutes % 60));
        }
        cols.join(",")
    }

    fn ausgrid_row(customer: &str, category: &str, date: &str, value: f64) -> String {
        let mut fields = vec![
            customer.to_string(),
            "3.0".into(),
            "2076".into(),
            category.to_string(),
            date.to_string(),
        ];
        for _ in 0..48 {
            fields.push(format!("{value}"));
        }
        fields.join(",")
    }

    #[test]
    fn ausgrid_client_missing_a_day_lands_in_exclusion_report() {
        let text = format!(
            "Disclaimer: sample data\n{}\n{}\n{}\n{}\n{}\n{}\n",
            ausgrid_header(),
            ausgrid_row("1", "GC", "1/07/2010", 0.2),
            ausgrid_row("1", "GC", "2/07/2010", 0.2),
            ausgrid_row("1", "GC", "3/07/2010", 0.2),
            ausgrid_row("2", "GC", "1/07/2010", 0.4),
            // client 2 skips 2/07 entirely
            ausgrid_row("2", "GC", "3/07/2010", 0.4),
        );
        let (_d, path) = write_temp(&text);
        let raw = load_raw_csv(&path, SourceFormat::AusgridLong).unwrap();
        assert_eq!(raw.clients.len(), 1);
        assert_eq!(raw.clients[0].id, "1");
        assert_eq!(raw.excluded.len(), 1);
        assert_eq!(raw.excluded[0].client_id, "2");
        assert!(raw.excluded[0].reason.contains("missing days"));
    }

    #[test]
    fn ausgrid_keeps_only_general_consumption() {
        let text = format!(
            "{}\n{}\n{}\n",
            ausgrid_header(),
            ausgrid_row("1", "GC", "1/07/2010", 0.2),
            ausgrid_row("1", "GG", "1/07/2010", 0.9),
        );
        let (_d, path) = write_temp(&text);
        let raw = load_raw_csv(&path, SourceFormat::AusgridLong).unwrap();
        assert_eq!(raw.clients.len(), 1);
        assert_eq!(raw.clients[0].points.len(), 48);
        assert!(raw.clients[0].points.iter().all(|&(_, v)| v == 0.2));
    }

    #[test]
    fn half_hour_values_sum_into_their_hour() {
        let raw = RawDataset {
            clients: vec![RawClient {
                id: "X".into(),
                points: (0..48)
                    .map(|i| {
                        let v = if i % 2 == 0 { 0.3 } else { 0.5 };
                        (dt(2012, 1, 1, 0, 0) + Duration::minutes(30 * i), v)
                    })
                    .collect(),
            }],
            excluded: vec![],
            format: SourceFormat::AusgridLong,
        };
        let (ds, report) = resample_hourly(&raw, Region::Custom).unwrap();
        assert!(report.dropped.is_empty());
        assert_eq!(ds.num_hours(), 24);
        for t in 0..24 {
            assert_eq!(ds.value(t, 0), 0.3 + 0.5);
        }
    }

    #[test]
    fn hourly_totals_equal_their_half_hour_sources_bitwise() {
        // exactly one addition per hour, so no drift beyond that rounding
        let mut halves = Vec::new();
        let mut expect = Vec::new();
        for i in 0..48 {
            let a = 0.1 + (i as f64) * 0.017;
            let b = 0.2 + (i as f64) * 0.013;
            halves.push((dt(2012, 3, 1, 0, 0) + Duration::minutes(60 * i), a));
            halves.push((dt(2012, 3, 1, 0, 0) + Duration::minutes(60 * i + 30), b));
            expect.push(a + b);
        }
        let raw = RawDataset {
            clients: vec![RawClient {
                id: "X".into(),
                points: halves,
            }],
            excluded: vec![],
            format: SourceFormat::AusgridLong,
        };
        let (ds, _) = resample_hourly(&raw, Region::Custom).unwrap();
        for (t, e) in expect.iter().enumerate() {
            assert_eq!(ds.value(t, 0), *e, "hour {t}");
        }
    }

    #[test]
    fn already_hourly_input_passes_through_unchanged() {
        let values: Vec<f64> = (0..30).map(|i| i as f64 * 0.25).collect();
        let raw = RawDataset {
            clients: vec![RawClient {
                id: "H".into(),
                points: values
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| (dt(2012, 1, 1, 0, 0) + Duration::hours(i as i64), v))
                    .collect(),
            }],
            excluded: vec![],
            format: SourceFormat::Wide,
        };
        let (ds, _) = resample_hourly(&raw, Region::Custom).unwrap();
        assert_eq!(ds.num_hours(), 30);
        for (t, &v) in values.iter().enumerate() {
            assert_eq!(ds.value(t, 0), v);
        }
    }

    #[test]
    fn three_years_of_half_hours_resample_to_26304_hours() {
        // 2010-07-01 .. 2013-06-30 inclusive covers one leap day:
        // 3 * 365 * 24 + 24 = 26304 hourly rows
        let start = NaiveDate::from_ymd_opt(2010, 7, 1).unwrap();
        let end = NaiveDate::from_ymd_opt(2013, 6, 30).unwrap();
        let n_days = (end - start).num_days() + 1;
        let mut points = Vec::with_capacity((n_days * 48) as usize);
        let midnight = start.and_hms_opt(0, 0, 0).unwrap();
        for i in 0..n_days * 48 {
            points.push((midnight + Duration::minutes(30 * i), 0.25));
        }
        let raw = RawDataset {
            clients: vec![RawClient { id: "1".into(), points }],
            excluded: vec![],
            format: SourceFormat::AusgridLong,
        };
        let (ds, _) = resample_hourly(&raw, Region::NewSouthWales).unwrap();
        assert_eq!(ds.num_hours(), 26_304);
    }

    #[test]
    fn clients_align_to_intersection_and_gapped_clients_drop() {
        let mk = |start_h: i64, n: usize, skip: Option<usize>| -> Vec<(NaiveDateTime, f64)> {
            (0..n)
                .filter(|&i| Some(i) != skip)
                .map(|i| (dt(2012, 1, 1, 0, 0) + Duration::hours(start_h + i as i64), 1.0 + i as f64))
                .collect()
        };
        let raw = RawDataset {
            clients: vec![
                RawClient { id: "A".into(), points: mk(0, 30, None) },
                RawClient { id: "B".into(), points: mk(2, 30, None) },
                RawClient { id: "C".into(), points: mk(0, 30, Some(10)) },
            ],
            excluded: vec![],
            format: SourceFormat::Wide,
        };
        let (ds, report) = resample_hourly(&raw, Region::Custom).unwrap();
        // intersection: hours 2..=29 of A's range
        assert_eq!(ds.num_hours(), 28);
        assert_eq!(ds.num_clients(), 2);
        assert_eq!(report.dropped.len(), 1);
        assert_eq!(report.dropped[0].client_id, "C");
    }

    #[test]
    fn disjoint_ranges_are_an_error() {
        let raw = RawDataset {
            clients: vec![
                RawClient {
                    id: "A".into(),
                    points: (0..25)
                        .map(|i| (dt(2012, 1, 1, 0, 0) + Duration::hours(i), 1.0))
                        .collect(),
                },
                RawClient {
                    id: "B".into(),
                    points: (0..25)
                        .map(|i| (dt(2013, 1, 1, 0, 0) + Duration::hours(i), 1.0))
                        .collect(),
                },
            ],
            excluded: vec![],
            format: SourceFormat::Wide,
        };
        assert!(matches!(
            resample_hourly(&raw, Region::Custom),
            Err(IngestError::NoCommonTimeRange)
        ));
    }

    #[test]
    fn off_grid_timestamps_are_rejected_as_inconsistent() {
        let mut points: Vec<(NaiveDateTime, f64)> = (0..10)
            .map(|i| (dt(2012, 1, 1, 0, 0) + Duration::hours(i), 1.0))
            .collect();
        points.push((dt(2012, 1, 1, 10, 15), 1.0));
        let raw = RawDataset {
            clients: vec![RawClient { id: "M".into(), points }],
            excluded: vec![],
            format: SourceFormat::Wide,
        };
        assert!(matches!(
            resample_hourly(&raw, Region::Custom),
            Err(IngestError::InconsistentResolution { .. })
        ));
    }

    #[test]
    fn gap_within_a_clients_own_span_drops_the_client() {
        let points: Vec<(NaiveDateTime, f64)> = (0..30)
            .filter(|&i| i != 7)
            .map(|i| (dt(2012, 1, 1, 0, 0) + Duration::hours(i), 1.0 + i as f64))
            .collect();
        let good: Vec<(NaiveDateTime, f64)> = (0..30)
            .map(|i| (dt(2012, 1, 1, 0, 0) + Duration::hours(i), 2.0))
            .collect();
        let raw = RawDataset {
            clients: vec![
                RawClient { id: "gappy".into(), points },
                RawClient { id: "good".into(), points: good },
            ],
            excluded: vec![],
            format: SourceFormat::Wide,
        };
        let (ds, report) = resample_hourly(&raw, Region::Custom).unwrap();
        assert_eq!(ds.num_clients(), 1);
        assert_eq!(report.dropped.len(), 1);
        assert_eq!(report.dropped[0].client_id, "gappy");
    }

    #[test]
    fn split_boundaries_follow_floor_arithmetic() {
        let split = split_dataset(synthetic_hourly(26_304, 2)).unwrap();
        assert_eq!(split.train_range().len(), 18_412);
        assert_eq!(split.val_range().len(), 2_630);
        assert_eq!(split.test_range().len(), 5_262);

        let split = split_dataset(synthetic_hourly(10, 1)).unwrap();
        assert_eq!(split.train_range().len(), 7);
        assert_eq!(split.val_range().len(), 1);
        assert_eq!(split.test_range().len(), 2);
    }

    #[test]
    fn too_short_to_split() {
        let err = split_dataset(synthetic_hourly(9, 1)).unwrap_err();
        assert!(matches!(err, IngestError::TooShort { rows: 9, min: 10 }));
    }

    #[test]
    fn two_point_standardization_uses_population_convention() {
        // train {1, 3} -> mean 2, std 1, standardized {-1, +1}
        let values = vec![1.0, 3.0, 2.0, 5.0, 4.0, 6.0, 7.0, 8.0, 9.0, 10.0];
        let timestamps = (0..10)
            .map(|i| dt(2012, 1, 1, 0, 0) + Duration::hours(i))
            .collect();
        let ds =
            HourlyDataset::from_parts(values, timestamps, vec!["A".into()], Region::Custom)
                .unwrap();
        // force a 2-row train range by splitting manually
        let split = SplitDataset {
            data: ds,
            train_end: 2,
            val_end: 3,
        };
        let scaler = fit_standardizer(&split).unwrap();
        assert_eq!(scaler.mean, vec![2.0]);
        assert_eq!(scaler.std, vec![1.0]);
        let std = apply_standardizer(split, scaler);
        assert_eq!(std.data().value(0, 0), -1.0);
        assert_eq!(std.data().value(1, 0), 1.0);
    }

    #[test]
    fn standardize_then_invert_round_trips() {
        let ds = synthetic_hourly(200, 3);
        let original = ds.values().to_vec();
        let std = standardize(ds).unwrap();
        let back = std.invert();
        for (a, b) in original.iter().zip(back.data().values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn standardized_train_range_has_zero_mean_unit_std() {
        let std = standardize(synthetic_hourly(500, 4)).unwrap();
        let n = std.split().train_range().len() as f64;
        for c in 0..4 {
            let mut mean = 0.0;
            for t in std.split().train_range() {
                mean += std.data().value(t, c);
            }
            mean /= n;
            let mut var = 0.0;
            for t in std.split().train_range() {
                let d = std.data().value(t, c) - mean;
                var += d * d;
            }
            let sd = (var / n).sqrt();
            assert!(mean.abs() < 1e-9, "client {c} mean {mean}");
            assert!((sd - 1.0).abs() < 1e-9, "client {c} std {sd}");
        }
    }

    #[test]
    fn constant_training_series_is_rejected() {
        let mut values = vec![5.0; 100];
        // variation only after the train boundary
        for v in values.iter_mut().skip(90) {
            *v = 6.0;
        }
        let timestamps = (0..100)
            .map(|i| dt(2012, 1, 1, 0, 0) + Duration::hours(i))
            .collect();
        let ds =
            HourlyDataset::from_parts(values, timestamps, vec!["K".into()], Region::Custom)
                .unwrap();
        let split = split_dataset(ds).unwrap();
        assert!(matches!(
            fit_standardizer(&split),
            Err(IngestError::ConstantSeries(id)) if id == "K"
        ));
    }

    #[test]
    fn canonical_csv_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("canon.csv");
        let ds = synthetic_hourly(48, 3);
        write_wide_csv(&ds, &path).unwrap();
        let raw = load_raw_csv(&path, SourceFormat::Wide).unwrap();
        let (back, _) = resample_hourly(&raw, Region::Custom).unwrap();
        assert_eq!(back.num_hours(), 48);
        assert_eq!(back.values(), ds.values());
        assert_eq!(back.client_ids(), ds.client_ids());
    }

    #[test]
    fn content_hash_tracks_values() {
        let a = synthetic_hourly(48, 2);
        let mut values = a.values().to_vec();
        values[0] += 1.0;
        let b = HourlyDataset::from_parts(
            values,
            a.timestamps().to_vec(),
            a.client_ids().to_vec(),
            Region::Custom,
        )
        .unwrap();
        assert_ne!(a.content_hash(), b.content_hash());
        assert_eq!(a.content_hash(), a.clone().content_hash());
    }
}
