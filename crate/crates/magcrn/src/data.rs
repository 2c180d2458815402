//! Dataset ingestion and window construction.
//!
//! The on-disk format is a single CSV with one row per (timestamp, station):
//!
//! ```text
//! timestamp,station_id,no2,wind_speed,wind_dir,temperature,rel_humidity,pressure,solar_irradiance,traffic_intensity,traffic_occupancy,traffic_load,traffic_speed
//! ```
//!
//! Timestamps are ISO-8601 `YYYY-MM-DDThh:00:00` on a uniform hourly grid,
//! rows are sorted by (timestamp, station_id), and an empty field marks a
//! missing value. Ingestion validates the grid, imputes missing cells
//! (forward fill, then the channel's train-segment mean for leading gaps),
//! and reports what it imputed.

use std::fmt;
use std::io::Write;
use std::path::Path;

use chrono::{Datelike, NaiveDateTime, Timelike};

use crate::tensor::Tensor;

/// Target channel name.
pub const TARGET_CHANNEL: &str = "no2";

/// Physical data channels, in schema order (target first).
pub const DATA_CHANNELS: [&str; 11] = [
    "no2",
    "wind_speed",
    "wind_dir",
    "temperature",
    "rel_humidity",
    "pressure",
    "solar_irradiance",
    "traffic_intensity",
    "traffic_occupancy",
    "traffic_load",
    "traffic_speed",
];

/// Calendar channels synthesized from timestamps.
pub const CALENDAR_CHANNELS: [&str; 4] = ["cal_hour_sin", "cal_hour_cos", "cal_dow_sin", "cal_dow_cos"];

/// Exact CSV header line.
pub const CSV_HEADER: &str = "timestamp,station_id,no2,wind_speed,wind_dir,temperature,\
rel_humidity,pressure,solar_irradiance,traffic_intensity,traffic_occupancy,traffic_load,traffic_speed";

const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";
/// Share of the timeline used for the training split.
pub const TRAIN_RATIO: f64 = 0.7;
/// Share of the timeline covered by training plus validation; the 7:2:1
/// split boundaries are floor(0.7 T) and floor(0.9 T).
pub const TRAIN_VAL_RATIO: f64 = 0.9;

#[derive(Debug)]
pub enum DataError {
    /// Header or field layout does not match the documented schema.
    SchemaError(String),
    /// Rows do not form a uniform hourly grid aligned across stations.
    GridError(String),
    EmptyDataset,
    /// A split or window request needs more hours than are available.
    TooShort { needed: usize, got: usize },
    /// A channel is constant on the training split and cannot be z-scored.
    ConstantChannel(String),
    /// A channel has no observed value at all.
    AllMissing(String),
    UnknownChannel(String),
    Io(std::io::Error),
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::SchemaError(msg) => write!(f, "schema error: {msg}"),
            DataError::GridError(msg) => write!(f, "grid error: {msg}"),
            DataError::EmptyDataset => write!(f, "dataset contains no rows"),
            DataError::TooShort { needed, got } => {
                write!(f, "too short: need at least {needed} hours, got {got}")
            }
            DataError::ConstantChannel(name) => {
                write!(f, "channel '{name}' is constant on the training split")
            }
            DataError::AllMissing(name) => write!(f, "channel '{name}' has no observed values"),
            DataError::UnknownChannel(name) => write!(f, "unknown channel '{name}'"),
            DataError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for DataError {}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io(e)
    }
}

/// Hourly multi-channel series for a set of stations over a common time
/// range. Values are stored per channel, per station, contiguous in time.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub timestamps: Vec<NaiveDateTime>,
    pub station_ids: Vec<String>,
    pub channels: Vec<String>,
    values: Vec<f64>,
}

impl RawDataset {
    pub fn new(
        timestamps: Vec<NaiveDateTime>,
        station_ids: Vec<String>,
        channels: Vec<String>,
        values: Vec<f64>,
    ) -> Self {
        assert_eq!(values.len(), timestamps.len() * station_ids.len() * channels.len());
        RawDataset { timestamps, station_ids, channels, values }
    }

    pub fn len_hours(&self) -> usize {
        self.timestamps.len()
    }

    pub fn n_stations(&self) -> usize {
        self.station_ids.len()
    }

    pub fn channel_index(&self, name: &str) -> Result<usize, DataError> {
        self.channels
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| DataError::UnknownChannel(name.to_string()))
    }

    fn series_offset(&self, channel: usize, station: usize) -> usize {
        (channel * self.n_stations() + station) * self.len_hours()
    }

    /// One (channel, station) series, contiguous in time.
    pub fn series(&self, channel: usize, station: usize) -> &[f64] {
        let start = self.series_offset(channel, station);
        &self.values[start..start + self.len_hours()]
    }

    fn series_mut(&mut self, channel: usize, station: usize) -> &mut [f64] {
        let start = self.series_offset(channel, station);
        let len = self.len_hours();
        &mut self.values[start..start + len]
    }

    pub fn value(&self, channel: usize, station: usize, t: usize) -> f64 {
        self.values[self.series_offset(channel, station) + t]
    }

    /// Copy of the dataset restricted to `[start, end)` on the time axis.
    pub fn slice_time(&self, start: usize, end: usize) -> RawDataset {
        let mut values =
            Vec::with_capacity(self.channels.len() * self.n_stations() * (end - start));
        for c in 0..self.channels.len() {
            for s in 0..self.n_stations() {
                values.extend_from_slice(&self.series(c, s)[start..end]);
            }
        }
        RawDataset {
            timestamps: self.timestamps[start..end].to_vec(),
            station_ids: self.station_ids.clone(),
            channels: self.channels.clone(),
            values,
        }
    }

    /// Append the four calendar channels, identical for every station.
    pub fn with_calendar_channels(&self) -> RawDataset {
        let cal = calendar_features(&self.timestamps);
        let mut channels = self.channels.clone();
        let mut values = self.values.clone();
        for (k, name) in CALENDAR_CHANNELS.iter().enumerate() {
            channels.push(name.to_string());
            for _station in 0..self.n_stations() {
                values.extend(cal.iter().map(|row| row[k]));
            }
        }
        RawDataset {
            timestamps: self.timestamps.clone(),
            station_ids: self.station_ids.clone(),
            channels,
            values,
        }
    }
}

/// What ingestion had to impute.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestReport {
    pub rows: usize,
    pub missing_count: usize,
    /// Missing cells per channel, in schema order.
    pub missing_by_channel: Vec<(String, usize)>,
    /// Cells filled from the train-segment mean because the series started
    /// with a gap.
    pub leading_fill_count: usize,
}

/// Parse and validate the station-network CSV.
pub fn load_csv(path: &Path) -> Result<(RawDataset, IngestReport), DataError> {
    let file = std::fs::File::open(path)?;
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(file);
    let mut records = reader.records();

    let header = match records.next() {
        Some(rec) => rec.map_err(|e| DataError::SchemaError(e.to_string()))?,
        None => return Err(DataError::EmptyDataset),
    };
    let expected: Vec<&str> = CSV_HEADER.split(',').collect();
    let got: Vec<&str> = header.iter().collect();
    if got != expected {
        return Err(DataError::SchemaError(format!(
            "header mismatch: expected '{}', got '{}'",
            expected.join(","),
            got.join(",")
        )));
    }

    struct Row {
        ts: NaiveDateTime,
        station: String,
        fields: Vec<Option<f64>>,
    }
    let mut rows: Vec<Row> = Vec::new();
    for (line_no, rec) in records.enumerate() {
        let rec = rec.map_err(|e| DataError::SchemaError(e.to_string()))?;
        if rec.len() != 2 + DATA_CHANNELS.len() {
            return Err(DataError::SchemaError(format!(
                "row {}: expected {} fields, got {}",
                line_no + 2,
                2 + DATA_CHANNELS.len(),
                rec.len()
            )));
        }
        let ts = NaiveDateTime::parse_from_str(&rec[0], TIMESTAMP_FORMAT).map_err(|e| {
            DataError::SchemaError(format!("row {}: bad timestamp '{}': {e}", line_no + 2, &rec[0]))
        })?;
        let mut fields = Vec::with_capacity(DATA_CHANNELS.len());
        for i in 0..DATA_CHANNELS.len() {
            let raw = &rec[2 + i];
            if raw.is_empty() {
                fields.push(None);
            } else {
                let v: f64 = raw.parse().map_err(|_| {
                    DataError::SchemaError(format!(
                        "row {}: field '{}' is not a number",
                        line_no + 2,
                        raw
                    ))
                })?;
                fields.push(Some(v));
            }
        }
        rows.push(Row { ts, station: rec[1].to_string(), fields });
    }
    if rows.is_empty() {
        return Err(DataError::EmptyDataset);
    }

    let mut station_ids: Vec<String> = rows.iter().map(|r| r.station.clone()).collect();
    station_ids.sort();
    station_ids.dedup();
    let mut timestamps: Vec<NaiveDateTime> = rows.iter().map(|r| r.ts).collect();
    timestamps.sort();
    timestamps.dedup();

    for pair in timestamps.windows(2) {
        if (pair[1] - pair[0]).num_seconds() != 3600 {
            return Err(DataError::GridError(format!(
                "timestamps are not a uniform hourly grid around {}",
                pair[0]
            )));
        }
    }
    if rows.len() != timestamps.len() * station_ids.len() {
        return Err(DataError::GridError(format!(
            "expected {} rows for {} hours x {} stations, got {} (duplicate or missing rows)",
            timestamps.len() * station_ids.len(),
            timestamps.len(),
            station_ids.len(),
            rows.len()
        )));
    }

    let t_len = timestamps.len();
    let s_len = station_ids.len();
    let c_len = DATA_CHANNELS.len();
    let mut cells: Vec<Option<f64>> = vec![None; c_len * s_len * t_len];
    let mut seen = vec![false; s_len * t_len];
    for row in &rows {
        let t = timestamps.binary_search(&row.ts).expect("timestamp collected above");
        let s = station_ids.binary_search(&row.station).expect("station collected above");
        if seen[s * t_len + t] {
            return Err(DataError::GridError(format!(
                "duplicate row for ({}, {})",
                row.ts, row.station
            )));
        }
        seen[s * t_len + t] = true;
        for (c, v) in row.fields.iter().enumerate() {
            cells[(c * s_len + s) * t_len + t] = *v;
        }
    }

    // Impute: forward fill per series, then the channel's train-segment mean
    // for any leading gap.
    let train_end = (TRAIN_RATIO * t_len as f64).floor() as usize;
    let mut report = IngestReport { rows: rows.len(), ..Default::default() };
    let mut values = vec![0.0; c_len * s_len * t_len];
    for (c, channel) in DATA_CHANNELS.iter().enumerate() {
        let mut missing = 0usize;
        let mut train_sum = 0.0;
        let mut train_n = 0usize;
        for s in 0..s_len {
            for t in 0..train_end {
                if let Some(v) = cells[(c * s_len + s) * t_len + t] {
                    train_sum += v;
                    train_n += 1;
                }
            }
        }
        let fallback_mean = if train_n > 0 {
            train_sum / train_n as f64
        } else {
            // No observation in the train segment; fall back to the whole
            // series before giving up.
            let mut sum = 0.0;
            let mut n = 0usize;
            for s in 0..s_len {
                for t in 0..t_len {
                    if let Some(v) = cells[(c * s_len + s) * t_len + t] {
                        sum += v;
                        n += 1;
                    }
                }
            }
            if n == 0 {
                return Err(DataError::AllMissing(channel.to_string()));
            }
            sum / n as f64
        };
        for s in 0..s_len {
            let mut last: Option<f64> = None;
            for t in 0..t_len {
                let slot = (c * s_len + s) * t_len + t;
                match cells[slot] {
                    Some(v) => {
                        values[slot] = v;
                        last = Some(v);
                    }
                    None => {
                        missing += 1;
                        values[slot] = match last {
                            Some(v) => v,
                            None => {
                                report.leading_fill_count += 1;
                                fallback_mean
                            }
                        };
                    }
                }
            }
        }
        report.missing_count += missing;
        report.missing_by_channel.push((channel.to_string(), missing));
    }

    let channels = DATA_CHANNELS.iter().map(|c| c.to_string()).collect();
    Ok((RawDataset::new(timestamps, station_ids, channels, values), report))
}

/// Write a dataset back out in the exact schema. Only the physical data
/// channels are written; calendar channels are derived, not stored.
pub fn write_csv(dataset: &RawDataset, path: &Path) -> Result<(), DataError> {
    let mut chan_idx = Vec::with_capacity(DATA_CHANNELS.len());
    for name in DATA_CHANNELS {
        chan_idx.push(dataset.channel_index(name)?);
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{CSV_HEADER}")?;
    let mut order: Vec<usize> = (0..dataset.n_stations()).collect();
    order.sort_by(|&a, &b| dataset.station_ids[a].cmp(&dataset.station_ids[b]));
    for (t, ts) in dataset.timestamps.iter().enumerate() {
        for &s in &order {
            write!(out, "{},{}", ts.format(TIMESTAMP_FORMAT), dataset.station_ids[s])?;
            for &c in &chan_idx {
                write!(out, ",{}", dataset.value(c, s, t))?;
            }
            writeln!(out)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Calendar covariates per timestamp:
/// `[sin(2*pi*hour/24), cos(2*pi*hour/24), sin(2*pi*dow/7), cos(2*pi*dow/7)]`
/// with Monday as day 0.
pub fn calendar_features(timestamps: &[NaiveDateTime]) -> Vec<[f64; 4]> {
    use std::f64::consts::TAU;
    timestamps
        .iter()
        .map(|ts| {
            let hour = ts.hour() as f64;
            let dow = ts.weekday().num_days_from_monday() as f64;
            [
                (TAU * hour / 24.0).sin(),
                (TAU * hour / 24.0).cos(),
                (TAU * dow / 7.0).sin(),
                (TAU * dow / 7.0).cos(),
            ]
        })
        .collect()
}

/// Contiguous chronological train/validation/test segments with boundaries
/// at `floor(0.7 T)` and `floor(0.9 T)`.
pub fn chronological_split(
    dataset: &RawDataset,
) -> Result<(RawDataset, RawDataset, RawDataset), DataError> {
    let t_len = dataset.len_hours();
    let b1 = (TRAIN_RATIO * t_len as f64).floor() as usize;
    let b2 = (TRAIN_VAL_RATIO * t_len as f64).floor() as usize;
    if b1 == 0 || b2 <= b1 || t_len <= b2 {
        return Err(DataError::TooShort { needed: 10, got: t_len });
    }
    Ok((
        dataset.slice_time(0, b1),
        dataset.slice_time(b1, b2),
        dataset.slice_time(b2, t_len),
    ))
}

/// Per-channel z-score statistics fitted on the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub channels: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn fit_normalizer(train: &RawDataset) -> Result<Normalizer, DataError> {
    let t_len = train.len_hours();
    let s_len = train.n_stations();
    let n = (t_len * s_len) as f64;
    let mut mean = Vec::with_capacity(train.channels.len());
    let mut std = Vec::with_capacity(train.channels.len());
    for c in 0..train.channels.len() {
        let mut sum = 0.0;
        for s in 0..s_len {
            sum += train.series(c, s).iter().sum::<f64>();
        }
        let m = sum / n;
        let mut var = 0.0;
        for s in 0..s_len {
            var += train.series(c, s).iter().map(|v| (v - m) * (v - m)).sum::<f64>();
        }
        let sd = (var / n).sqrt();
        if sd < 1e-12 {
            return Err(DataError::ConstantChannel(train.channels[c].clone()));
        }
        mean.push(m);
        std.push(sd);
    }
    Ok(Normalizer { channels: train.channels.clone(), mean, std })
}

impl Normalizer {
    /// Z-score every channel of a dataset with the fitted statistics.
    pub fn apply(&self, dataset: &RawDataset) -> Result<RawDataset, DataError> {
        let mut out = dataset.clone();
        for (c, name) in dataset.channels.iter().enumerate() {
            let idx = self
                .channels
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| DataError::UnknownChannel(name.clone()))?;
            let (m, sd) = (self.mean[idx], self.std[idx]);
            for s in 0..dataset.n_stations() {
                for v in out.series_mut(c, s) {
                    *v = (*v - m) / sd;
                }
            }
        }
        Ok(out)
    }

    fn target_stats(&self) -> (f64, f64) {
        let idx = self
            .channels
            .iter()
            .position(|n| n == TARGET_CHANNEL)
            .expect("normalizer fitted on a dataset with a target channel");
        (self.mean[idx], self.std[idx])
    }

    /// Map normalized target values back to original units.
    pub fn invert_target(&self, values: &[f64]) -> Vec<f64> {
        let (m, sd) = self.target_stats();
        values.iter().map(|v| v * sd + m).collect()
    }

    /// Standard deviation of the target channel in original units.
    pub fn target_std(&self) -> f64 {
        self.target_stats().1
    }
}

/// Which channels feed the past and the future conditioning branch.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateSpec {
    pub past_channels: Vec<String>,
    pub future_channels: Vec<String>,
}

impl Default for CovariateSpec {
    /// Past: the four traffic channels plus calendar. Future: the six
    /// weather channels plus calendar.
    fn default() -> Self {
        let mut past: Vec<String> = ["traffic_intensity", "traffic_occupancy", "traffic_load", "traffic_speed"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut future: Vec<String> = ["wind_speed", "wind_dir", "temperature", "rel_humidity", "pressure", "solar_irradiance"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for cal in CALENDAR_CHANNELS {
            past.push(cal.to_string());
            future.push(cal.to_string());
        }
        CovariateSpec { past_channels: past, future_channels: future }
    }
}

impl CovariateSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        for list in [&self.past_channels, &self.future_channels] {
            if list.iter().any(|c| c == TARGET_CHANNEL) {
                return Err(DataError::SchemaError(format!(
                    "target channel '{TARGET_CHANNEL}' cannot be a covariate"
                )));
            }
        }
        for p in &self.past_channels {
            if self.future_channels.contains(p) && !CALENDAR_CHANNELS.contains(&p.as_str()) {
                return Err(DataError::SchemaError(format!(
                    "channel '{p}' appears in both covariate lists but is not a calendar channel"
                )));
            }
        }
        Ok(())
    }
}

/// One training or evaluation item.
///
/// `x_past`/`u_past` cover hours `[t0-W+1, t0]`; `u_future`/`x_future` cover
/// `[t0+delta+1, t0+delta+H]`.
#[derive(Debug, Clone)]
pub struct WindowSample {
    /// `N x W` target history.
    pub x_past: Tensor,
    /// `N x W x P` past covariates.
    pub u_past: Tensor,
    /// `N x H x F` future covariates.
    pub u_future: Tensor,
    /// `N x H` target future.
    pub x_future: Tensor,
    pub t0_index: usize,
    pub delta: usize,
}

/// Number of windows a split of length `len` yields.
pub fn window_count(len: usize, window: usize, horizon: usize, delta: usize) -> Option<usize> {
    (len + 1).checked_sub(window + delta + horizon)
}

/// Build every stride-1 window of a split. Samples never cross the split's
/// boundaries by construction.
pub fn make_windows(
    split: &RawDataset,
    spec: &CovariateSpec,
    window: usize,
    horizon: usize,
    delta: usize,
) -> Result<Vec<WindowSample>, DataError> {
    spec.validate()?;
    let len = split.len_hours();
    let count = match window_count(len, window, horizon, delta) {
        Some(c) if c > 0 => c,
        _ => return Err(DataError::TooShort { needed: window + delta + horizon, got: len }),
    };
    let target = split.channel_index(TARGET_CHANNEL)?;
    let past_idx: Vec<usize> = self::indices(split, &spec.past_channels)?;
    let future_idx: Vec<usize> = self::indices(split, &spec.future_channels)?;
    let stations = split.n_stations();

    let mut samples = Vec::with_capacity(count);
    for t0 in (window - 1)..(window - 1 + count) {
        let past_start = t0 + 1 - window;
        let future_start = t0 + delta + 1;

        let mut x_past = Vec::with_capacity(stations * window);
        let mut x_future = Vec::with_capacity(stations * horizon);
        for s in 0..stations {
            x_past.extend_from_slice(&split.series(target, s)[past_start..past_start + window]);
            x_future
                .extend_from_slice(&split.series(target, s)[future_start..future_start + horizon]);
        }

        let mut u_past = Vec::with_capacity(stations * window * past_idx.len());
        for s in 0..stations {
            for w in 0..window {
                for &c in &past_idx {
                    u_past.push(split.value(c, s, past_start + w));
                }
            }
        }
        let mut u_future = Vec::with_capacity(stations * horizon * future_idx.len());
        for s in 0..stations {
            for h in 0..horizon {
                for &c in &future_idx {
                    u_future.push(split.value(c, s, future_start + h));
                }
            }
        }

        samples.push(WindowSample {
            x_past: Tensor::from_vec(vec![stations, window], x_past).expect("sizes agree"),
            u_past: Tensor::from_vec(vec![stations, window, past_idx.len()], u_past)
                .expect("sizes agree"),
            u_future: Tensor::from_vec(vec![stations, horizon, future_idx.len()], u_future)
                .expect("sizes agree"),
            x_future: Tensor::from_vec(vec![stations, horizon], x_future).expect("sizes agree"),
            t0_index: t0,
            delta,
        });
    }
    Ok(samples)
}

fn indices(split: &RawDataset, names: &[String]) -> Result<Vec<usize>, DataError> {
    names.iter().map(|n| split.channel_index(n)).collect()
}
