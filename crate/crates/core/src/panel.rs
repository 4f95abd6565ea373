//! Multivariate series panels: event-log ingestion, bucketed aggregation,
//! transforms, standardization and train/validation/test splits.
//!
//! A [`SeriesPanel`] stores `n` series over `T` equally spaced buckets as an
//! `n × T` matrix; column `t` is the observation vector `y_t`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, SecondsFormat, TimeZone, Utc};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PanelError {
    #[error("line {line}: cannot parse timestamp `{value}`")]
    Timestamp { line: usize, value: String },
    #[error("line {line}: event at {timestamp} lies outside the aggregation window")]
    OutsideWindow { line: usize, timestamp: String },
    #[error("line {line}: unknown target `{target}`")]
    UnknownTarget { line: usize, target: String },
    #[error("event log is empty")]
    EmptyLog,
    #[error("window of {window_secs}s is not a positive multiple of the {bucket_secs}s bucket")]
    UnevenWindow { window_secs: i64, bucket_secs: i64 },
    #[error("panel is already log-transformed")]
    AlreadyTransformed,
    #[error("panel contains a negative value {value} in series `{series}`")]
    Negative { series: String, value: f64 },
    #[error("series `{0}` is constant over the training segment")]
    DegenerateSeries(String),
    #[error("invalid split: {0}")]
    Split(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("panel csv: {0}")]
    Format(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Aggregation bucket width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bucket {
    Hour,
    Day,
}

impl Bucket {
    pub fn seconds(self) -> i64 {
        match self {
            Bucket::Hour => 3_600,
            Bucket::Day => 86_400,
        }
    }
}

/// Bucket labels. Index axes count `start, start + step, ...`; UTC axes hold
/// unix seconds of each left-closed bucket start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimeAxis {
    Index { start: i64, step: i64 },
    Utc { start: i64, step: i64 },
}

impl TimeAxis {
    pub fn index() -> Self {
        TimeAxis::Index { start: 0, step: 1 }
    }

    pub fn label(&self, t: usize) -> i64 {
        match *self {
            TimeAxis::Index { start, step } | TimeAxis::Utc { start, step } => start + step * t as i64,
        }
    }

    pub fn format(&self, t: usize) -> String {
        match self {
            TimeAxis::Index { .. } => self.label(t).to_string(),
            TimeAxis::Utc { .. } => Utc
                .timestamp_opt(self.label(t), 0)
                .single()
                .map(|d| d.to_rfc3339_opts(SecondsFormat::Secs, true))
                .unwrap_or_default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    /// Non-negative counts.
    Raw,
    Log1p,
    /// Real-valued series with no sign restriction (simulated or external data).
    Real,
}

/// `n × T` panel of series values.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesPanel {
    names: Vec<String>,
    axis: TimeAxis,
    values: DMatrix<f64>,
    transform: Transform,
}

impl SeriesPanel {
    pub fn new(
        names: Vec<String>,
        axis: TimeAxis,
        values: DMatrix<f64>,
        transform: Transform,
    ) -> Result<Self, PanelError> {
        if names.is_empty() || values.ncols() == 0 {
            return Err(PanelError::Shape("panel needs at least one series and one time point".into()));
        }
        if names.len() != values.nrows() {
            return Err(PanelError::Shape(format!(
                "{} names for {} rows",
                names.len(),
                values.nrows()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(PanelError::Shape(format!("non-finite cell {v}")));
        }
        if transform == Transform::Raw {
            for (i, name) in names.iter().enumerate() {
                if let Some(&v) = values.row(i).iter().find(|v| **v < 0.0) {
                    return Err(PanelError::Negative { series: name.clone(), value: v });
                }
            }
        }
        Ok(Self { names, axis, values, transform })
    }

    /// Panel on an index axis with no sign restriction (simulated or transformed data).
    pub fn from_rows(names: Vec<String>, values: DMatrix<f64>) -> Result<Self, PanelError> {
        Self::new(names, TimeAxis::index(), values, Transform::Real)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn axis(&self) -> TimeAxis {
        self.axis
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn transform(&self) -> Transform {
        self.transform
    }

    pub fn n_series(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.ncols() == 0
    }

    /// Observation vector `y_t`.
    pub fn column(&self, t: usize) -> DVector<f64> {
        self.values.column(t).into_owned()
    }

    /// Lag window `(y_{t-p}, …, y_{t-1})` as an `n × p` matrix, oldest column first.
    pub fn window(&self, t: usize, p: usize) -> DMatrix<f64> {
        assert!(t >= p && t <= self.len(), "window ({t}, {p}) out of range");
        self.values.columns(t - p, p).into_owned()
    }

    /// Copy of columns `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> SeriesPanel {
        let axis = match self.axis {
            TimeAxis::Index { start: s, step } => TimeAxis::Index { start: s + step * start as i64, step },
            TimeAxis::Utc { start: s, step } => TimeAxis::Utc { start: s + step * start as i64, step },
        };
        SeriesPanel {
            names: self.names.clone(),
            axis,
            values: self.values.columns(start, end - start).into_owned(),
            transform: self.transform,
        }
    }

    pub fn with_values(&self, values: DMatrix<f64>) -> SeriesPanel {
        assert_eq!(values.shape(), self.values.shape());
        SeriesPanel { values, ..self.clone() }
    }

    /// Panel CSV: `time` column followed by one column per series.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), PanelError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["time".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        for t in 0..self.len() {
            let mut row = vec![self.axis.format(t)];
            row.extend(self.values.column(t).iter().map(|&v| format_sig12(v)));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self, PanelError> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        if header.get(0) != Some("time") || header.len() < 2 {
            return Err(PanelError::Format("header must start with `time` and name at least one series".into()));
        }
        let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut labels = Vec::new();
        let mut cols: Vec<Vec<f64>> = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            if rec.len() != names.len() + 1 {
                return Err(PanelError::Format(format!("line {line}: expected {} fields", names.len() + 1)));
            }
            labels.push(rec[0].to_string());
            let row = rec
                .iter()
                .skip(1)
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| PanelError::Format(format!("line {line}: {e}")))?;
            cols.push(row);
        }
        if cols.is_empty() {
            return Err(PanelError::Format("no data rows".into()));
        }
        let axis = parse_axis(&labels)?;
        let n = names.len();
        let values = DMatrix::from_fn(n, cols.len(), |i, t| cols[t][i]);
        let transform = if values.iter().any(|v| *v < 0.0) { Transform::Real } else { Transform::Raw };
        SeriesPanel::new(names, axis, values, transform)
    }

    pub fn read_csv_path(path: &Path) -> Result<Self, PanelError> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn write_csv_path(&self, path: &Path) -> Result<(), PanelError> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Overrides the transform tag, e.g. for a panel read from disk that is already on the log scale.
    pub fn assume_transform(mut self, transform: Transform) -> Self {
        self.transform = transform;
        self
    }
}

fn parse_axis(labels: &[String]) -> Result<TimeAxis, PanelError> {
    let bad_spacing = || PanelError::Format("time column must be strictly increasing and equally spaced".into());
    if let Ok(ints) = labels.iter().map(|s| s.trim().parse::<i64>()).collect::<Result<Vec<_>, _>>() {
        let step = if ints.len() > 1 { ints[1] - ints[0] } else { 1 };
        if step <= 0 || ints.windows(2).any(|w| w[1] - w[0] != step) {
            return Err(bad_spacing());
        }
        return Ok(TimeAxis::Index { start: ints[0], step });
    }
    let secs = labels
        .iter()
        .enumerate()
        .map(|(i, s)| {
            DateTime::parse_from_rfc3339(s.trim())
                .map(|d| d.timestamp())
                .map_err(|_| PanelError::Timestamp { line: i + 2, value: s.clone() })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let step = if secs.len() > 1 { secs[1] - secs[0] } else { 86_400 };
    if step <= 0 || secs.windows(2).any(|w| w[1] - w[0] != step) {
        return Err(bad_spacing());
    }
    Ok(TimeAxis::Utc { start: secs[0], step })
}

/// Decimal text rounded to 12 significant digits.
pub fn format_sig12(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    let rounded: f64 = format!("{x:.11e}").parse().expect("formatted float parses");
    format!("{rounded}")
}

/// One row of an event log.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub timestamp: DateTime<Utc>,
    pub target: String,
}

#[derive(Debug, Clone, Default)]
pub struct EventLog {
    pub records: Vec<Event>,
}

impl EventLog {
    /// Reads `timestamp,target` CSV with RFC-3339 timestamps; extra columns are ignored.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self, PanelError> {
        let mut r = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
        let header = r.headers()?.clone();
        let ts_col = header.iter().position(|h| h == "timestamp");
        let tg_col = header.iter().position(|h| h == "target");
        let (Some(ts_col), Some(tg_col)) = (ts_col, tg_col) else {
            return Err(PanelError::Format("event csv needs `timestamp` and `target` columns".into()));
        };
        let mut records = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let raw = rec.get(ts_col).unwrap_or("");
            let timestamp = DateTime::parse_from_rfc3339(raw.trim())
                .map_err(|_| PanelError::Timestamp { line, value: raw.to_string() })?
                .with_timezone(&Utc);
            let target = rec.get(tg_col).unwrap_or("").trim().to_string();
            records.push(Event { timestamp, target });
        }
        Ok(Self { records })
    }

    /// Sorted distinct targets.
    pub fn targets(&self) -> Vec<String> {
        self.records.iter().map(|e| e.target.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    }
}

#[derive(Debug, Clone)]
pub struct AggregateOptions {
    pub bucket: Bucket,
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
    /// Declared series set; `None` uses the sorted distinct targets of the log.
    pub targets: Option<Vec<String>>,
    /// Reject out-of-window events instead of counting and skipping them.
    pub strict: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AggregateReport {
    pub counted: usize,
    pub outside_window: usize,
}

/// Counts events per (series, bucket) over the half-open window `[start, end)`.
pub fn aggregate_events(
    log: &EventLog,
    opts: &AggregateOptions,
) -> Result<(SeriesPanel, AggregateReport), PanelError> {
    if log.records.is_empty() {
        return Err(PanelError::EmptyLog);
    }
    let width = opts.bucket.seconds();
    let window = opts.end.timestamp() - opts.start.timestamp();
    if window <= 0 || window % width != 0 {
        return Err(PanelError::UnevenWindow { window_secs: window, bucket_secs: width });
    }
    let t_len = (window / width) as usize;
    let names = opts.targets.clone().unwrap_or_else(|| log.targets());
    let index: BTreeMap<&str, usize> = names.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut values = DMatrix::<f64>::zeros(names.len(), t_len);
    let mut report = AggregateReport::default();
    for (i, ev) in log.records.iter().enumerate() {
        let line = i + 2;
        let offset = ev.timestamp.timestamp() - opts.start.timestamp();
        if offset < 0 || ev.timestamp >= opts.end {
            if opts.strict {
                return Err(PanelError::OutsideWindow { line, timestamp: ev.timestamp.to_rfc3339() });
            }
            log::warn!("line {line}: event at {} outside window, skipped", ev.timestamp);
            report.outside_window += 1;
            continue;
        }
        let Some(&row) = index.get(ev.target.as_str()) else {
            return Err(PanelError::UnknownTarget { line, target: ev.target.clone() });
        };
        values[(row, (offset / width) as usize)] += 1.0;
        report.counted += 1;
    }
    let axis = TimeAxis::Utc { start: opts.start.timestamp(), step: width };
    Ok((SeriesPanel::new(names, axis, values, Transform::Raw)?, report))
}

/// `x ↦ ln(1 + x)` on every cell.
pub fn log_transform(panel: &SeriesPanel) -> Result<SeriesPanel, PanelError> {
    if panel.transform == Transform::Log1p {
        return Err(PanelError::AlreadyTransformed);
    }
    for (i, name) in panel.names.iter().enumerate() {
        if let Some(&v) = panel.values.row(i).iter().find(|v| **v < 0.0) {
            return Err(PanelError::Negative { series: name.clone(), value: v });
        }
    }
    Ok(SeriesPanel {
        values: panel.values.map(f64::ln_1p),
        transform: Transform::Log1p,
        ..panel.clone()
    })
}

/// Inverse of [`log_transform`].
pub fn inverse_log_transform(panel: &SeriesPanel) -> SeriesPanel {
    SeriesPanel {
        values: panel.values.map(f64::exp_m1),
        transform: Transform::Raw,
        ..panel.clone()
    }
}

/// Train / validation / test boundaries as exclusive 0-based end indices:
/// training is `[0, train_end)`, validation `[train_end, valid_end)`, test
/// `[valid_end, test_end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_end: usize,
    pub valid_end: usize,
    pub test_end: usize,
}

impl SplitSpec {
    pub fn new(train_end: usize, valid_end: usize, test_end: usize) -> Result<Self, PanelError> {
        let s = Self { train_end, valid_end, test_end };
        if !(0 < train_end && train_end < valid_end && valid_end < test_end) {
            return Err(PanelError::Split(format!(
                "need 0 < train_end < valid_end < test_end, got {train_end}, {valid_end}, {test_end}"
            )));
        }
        Ok(s)
    }

    pub fn check(&self, panel_len: usize) -> Result<(), PanelError> {
        Self::new(self.train_end, self.valid_end, self.test_end)?;
        if self.test_end > panel_len {
            return Err(PanelError::Split(format!(
                "test_end {} exceeds panel length {panel_len}",
                self.test_end
            )));
        }
        Ok(())
    }

    pub fn train(&self) -> std::ops::Range<usize> {
        0..self.train_end
    }

    pub fn valid(&self) -> std::ops::Range<usize> {
        self.train_end..self.valid_end
    }

    pub fn test(&self) -> std::ops::Range<usize> {
        self.valid_end..self.test_end
    }
}

impl fmt::Display for SplitSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.train_end, self.valid_end, self.test_end)
    }
}

/// Per-series location/scale used to standardize a panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardization {
    pub fn identity(n: usize) -> Self {
        Self { mean: vec![0.0; n], sd: vec![1.0; n] }
    }

    /// Training-segment mean and sample sd of every series.
    pub fn fit(panel: &SeriesPanel, split: &SplitSpec) -> Result<Self, PanelError> {
        let s = Self::fit_lenient(panel, split);
        for (i, name) in panel.names().iter().enumerate() {
            if s.sd[i] == 1.0 && sample_sd(panel.values.row(i).columns(0, split.train_end).iter().copied()) == 0.0 {
                return Err(PanelError::DegenerateSeries(name.clone()));
            }
        }
        Ok(s)
    }

    /// As [`Standardization::fit`], but constant series are only centered.
    pub fn fit_lenient(panel: &SeriesPanel, split: &SplitSpec) -> Self {
        let m = split.train_end.min(panel.len());
        let mut mean = Vec::with_capacity(panel.n_series());
        let mut sd = Vec::with_capacity(panel.n_series());
        for i in 0..panel.n_series() {
            let row = panel.values.row(i);
            let seg = row.columns(0, m);
            let mu = seg.iter().sum::<f64>() / m as f64;
            let s = sample_sd(seg.iter().copied());
            mean.push(mu);
            sd.push(if s > 0.0 { s } else { 1.0 });
        }
        Self { mean, sd }
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, t| (x[(i, t)] - self.mean[i]) / self.sd[i])
    }

    pub fn invert(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(z.nrows(), z.ncols(), |i, t| z[(i, t)] * self.sd[i] + self.mean[i])
    }

    pub fn apply_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(x.len(), |i, _| (x[i] - self.mean[i]) / self.sd[i])
    }

    pub fn invert_vec(&self, z: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(z.len(), |i, _| z[i] * self.sd[i] + self.mean[i])
    }
}

fn sample_sd(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = xs.clone().count();
    if n < 2 {
        return 0.0;
    }
    let mean = xs.clone().sum::<f64>() / n as f64;
    (xs.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
}

/// Shifts and scales every series by its training-segment mean and sd.
pub fn standardize(panel: &SeriesPanel, split: &SplitSpec) -> Result<(SeriesPanel, Standardization), PanelError> {
    let stats = Standardization::fit(panel, split)?;
    let values = stats.apply(&panel.values);
    Ok((SeriesPanel { values, ..panel.clone() }, stats))
}

pub fn destandardize(panel: &SeriesPanel, stats: &Standardization) -> SeriesPanel {
    SeriesPanel { values: stats.invert(&panel.values), ..panel.clone() }
}
