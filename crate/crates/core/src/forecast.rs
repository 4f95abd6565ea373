//! Rolling one-step forecasts of the conditional mean and of high quantiles:
//! the network supplies `ŷ_{t+1}` and a POT model of the residual tail
//! supplies the quantile offset.

use std::io::{Read, Write};
use std::ops::Range;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evt::{empirical_quantile, fit_gpd_mle, pot_quantile, residual_quantile, threshold_from_quantile, EvtError, GpdFit, QuantileRule};
use crate::panel::{SeriesPanel, SplitSpec};
use crate::rnn::{RecurrentNet, RnnError};
use crate::select::{select_best, CandidateTrainer, FittedValues, GridSpec, SelectError, SelectOptions, Selection};

/// Series name used for the cross-series sum.
pub const AGGREGATE_SERIES: &str = "__aggregate__";

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("{0}")]
    Contract(String),
    #[error("t = {t}: log-of-sums needs positive sums (observed {observed}, fitted {fitted})")]
    NonPositiveSum { t: usize, observed: f64, fitted: f64 },
    #[error("{source}; use the empirical residual quantile below the threshold")]
    BelowThreshold { source: EvtError },
    #[error("schedule: {0}")]
    Schedule(String),
    #[error("forecast csv: {0}")]
    Format(String),
    #[error(transparent)]
    Evt(#[from] EvtError),
    #[error(transparent)]
    Rnn(#[from] RnnError),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregateLevel {
    #[default]
    PerSeries,
    /// Cross-series sum `s_t = Σ_i y_{i,t}`.
    Aggregate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregateTransform {
    #[default]
    Identity,
    /// Residuals `ln s_t − ln ŝ_t`.
    LogOfSums,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregateMode {
    pub level: AggregateLevel,
    pub transform: AggregateTransform,
}

/// Residuals `e_t` for `t` in `start .. start + series.ncols()`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSet {
    pub start: usize,
    pub series: DMatrix<f64>,
    pub aggregate: Option<Vec<f64>>,
}

impl ResidualSet {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.series.ncols()
    }
}

fn sums(panel: &SeriesPanel, fitted: &FittedValues, t: usize) -> (f64, f64) {
    (panel.values().column(t).sum(), fitted.values.column(t - fitted.start).sum())
}

/// `e_{i,t} = y_{i,t} − ŷ_{i,t}` wherever a fitted value exists; in aggregate
/// mode also the residual of the sums.
pub fn residuals(panel: &SeriesPanel, fitted: &FittedValues, mode: AggregateMode) -> Result<ResidualSet, ForecastError> {
    if fitted.values.nrows() != panel.n_series() || fitted.end() > panel.len() {
        return Err(ForecastError::Contract(format!(
            "fitted values {:?} from t = {} do not align with a {}×{} panel",
            fitted.values.shape(),
            fitted.start,
            panel.n_series(),
            panel.len()
        )));
    }
    let observed = panel.values().columns(fitted.start, fitted.values.ncols());
    let series = observed - &fitted.values;
    let aggregate = match mode.level {
        AggregateLevel::PerSeries => None,
        AggregateLevel::Aggregate => Some(
            (fitted.start..fitted.end())
                .map(|t| {
                    let (s, sh) = sums(panel, fitted, t);
                    match mode.transform {
                        AggregateTransform::Identity => Ok(s - sh),
                        AggregateTransform::LogOfSums if s > 0.0 && sh > 0.0 => Ok(s.ln() - sh.ln()),
                        AggregateTransform::LogOfSums => Err(ForecastError::NonPositiveSum { t, observed: s, fitted: sh }),
                    }
                })
                .collect::<Result<Vec<_>, _>>()?,
        ),
    };
    Ok(ResidualSet { start: fitted.start, series, aggregate })
}

/// `point + pot_quantile(fit, q)`, the residual quantile added to the mean.
pub fn quantile_forecast(point: f64, fit: &GpdFit, q: f64) -> Result<f64, ForecastError> {
    match pot_quantile(fit, q) {
        Ok(r) => Ok(point + r),
        Err(e @ EvtError::BelowThreshold { .. }) => Err(ForecastError::BelowThreshold { source: e }),
        Err(e) => Err(e.into()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvtConfig {
    /// Residual quantile used as the GPD threshold.
    pub threshold_quantile: f64,
    pub rule: QuantileRule,
}

impl Default for EvtConfig {
    fn default() -> Self {
        Self { threshold_quantile: 0.9, rule: QuantileRule::Pot }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastConfig {
    pub levels: Vec<f64>,
    /// Refit the tail model every this many steps (1 refits at every step).
    pub refit_every: usize,
    pub evt: EvtConfig,
    pub mode: AggregateMode,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self { levels: vec![0.92, 0.94, 0.95, 0.96, 0.98], refit_every: 1, evt: EvtConfig::default(), mode: AggregateMode::default() }
    }
}

impl ForecastConfig {
    pub fn validate(&self) -> Result<(), ForecastError> {
        if let Some(q) = self.levels.iter().find(|q| !(**q > 0.0 && **q < 1.0)) {
            return Err(ForecastError::Contract(format!("level {q} outside (0, 1)")));
        }
        if self.refit_every == 0 {
            return Err(ForecastError::Contract("refit_every must be ≥ 1".into()));
        }
        let u = self.evt.threshold_quantile;
        if !(u > 0.0 && u < 1.0) {
            return Err(ForecastError::Contract(format!("threshold quantile {u} outside (0, 1)")));
        }
        Ok(())
    }
}

/// Where a quantile offset came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantileSource {
    Gpd,
    /// Level below the fitted tail, or no fit available yet.
    Empirical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRecord {
    /// Index of the forecast target `t + 1`.
    pub time: usize,
    pub series: String,
    pub point: f64,
    /// One per configured level, in configuration order.
    pub quantiles: Vec<f64>,
    pub sources: Vec<QuantileSource>,
    /// Time step at which the tail model in use was fitted.
    pub fit_id: Option<usize>,
    /// The scheduled refit failed and an older fit was used.
    pub stale: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSnapshot {
    pub id: usize,
    pub series: String,
    pub fit: GpdFit,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ForecastRun {
    pub levels: Vec<f64>,
    pub records: Vec<ForecastRecord>,
    pub fits: Vec<FitSnapshot>,
}

struct Track {
    name: String,
    fit: Option<(usize, GpdFit)>,
    stale: bool,
}

/// Rolling one-step forecasts over the test segment of `split`.
///
/// Each target uses the observed lag window, and its tail model is fit to
/// the residuals strictly before it. Refits follow `refit_every`; a failed
/// refit keeps the previous fit and marks the record stale. Levels below
/// the fitted tail fall back to the empirical residual quantile.
pub fn rolling_forecast(
    net: &RecurrentNet,
    panel: &SeriesPanel,
    split: &SplitSpec,
    config: &ForecastConfig,
) -> Result<ForecastRun, ForecastError> {
    config.validate()?;
    split.check(panel.len()).map_err(|e| ForecastError::Contract(e.to_string()))?;
    let p = net.arch.lag;
    if panel.n_series() != net.arch.input_dim {
        return Err(ForecastError::Contract(format!(
            "panel has {} series, network expects {}",
            panel.n_series(),
            net.arch.input_dim
        )));
    }
    if split.valid_end <= p {
        return Err(ForecastError::Contract(format!("history of length {} must exceed the lag {p}", split.valid_end)));
    }
    let test = split.test();
    let fitted = FittedValues::from_net(net, panel, p, test.end)?;
    let res = residuals(panel, &fitted, config.mode)?;

    let rows: Vec<Vec<f64>> = match &res.aggregate {
        Some(a) => vec![a.clone()],
        None => res.series.row_iter().map(|r| r.iter().copied().collect()).collect(),
    };
    let mut tracks: Vec<Track> = match config.mode.level {
        AggregateLevel::Aggregate => vec![Track { name: AGGREGATE_SERIES.into(), fit: None, stale: false }],
        AggregateLevel::PerSeries => {
            panel.names().iter().map(|n| Track { name: n.clone(), fit: None, stale: false }).collect()
        }
    };

    // Ascending order of levels, for the monotone envelope.
    let mut order: Vec<usize> = (0..config.levels.len()).collect();
    order.sort_by(|&a, &b| config.levels[a].total_cmp(&config.levels[b]));

    let mut run = ForecastRun { levels: config.levels.clone(), ..Default::default() };
    for (step, target) in test.clone().enumerate() {
        let hist_len = target - res.start;
        if step % config.refit_every == 0 {
            let fits: Vec<Option<GpdFit>> = rows
                .par_iter()
                .map(|row| {
                    let h = &row[..hist_len];
                    threshold_from_quantile(h, config.evt.threshold_quantile).and_then(|u| fit_gpd_mle(h, u)).ok()
                })
                .collect();
            for (track, fit) in tracks.iter_mut().zip(fits) {
                match fit {
                    Some(f) => {
                        run.fits.push(FitSnapshot { id: target, series: track.name.clone(), fit: f.clone() });
                        track.fit = Some((target, f));
                        track.stale = false;
                    }
                    None => {
                        log::debug!("t = {target}: tail refit failed for {}; keeping the previous fit", track.name);
                        track.stale = true;
                    }
                }
            }
        }
        for (k, track) in tracks.iter().enumerate() {
            let hist = &rows[k][..hist_len];
            let (point, to_level): (f64, Box<dyn Fn(f64) -> Result<f64, ForecastError>>) = match config.mode.level {
                AggregateLevel::PerSeries => {
                    let pt = fitted.values[(k, target - fitted.start)];
                    (pt, Box::new(move |r| Ok(pt + r)))
                }
                AggregateLevel::Aggregate => {
                    let pt = fitted.values.column(target - fitted.start).sum();
                    match config.mode.transform {
                        AggregateTransform::Identity => (pt, Box::new(move |r| Ok(pt + r))),
                        AggregateTransform::LogOfSums => {
                            if !(pt > 0.0) {
                                return Err(ForecastError::NonPositiveSum { t: target, observed: f64::NAN, fitted: pt });
                            }
                            (pt, Box::new(move |r: f64| Ok((pt.ln() + r).exp())))
                        }
                    }
                }
            };
            let mut quantiles = vec![0.0; config.levels.len()];
            let mut sources = vec![QuantileSource::Empirical; config.levels.len()];
            for (j, &q) in config.levels.iter().enumerate() {
                let gpd = match &track.fit {
                    Some((_, f)) => match residual_quantile(f, q, config.evt.rule) {
                        Ok(r) => Some(r),
                        Err(EvtError::BelowThreshold { .. }) => None,
                        Err(e) => return Err(e.into()),
                    },
                    None => None,
                };
                let r = match gpd {
                    Some(r) => {
                        sources[j] = QuantileSource::Gpd;
                        r
                    }
                    None => empirical_quantile(hist, q)?,
                };
                quantiles[j] = to_level(r)?;
            }
            let mut running = f64::NEG_INFINITY;
            for &j in &order {
                running = running.max(quantiles[j]);
                quantiles[j] = running;
            }
            run.records.push(ForecastRecord {
                time: target,
                series: track.name.clone(),
                point,
                quantiles,
                sources,
                fit_id: track.fit.as_ref().map(|f| f.0),
                stale: track.stale,
            });
        }
    }
    Ok(run)
}

/// Splits `len` test points into `k + 1` contiguous blocks, earlier blocks
/// taking the remainder one point each.
pub fn block_partition(start: usize, len: usize, k: usize) -> Result<Vec<Range<usize>>, ForecastError> {
    let blocks = k + 1;
    if len < blocks {
        return Err(ForecastError::Schedule(format!("{len} test points cannot form {blocks} non-empty blocks")));
    }
    let (base, rem) = (len / blocks, len % blocks);
    let mut out = Vec::with_capacity(blocks);
    let mut s = start;
    for b in 0..blocks {
        let size = base + usize::from(b < rem);
        out.push(s..s + size);
        s += size;
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ScheduledModel {
    /// Split whose test segment is this block.
    pub split: SplitSpec,
    pub selection: Selection,
}

/// Re-runs model selection `k` extra times, shifting the training and
/// validation windows forward to each block start so every block's model
/// sees only data before the block.
pub fn retrain_schedule(
    panel: &SeriesPanel,
    split: &SplitSpec,
    spec: &GridSpec,
    k: usize,
    trainer: &dyn CandidateTrainer,
    options: &SelectOptions<'_>,
) -> Result<Vec<ScheduledModel>, ForecastError> {
    let test = split.test();
    let blocks = block_partition(test.start, test.len(), k)?;
    let mut out = Vec::with_capacity(blocks.len());
    for block in blocks {
        let shift = block.start - test.start;
        let s = SplitSpec::new(split.train_end + shift, split.valid_end + shift, block.end)
            .map_err(|e| ForecastError::Schedule(e.to_string()))?;
        let selection = select_best(panel, &s, spec, trainer, options)?;
        out.push(ScheduledModel { split: s, selection });
    }
    Ok(out)
}

/// Rolling forecasts over a retraining schedule: each block uses its own model.
pub fn rolling_forecast_schedule(
    models: &[ScheduledModel],
    panel: &SeriesPanel,
    config: &ForecastConfig,
) -> Result<ForecastRun, ForecastError> {
    let mut run = ForecastRun { levels: config.levels.clone(), ..Default::default() };
    for m in models {
        let part = rolling_forecast(&m.selection.net, panel, &m.split, config)?;
        run.records.extend(part.records);
        run.fits.extend(part.fits);
    }
    Ok(run)
}

/// Column name for a level: 0.95 → `q95`, 0.995 → `q995`.
pub fn level_column(q: f64) -> String {
    let s = q.to_string();
    format!("q{}", s.strip_prefix("0.").unwrap_or(&s))
}

fn parse_level(col: &str) -> Option<f64> {
    let digits = col.strip_prefix('q')?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    format!("0.{digits}").parse().ok()
}

impl ForecastRun {
    /// `time, series, point, q..` with one row per (time, series).
    pub fn write_csv<W: Write>(&self, panel: &SeriesPanel, out: W) -> Result<(), ForecastError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["time".to_string(), "series".into(), "point".into()];
        header.extend(self.levels.iter().map(|q| level_column(*q)));
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![panel.axis().format(r.time), r.series.clone(), r.point.to_string()];
            row.extend(r.quantiles.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// A forecast CSV read back: rows keep the file's time labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastTable {
    pub levels: Vec<f64>,
    pub rows: Vec<ForecastRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastRow {
    pub time: String,
    pub series: String,
    pub point: f64,
    pub quantiles: Vec<f64>,
}

pub fn read_forecast_csv<R: Read>(input: R) -> Result<ForecastTable, ForecastError> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 3 || cols[..3] != ["time", "series", "point"] {
        return Err(ForecastError::Format(format!("header must start with time,series,point; got {cols:?}")));
    }
    let levels = cols[3..]
        .iter()
        .map(|c| parse_level(c).ok_or_else(|| ForecastError::Format(format!("bad level column `{c}`"))))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let num = |j: usize| -> Result<f64, ForecastError> {
            rec[j].parse().map_err(|_| ForecastError::Format(format!("line {}: `{}` is not a number", i + 2, &rec[j])))
        };
        rows.push(ForecastRow {
            time: rec[0].to_string(),
            series: rec[1].to_string(),
            point: num(2)?,
            quantiles: (3..cols.len()).map(num).collect::<Result<_, _>>()?,
        });
    }
    Ok(ForecastTable { levels, rows })
}
