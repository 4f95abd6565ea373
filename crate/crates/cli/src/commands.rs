use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use deeptail::backtest::{backtest_series, BacktestReport};
use deeptail::evt::{fit_gpd_mle, mean_residual_life, qq_pp_points, threshold_from_quantile};
use deeptail::forecast::{
    read_forecast_csv, residuals, retrain_schedule, rolling_forecast, AggregateMode, ForecastConfig, ForecastRun,
    AGGREGATE_SERIES,
};
use deeptail::panel::{aggregate_events, log_transform, AggregateOptions, EventLog, SeriesPanel};
use deeptail::rnn::{Checkpoint, RecurrentNet};
use deeptail::select::{leaderboard_json, select_best, FittedValues, RnnTrainer, SelectOptions, Selection};
use deeptail::simgen::{simulate_copula_ar_garch, simulate_var_skewt};
use serde::{Deserialize, Serialize};

use crate::config::{
    AggregateConfig, BacktestCmdConfig, DiagnoseConfig, ForecastCmdConfig, Generator, SimulateConfig, SplitConfig,
    TrainCmdConfig,
};
use crate::manifest::{FileDigest, RunManifest};

/// Where `forecast` gets its network(s).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelSource {
    Checkpoint(PathBuf),
    /// `schedule.json` written by `train` with `retrain > 0`.
    Schedule(PathBuf),
}

/// A fully resolved command: config snapshot plus input paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Invocation {
    Simulate { config: SimulateConfig },
    Aggregate { events: PathBuf, config: AggregateConfig },
    Train { panel: PathBuf, config: TrainCmdConfig, jobs: usize },
    Forecast { panel: PathBuf, model: ModelSource, config: ForecastCmdConfig },
    Backtest { panel: PathBuf, forecast: PathBuf, config: BacktestCmdConfig },
    Diagnose { residuals: PathBuf, config: DiagnoseConfig },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub blocks: Vec<ScheduleBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleBlock {
    pub split: SplitConfig,
    /// Relative to the schedule file.
    pub checkpoint: PathBuf,
}

impl Schedule {
    fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(crate::config::parse_str(&text, &path.display().to_string())?)
    }
}

impl Invocation {
    pub fn name(&self) -> &'static str {
        match self {
            Invocation::Simulate { .. } => "simulate",
            Invocation::Aggregate { .. } => "aggregate",
            Invocation::Train { .. } => "train",
            Invocation::Forecast { .. } => "forecast",
            Invocation::Backtest { .. } => "backtest",
            Invocation::Diagnose { .. } => "diagnose",
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            Invocation::Simulate { config } => Some(config.seed),
            Invocation::Train { config, .. } => Some(config.grid.seed),
            _ => None,
        }
    }

    pub fn inputs(&self) -> Result<Vec<PathBuf>> {
        Ok(match self {
            Invocation::Simulate { .. } => vec![],
            Invocation::Aggregate { events, .. } => vec![events.clone()],
            Invocation::Train { panel, .. } => vec![panel.clone()],
            Invocation::Forecast { panel, model, .. } => {
                let mut v = vec![panel.clone()];
                match model {
                    ModelSource::Checkpoint(p) => v.push(p.clone()),
                    ModelSource::Schedule(p) => {
                        let dir = p.parent().unwrap_or(Path::new("."));
                        v.push(p.clone());
                        v.extend(Schedule::load(p)?.blocks.iter().map(|b| dir.join(&b.checkpoint)));
                    }
                }
                v
            }
            Invocation::Backtest { panel, forecast, .. } => vec![panel.clone(), forecast.clone()],
            Invocation::Diagnose { residuals, .. } => vec![residuals.clone()],
        })
    }
}

/// Runs the command into `out` and writes its manifest.
pub fn run(inv: &Invocation, out: &Path) -> Result<RunManifest> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let inputs = inv
        .inputs()?
        .iter()
        .map(|p| FileDigest::of(p).with_context(|| format!("reading input {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let t0 = Instant::now();
    let written = execute(inv, out)?;
    let outputs = written
        .iter()
        .map(|rel| Ok(FileDigest { path: rel.clone(), sha256: crate::manifest::sha256_file(&out.join(rel))? }))
        .collect::<Result<Vec<_>>>()?;
    let manifest = RunManifest {
        command: inv.name().into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: inv.seed(),
        invocation: inv.clone(),
        inputs,
        outputs,
        wall_clock_secs: t0.elapsed().as_secs_f64(),
    };
    manifest.write(out)?;
    Ok(manifest)
}

/// Re-runs a manifest into `out` and checks every output digest.
pub fn replay(manifest_path: &Path, out: &Path) -> Result<RunManifest> {
    let old = RunManifest::load(manifest_path)?;
    for d in &old.inputs {
        let now = crate::manifest::sha256_file(&d.path).with_context(|| format!("reading input {}", d.path.display()))?;
        if now != d.sha256 {
            bail!("input {} changed since the recorded run", d.path.display());
        }
    }
    let new = run(&old.invocation, out)?;
    let digests: HashMap<&Path, &str> = new.outputs.iter().map(|d| (d.path.as_path(), d.sha256.as_str())).collect();
    for d in &old.outputs {
        match digests.get(d.path.as_path()) {
            Some(s) if *s == d.sha256 => {}
            Some(_) => bail!("output {} differs from the recorded run", d.path.display()),
            None => bail!("output {} was not produced", d.path.display()),
        }
    }
    Ok(new)
}

fn execute(inv: &Invocation, out: &Path) -> Result<Vec<PathBuf>> {
    match inv {
        Invocation::Simulate { config } => simulate(config, out),
        Invocation::Aggregate { events, config } => aggregate(events, config, out),
        Invocation::Train { panel, config, jobs } => train(panel, config, *jobs, out),
        Invocation::Forecast { panel, model, config } => forecast(panel, model, config, out),
        Invocation::Backtest { panel, forecast, config } => backtest(panel, forecast, config, out),
        Invocation::Diagnose { residuals, config } => diagnose(residuals, config, out),
    }
}

fn write_json<T: Serialize + ?Sized>(out: &Path, name: &str, value: &T) -> Result<PathBuf> {
    std::fs::write(out.join(name), serde_json::to_string_pretty(value)? + "\n")?;
    Ok(PathBuf::from(name))
}

fn read_panel(path: &Path, log: bool) -> Result<SeriesPanel> {
    let panel = SeriesPanel::read_csv_path(path).with_context(|| format!("reading panel {}", path.display()))?;
    Ok(if log { log_transform(&panel)? } else { panel })
}

fn simulate(config: &SimulateConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let panel = match &config.generator {
        Generator::VarSkewt(c) => simulate_var_skewt(c, config.seed)?.panel,
        Generator::CopulaArGarch(c) => simulate_copula_ar_garch(c, config.seed)?,
    };
    panel.write_csv_path(&out.join("panel.csv"))?;
    Ok(vec!["panel.csv".into()])
}

fn aggregate(events: &Path, config: &AggregateConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let (start, end) = config.window("aggregate config")?;
    let log = EventLog::read_csv(std::fs::File::open(events).with_context(|| format!("reading {}", events.display()))?)?;
    let opts = AggregateOptions { bucket: config.bucket, start, end, targets: config.targets.clone(), strict: config.strict };
    let (panel, report) = aggregate_events(&log, &opts)?;
    panel.write_csv_path(&out.join("panel.csv"))?;
    let summary = serde_json::json!({ "counted": report.counted, "outside_window": report.outside_window });
    Ok(vec!["panel.csv".into(), write_json(out, "aggregate_report.json", &summary)?])
}

fn write_fitted(panel: &SeriesPanel, fitted: &FittedValues, out: &Path) -> Result<Vec<PathBuf>> {
    let mut w = csv::Writer::from_path(out.join("fitted.csv"))?;
    let mut header = vec!["time".to_string()];
    header.extend(panel.names().iter().cloned());
    w.write_record(&header)?;
    for t in fitted.start..fitted.end() {
        let mut row = vec![panel.axis().format(t)];
        row.extend(fitted.values.column(t - fitted.start).iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;

    let res = residuals(panel, fitted, AggregateMode::default())?;
    let mut w = csv::Writer::from_path(out.join("residuals.csv"))?;
    w.write_record(["time", "series", "residual"])?;
    for (i, name) in panel.names().iter().enumerate() {
        for t in res.range() {
            w.write_record([panel.axis().format(t), name.clone(), res.series[(i, t - res.start)].to_string()])?;
        }
    }
    w.flush()?;
    Ok(vec!["fitted.csv".into(), "residuals.csv".into()])
}

fn checkpoint_of(sel: &Selection, panel: &SeriesPanel) -> Checkpoint {
    Checkpoint::from_net(&sel.net, panel.names().to_vec(), sel.config.seed, Some(sel.config.train_config()))
}

fn train(panel_path: &Path, config: &TrainCmdConfig, jobs: usize, out: &Path) -> Result<Vec<PathBuf>> {
    let panel = read_panel(panel_path, config.log_transform)?;
    let split_cfg = SplitConfig::resolve(config.split, panel.len());
    let split = split_cfg.spec()?;
    split.check(panel.len())?;
    let max_lag = config.grid.max_lag();
    if split.test().len() < max_lag {
        bail!("contract violation: test segment of length {} is shorter than the lag {max_lag}", split.test().len());
    }
    let cand_dir = out.join("candidates");
    if config.keep_candidates {
        std::fs::create_dir_all(&cand_dir)?;
    }
    let options = SelectOptions { jobs, checkpoint_dir: config.keep_candidates.then_some(cand_dir.as_path()) };

    let (selection, blocks) = if config.retrain == 0 {
        (select_best(&panel, &split, &config.grid, &RnnTrainer, &options)?, vec![])
    } else {
        let mut models = retrain_schedule(&panel, &split, &config.grid, config.retrain, &RnnTrainer, &options)?;
        let blocks: Vec<_> = models.iter().map(|m| (m.split, checkpoint_of(&m.selection, &panel))).collect();
        (models.swap_remove(0).selection, blocks)
    };

    let mut written = Vec::new();
    checkpoint_of(&selection, &panel).save(&out.join("checkpoint.json"))?;
    written.push("checkpoint.json".into());
    let mut leaderboard = selection.leaderboard.clone();
    for r in &mut leaderboard {
        if let Some(p) = &r.checkpoint_path {
            r.checkpoint_path = p.strip_prefix(out).ok().map(Path::to_path_buf);
        }
        if let Some(p) = &r.checkpoint_path {
            written.push(p.clone());
        }
    }
    std::fs::write(out.join("leaderboard.json"), leaderboard_json(&leaderboard) + "\n")?;
    written.push("leaderboard.json".into());
    written.push(write_json(out, "failed.json", &selection.failed)?);
    written.extend(write_fitted(&panel, &selection.fitted, out)?);

    if !blocks.is_empty() {
        let mut schedule = Schedule { blocks: vec![] };
        for (b, (s, ckpt)) in blocks.iter().enumerate() {
            let name = format!("checkpoint_block{b}.json");
            ckpt.save(&out.join(&name))?;
            written.push(name.clone().into());
            schedule.blocks.push(ScheduleBlock {
                split: SplitConfig { train_end: s.train_end, valid_end: s.valid_end, test_end: s.test_end },
                checkpoint: name.into(),
            });
        }
        written.push(write_json(out, "schedule.json", &schedule)?);
    }
    log::info!("selected candidate {} with validation MSE {}", selection.config.index, selection.val_mse);
    Ok(written)
}

fn load_net(path: &Path, panel: &SeriesPanel) -> Result<RecurrentNet> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if ckpt.series != panel.names() {
        bail!("checkpoint series {:?} do not match panel series {:?}", ckpt.series, panel.names());
    }
    Ok(ckpt.to_net()?)
}

fn forecast(panel_path: &Path, model: &ModelSource, config: &ForecastCmdConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let panel = read_panel(panel_path, config.log_transform)?;
    let fc = ForecastConfig {
        levels: config.levels.clone(),
        refit_every: config.refit_every,
        evt: config.evt.clone(),
        mode: config.mode,
    };
    let run = match model {
        ModelSource::Checkpoint(path) => {
            let split = SplitConfig::resolve(config.split, panel.len()).spec()?;
            rolling_forecast(&load_net(path, &panel)?, &panel, &split, &fc)?
        }
        ModelSource::Schedule(path) => {
            let dir = path.parent().unwrap_or(Path::new("."));
            let mut run = ForecastRun { levels: fc.levels.clone(), ..Default::default() };
            for b in Schedule::load(path)?.blocks {
                let part = rolling_forecast(&load_net(&dir.join(&b.checkpoint), &panel)?, &panel, &b.split.spec()?, &fc)?;
                run.records.extend(part.records);
                run.fits.extend(part.fits);
            }
            run
        }
    };
    let stale = run.records.iter().filter(|r| r.stale).count();
    if stale > 0 {
        log::warn!("{stale} forecast records used a stale tail fit");
    }
    run.write_csv(&panel, std::fs::File::create(out.join("forecast.csv"))?)?;
    Ok(vec![
        "forecast.csv".into(),
        write_json(out, "gpd_fits.json", &run.fits)?,
        write_json(out, "forecast_records.json", &run.records)?,
    ])
}

fn backtest(panel_path: &Path, forecast_path: &Path, config: &BacktestCmdConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let panel = read_panel(panel_path, config.log_transform)?;
    let table = read_forecast_csv(std::fs::File::open(forecast_path).with_context(|| format!("reading {}", forecast_path.display()))?)?;
    let times: HashMap<String, usize> = (0..panel.len()).map(|t| (panel.axis().format(t), t)).collect();
    let rows: HashMap<&str, usize> = panel.names().iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();

    struct Series {
        actual: Vec<f64>,
        point: Vec<f64>,
        quantiles: Vec<Vec<f64>>,
        last_t: Option<usize>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut by_series: HashMap<String, Series> = HashMap::new();
    for (i, row) in table.rows.iter().enumerate() {
        let line = i + 2;
        let Some(&t) = times.get(&row.time) else {
            bail!("alignment error: forecast line {line}: time `{}` is not in the panel", row.time);
        };
        let actual = if row.series == AGGREGATE_SERIES {
            panel.values().column(t).sum()
        } else {
            let Some(&r) = rows.get(row.series.as_str()) else {
                bail!("alignment error: forecast line {line}: series `{}` is not in the panel", row.series);
            };
            panel.values()[(r, t)]
        };
        let s = by_series.entry(row.series.clone()).or_insert_with(|| {
            order.push(row.series.clone());
            Series { actual: vec![], point: vec![], quantiles: vec![vec![]; table.levels.len()], last_t: None }
        });
        if s.last_t.is_some_and(|prev| t <= prev) {
            bail!("alignment error: forecast line {line}: time `{}` is not after the previous row of `{}`", row.time, row.series);
        }
        s.last_t = Some(t);
        s.actual.push(actual);
        s.point.push(row.point);
        for (k, q) in row.quantiles.iter().enumerate() {
            s.quantiles[k].push(*q);
        }
    }
    if order.is_empty() {
        return Err(anyhow!("forecast file {} has no rows", forecast_path.display()));
    }
    let mut report = BacktestReport { series: vec![] };
    for name in &order {
        let s = &by_series[name];
        let levels: Vec<(f64, Vec<f64>)> = table.levels.iter().copied().zip(s.quantiles.iter().cloned()).collect();
        report.series.push(backtest_series(name, &s.actual, &s.point, &levels)?);
    }
    std::fs::write(out.join("report.json"), report.to_json() + "\n")?;
    report.write_table_csv(std::fs::File::create(out.join("table5.csv"))?)?;
    Ok(vec!["report.json".into(), "table5.csv".into()])
}

fn read_residuals(path: &Path, series: Option<&str>) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let header = r.headers()?.clone();
    let Some(col) = header.iter().position(|h| h == "residual") else {
        bail!("{}: no `residual` column", path.display());
    };
    let series_col = header.iter().position(|h| h == "series");
    let mut names = std::collections::BTreeSet::new();
    let mut values = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        if let Some(sc) = series_col {
            let name = &rec[sc];
            names.insert(name.to_string());
            if series.is_some_and(|s| s != name) {
                continue;
            }
        }
        let v: f64 = rec[col].trim().parse().map_err(|_| anyhow!("{} line {}: bad residual `{}`", path.display(), i + 2, &rec[col]))?;
        values.push(v);
    }
    if series.is_none() && names.len() > 1 {
        bail!("{} holds {} series; choose one with `series` in the config", path.display(), names.len());
    }
    if let Some(s) = series {
        if !names.contains(s) {
            bail!("{}: no rows for series `{s}`", path.display());
        }
    }
    Ok(values)
}

fn diagnose(path: &Path, config: &DiagnoseConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let res = read_residuals(path, config.series.as_deref())?;
    let mrl = mean_residual_life(&res, config.grid_size).context("mean residual life refused")?;
    let u = threshold_from_quantile(&res, config.threshold_quantile)?;
    let fit = fit_gpd_mle(&res, u)?;
    let qqpp = qq_pp_points(&fit, &res)?;

    let mut w = csv::Writer::from_path(out.join("mrl.csv"))?;
    w.write_record(["threshold", "mean_excess", "count"])?;
    for ((u, m), c) in mrl.thresholds.iter().zip(&mrl.mean_excess).zip(&mrl.counts) {
        w.write_record([u.to_string(), m.map(|m| m.to_string()).unwrap_or_default(), c.to_string()])?;
    }
    w.flush()?;
    for (name, pts) in [("qq.csv", &qqpp.qq), ("pp.csv", &qqpp.pp)] {
        let mut w = csv::Writer::from_path(out.join(name))?;
        w.write_record(["model", "empirical"])?;
        for (a, b) in pts {
            w.write_record([a.to_string(), b.to_string()])?;
        }
        w.flush()?;
    }
    Ok(vec!["mrl.csv".into(), "qq.csv".into(), "pp.csv".into(), write_json(out, "gpd_fit.json", &fit)?])
}
