use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use deeptail::forecast::AggregateLevel;
use deeptail_cli::config::{
    from_value, read_json, AggregateConfig, BacktestCmdConfig, DiagnoseConfig, ForecastCmdConfig, SimulateConfig,
    TrainCmdConfig,
};
use deeptail_cli::{replay, run, Invocation, ModelSource};
use serde::de::DeserializeOwned;

#[derive(Parser)]
#[command(name = "deeptail", version, about = "Heavy-tailed multivariate series: simulate, train, forecast, backtest")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for model selection (0 = all cores).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic panel (var-skewt or copula-ar-garch).
    Simulate {
        #[arg(long)]
        generator: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Count an event log into a panel.
    Aggregate {
        #[arg(long)]
        events: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Grid-search the recurrent mean model.
    Train {
        #[arg(long)]
        panel: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Rolling point and quantile forecasts over the test segment.
    Forecast {
        #[arg(long)]
        panel: PathBuf,
        #[arg(long, conflicts_with = "schedule", required_unless_present = "schedule")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        schedule: Option<PathBuf>,
        /// Comma-separated quantile levels; an empty value gives point forecasts only.
        #[arg(long, value_parser = parse_levels)]
        levels: Option<Levels>,
        /// Forecast the cross-series sum.
        #[arg(long)]
        aggregate: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Accuracy metrics and coverage tests for a forecast file.
    Backtest {
        #[arg(long)]
        panel: PathBuf,
        #[arg(long)]
        forecast: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Threshold and tail-fit diagnostics for a residual file.
    Diagnose {
        #[arg(long)]
        residuals: PathBuf,
        #[arg(long)]
        series: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Re-run a manifest and check its outputs.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

#[derive(Clone)]
struct Levels(Vec<f64>);

fn parse_levels(s: &str) -> Result<Levels, String> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| x.parse::<f64>().map_err(|e| format!("`{x}`: {e}")))
        .collect::<Result<_, _>>()
        .map(Levels)
}

fn load<T: DeserializeOwned>(path: Option<&Path>) -> Result<T> {
    let (value, file) = read_json(path)?;
    Ok(from_value(value, &file, "")?)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    let (inv, out) = match command {
        Command::Simulate { generator, common } => {
            let (value, file) = read_json(common.config.as_deref())?;
            let mut config = SimulateConfig::from_json(value, &file, generator.as_deref())?;
            if let Some(s) = common.seed {
                config.seed = s;
            }
            (Invocation::Simulate { config }, common.out)
        }
        Command::Aggregate { events, common } => {
            let config: AggregateConfig = load(common.config.as_deref())?;
            (Invocation::Aggregate { events, config }, common.out)
        }
        Command::Train { panel, common } => {
            let mut config: TrainCmdConfig = load(common.config.as_deref())?;
            if let Some(s) = common.seed {
                config.grid.seed = s;
            }
            (Invocation::Train { panel, config, jobs: common.jobs }, common.out)
        }
        Command::Forecast { panel, checkpoint, schedule, levels, aggregate, common } => {
            let mut config: ForecastCmdConfig = load(common.config.as_deref())?;
            if let Some(l) = levels {
                config.levels = l.0;
            }
            if aggregate {
                config.mode.level = AggregateLevel::Aggregate;
            }
            let model = match (checkpoint, schedule) {
                (Some(c), _) => ModelSource::Checkpoint(c),
                (None, Some(s)) => ModelSource::Schedule(s),
                (None, None) => unreachable!("clap requires one model source"),
            };
            (Invocation::Forecast { panel, model, config }, common.out)
        }
        Command::Backtest { panel, forecast, common } => {
            let config: BacktestCmdConfig = load(common.config.as_deref())?;
            (Invocation::Backtest { panel, forecast, config }, common.out)
        }
        Command::Diagnose { residuals, series, common } => {
            let mut config: DiagnoseConfig = load(common.config.as_deref())?;
            if series.is_some() {
                config.series = series;
            }
            (Invocation::Diagnose { residuals, config }, common.out)
        }
        Command::Replay { manifest, out } => {
            let m = replay(&manifest, &out)?;
            println!("replayed `{}`: {} outputs match", m.command, m.outputs.len());
            return Ok(());
        }
    };
    let manifest = run(&inv, &out)?;
    for o in &manifest.outputs {
        println!("{}", out.join(&o.path).display());
    }
    Ok(())
}
