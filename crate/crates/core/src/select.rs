//! Hyper-parameter grid search: every configuration is trained independently
//! and the lowest validation MSE wins.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panel::{SeriesPanel, SplitSpec};
use crate::rnn::{train, Architecture, CellKind, Checkpoint, RecurrentNet, RnnError, TrainConfig};

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("{0}")]
    Contract(String),
    #[error("all {} candidates failed; first: {}", .0.len(), .0.first().map(|d| d.reason.as_str()).unwrap_or("-"))]
    Failed(Vec<FailedCandidate>),
    #[error(transparent)]
    Rnn(#[from] RnnError),
    #[error("worker pool: {0}")]
    Pool(String),
}

/// Search space. Every set must be non-empty; the default is the full grid
/// of 10,800 configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub cells: Vec<CellKind>,
    pub layers: Vec<usize>,
    pub sizes: Vec<usize>,
    pub batch: Vec<usize>,
    pub bidir: Vec<bool>,
    pub lags: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub learning_rates: Vec<f64>,
    pub epochs: Vec<usize>,
    pub seed: u64,
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            cells: CellKind::ALL.to_vec(),
            layers: vec![1, 2, 3],
            sizes: vec![16, 32, 64],
            batch: vec![5, 10],
            bidir: vec![true, false],
            lags: vec![1, 2, 3, 4, 5],
            lambdas: vec![0.01, 0.001],
            learning_rates: vec![0.01, 0.001],
            epochs: vec![40, 50, 60, 70, 80],
            seed: 0,
            patience: 3,
            min_delta: 1e-6,
        }
    }
}

impl GridSpec {
    /// Eight configurations: LSTM/GRU × 16/32 units × lag 1/2, one layer,
    /// batch 10, λ = 0.001, γ = 0.01, 40 epochs.
    pub fn desk() -> Self {
        Self {
            cells: vec![CellKind::Lstm, CellKind::Gru],
            layers: vec![1],
            sizes: vec![16, 32],
            batch: vec![10],
            bidir: vec![false],
            lags: vec![1, 2],
            lambdas: vec![0.001],
            learning_rates: vec![0.01],
            epochs: vec![40],
            ..Self::default()
        }
    }

    pub fn cardinality(&self) -> usize {
        self.cells.len()
            * self.layers.len()
            * self.sizes.len()
            * self.batch.len()
            * self.bidir.len()
            * self.lags.len()
            * self.lambdas.len()
            * self.learning_rates.len()
            * self.epochs.len()
    }

    pub fn max_lag(&self) -> usize {
        self.lags.iter().copied().max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<(), SelectError> {
        let empty = [
            ("cells", self.cells.is_empty()),
            ("layers", self.layers.is_empty()),
            ("sizes", self.sizes.is_empty()),
            ("batch", self.batch.is_empty()),
            ("bidir", self.bidir.is_empty()),
            ("lags", self.lags.is_empty()),
            ("lambdas", self.lambdas.is_empty()),
            ("learning_rates", self.learning_rates.is_empty()),
            ("epochs", self.epochs.is_empty()),
        ];
        if let Some((name, _)) = empty.iter().find(|e| e.1) {
            return Err(SelectError::Grid(format!("`{name}` is empty")));
        }
        if self.layers.iter().any(|&l| !(1..=3).contains(&l)) {
            return Err(SelectError::Grid("layers must be in 1..=3".into()));
        }
        let zero = |v: &[usize]| v.contains(&0);
        if zero(&self.sizes) || zero(&self.batch) || zero(&self.lags) || zero(&self.epochs) {
            return Err(SelectError::Grid("sizes, batch, lags and epochs must be positive".into()));
        }
        if self.lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(SelectError::Grid("λ must be finite and ≥ 0".into()));
        }
        if self.learning_rates.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
            return Err(SelectError::Grid("γ must be finite and > 0".into()));
        }
        if self.patience == 0 {
            return Err(SelectError::Grid("patience must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// One point of the grid, with its derived run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateConfig {
    pub index: usize,
    pub lag: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub cell: CellKind,
    pub bidirectional: bool,
    pub layers: usize,
    pub size: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub patience: usize,
    pub min_delta: f64,
}

impl CandidateConfig {
    pub fn architecture(&self, input_dim: usize) -> Architecture {
        Architecture {
            cell: self.cell,
            input_dim,
            lag: self.lag,
            layers: self.layers,
            size: self.size,
            bidirectional: self.bidirectional,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lambda: self.lambda,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            patience: self.patience,
            min_delta: self.min_delta,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for candidate `index` under `master`; independent of execution order.
pub fn run_seed(master: u64, index: usize) -> u64 {
    splitmix64(master ^ splitmix64(index as u64))
}

/// Cartesian product, outermost to innermost: lag, epochs, γ, λ, cell,
/// bidirectional, layers, size, batch.
pub fn enumerate_grid(spec: &GridSpec) -> Vec<CandidateConfig> {
    let mut out = Vec::with_capacity(spec.cardinality());
    for &lag in &spec.lags {
        for &epochs in &spec.epochs {
            for &learning_rate in &spec.learning_rates {
                for &lambda in &spec.lambdas {
                    for &cell in &spec.cells {
                        for &bidirectional in &spec.bidir {
                            for &layers in &spec.layers {
                                for &size in &spec.sizes {
                                    for &batch_size in &spec.batch {
                                        let index = out.len();
                                        out.push(CandidateConfig {
                                            index,
                                            lag,
                                            epochs,
                                            learning_rate,
                                            lambda,
                                            cell,
                                            bidirectional,
                                            layers,
                                            size,
                                            batch_size,
                                            seed: run_seed(spec.seed, index),
                                            patience: spec.patience,
                                            min_delta: spec.min_delta,
                                        });
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// What a trainer returns for one candidate.
#[derive(Debug, Clone)]
pub struct CandidateRun {
    pub net: RecurrentNet,
    pub val_mse: f64,
    pub stop_epoch: usize,
}

/// Trains a single candidate. The default implementation is [`RnnTrainer`];
/// tests plug in stubs.
pub trait CandidateTrainer: Sync {
    fn run(&self, config: &CandidateConfig, panel: &SeriesPanel, split: &SplitSpec) -> Result<CandidateRun, RnnError>;
}

pub struct RnnTrainer;

impl CandidateTrainer for RnnTrainer {
    fn run(&self, config: &CandidateConfig, panel: &SeriesPanel, split: &SplitSpec) -> Result<CandidateRun, RnnError> {
        let net = RecurrentNet::random(config.architecture(panel.n_series()), config.seed)?;
        let out = train(net, panel, split, &config.train_config())?;
        Ok(CandidateRun { net: out.net, val_mse: out.best_val_mse, stop_epoch: out.stop_epoch })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateResult {
    pub config: CandidateConfig,
    pub val_mse: f64,
    pub stop_epoch: usize,
    pub checkpoint_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedCandidate {
    pub config: CandidateConfig,
    pub reason: String,
}

/// Fitted values `ŷ_t` for `t` in `start .. start + values.ncols()`; earlier
/// indices have no full lag window and are absent.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedValues {
    pub start: usize,
    pub values: DMatrix<f64>,
}

impl FittedValues {
    pub fn end(&self) -> usize {
        self.start + self.values.ncols()
    }

    pub fn get(&self, t: usize) -> Option<DVector<f64>> {
        (t >= self.start && t < self.end()).then(|| self.values.column(t - self.start).into_owned())
    }

    /// One-step predictions of `net` for `t` in `start.max(p) .. end`, each
    /// from the observed window ending at `t − 1`.
    pub fn from_net(net: &RecurrentNet, panel: &SeriesPanel, start: usize, end: usize) -> Result<Self, RnnError> {
        let p = net.arch.lag;
        let start = start.max(p);
        let end = end.max(start);
        let mut values = DMatrix::zeros(panel.n_series(), end - start);
        for t in start..end {
            values.set_column(t - start, &net.predict(&panel.window(t, p))?);
        }
        Ok(Self { start, values })
    }
}

#[derive(Debug, Clone)]
pub struct Selection {
    pub net: RecurrentNet,
    pub config: CandidateConfig,
    pub val_mse: f64,
    /// Over the training and validation segments.
    pub fitted: FittedValues,
    /// Successful candidates in enumeration order.
    pub leaderboard: Vec<CandidateResult>,
    pub failed: Vec<FailedCandidate>,
}

#[derive(Debug, Clone, Default)]
pub struct SelectOptions<'a> {
    /// Worker threads; 0 uses all cores.
    pub jobs: usize,
    /// When set, every candidate's checkpoint is written here.
    pub checkpoint_dir: Option<&'a Path>,
}

type Best = Option<(usize, f64, RecurrentNet)>;

fn better(a: Best, b: Best) -> Best {
    match (a, b) {
        (None, x) | (x, None) => x,
        (Some(a), Some(b)) => {
            if b.1 < a.1 || (b.1 == a.1 && b.0 < a.0) {
                Some(b)
            } else {
                Some(a)
            }
        }
    }
}

/// Trains the whole grid and keeps the candidate with the lowest validation
/// MSE, ties going to the earlier configuration.
pub fn select_best(
    panel: &SeriesPanel,
    split: &SplitSpec,
    spec: &GridSpec,
    trainer: &dyn CandidateTrainer,
    options: &SelectOptions<'_>,
) -> Result<Selection, SelectError> {
    spec.validate()?;
    split.check(panel.len()).map_err(|e| SelectError::Contract(e.to_string()))?;
    if split.train_end <= spec.max_lag() {
        return Err(SelectError::Contract(format!(
            "training segment of length {} must exceed the largest lag {}",
            split.train_end,
            spec.max_lag()
        )));
    }
    let configs = enumerate_grid(spec);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.jobs)
        .build()
        .map_err(|e| SelectError::Pool(e.to_string()))?;

    type Acc = (Vec<CandidateResult>, Vec<FailedCandidate>, Best);
    let run_one = |cfg: &CandidateConfig| -> Acc {
        let fail = |reason: String| (vec![], vec![FailedCandidate { config: cfg.clone(), reason }], None);
        let run = match trainer.run(cfg, panel, split) {
            Ok(r) if r.val_mse.is_finite() && r.val_mse >= 0.0 => r,
            Ok(r) => return fail(format!("validation MSE {}", r.val_mse)),
            Err(e) => return fail(e.to_string()),
        };
        let checkpoint_path = match options.checkpoint_dir {
            Some(dir) => {
                let path = dir.join(format!("candidate_{:05}.json", cfg.index));
                let ckpt = Checkpoint::from_net(&run.net, panel.names().to_vec(), cfg.seed, Some(cfg.train_config()));
                if let Err(e) = ckpt.save(&path) {
                    return fail(e.to_string());
                }
                Some(path)
            }
            None => None,
        };
        let result = CandidateResult { config: cfg.clone(), val_mse: run.val_mse, stop_epoch: run.stop_epoch, checkpoint_path };
        (vec![result], vec![], Some((cfg.index, run.val_mse, run.net)))
    };
    let merge = |mut a: Acc, b: Acc| -> Acc {
        a.0.extend(b.0);
        a.1.extend(b.1);
        (a.0, a.1, better(a.2, b.2))
    };
    let (mut leaderboard, mut failed, best) =
        pool.install(|| configs.par_iter().map(run_one).reduce(|| (vec![], vec![], None), merge));
    leaderboard.sort_by_key(|r| r.config.index);
    failed.sort_by_key(|f| f.config.index);
    for f in &failed {
        log::warn!("candidate {} failed: {}", f.config.index, f.reason);
    }

    let Some((index, val_mse, net)) = best else {
        return Err(SelectError::Failed(failed));
    };
    let fitted = FittedValues::from_net(&net, panel, 0, split.valid_end)?;
    Ok(Selection { net, config: configs[index].clone(), val_mse, fitted, leaderboard, failed })
}

pub fn leaderboard_json(leaderboard: &[CandidateResult]) -> String {
    serde_json::to_string_pretty(leaderboard).expect("leaderboard serializes")
}
