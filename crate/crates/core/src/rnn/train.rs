use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{adam_update, backward, forward_window, loss_j, AdamState, RecurrentNet, RnnError};
use crate::panel::{SeriesPanel, SplitSpec, Standardization};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// L2 penalty λ on weight matrices.
    pub lambda: f64,
    /// Adam step size γ.
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Maximum number of epochs.
    pub epochs: usize,
    pub seed: u64,
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lambda: 0.001, learning_rate: 0.01, batch_size: 10, epochs: 40, seed: 0, patience: 3, min_delta: 1e-6 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), RnnError> {
        if !(self.lambda >= 0.0 && self.learning_rate > 0.0) {
            return Err(RnnError::Contract("need λ ≥ 0 and γ > 0".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.patience == 0 {
            return Err(RnnError::Contract("batch size, epochs and patience must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops after `patience` consecutive epochs without a validation improvement
/// larger than `min_delta`.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    min_delta: f64,
    best: f64,
    best_epoch: usize,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self { patience, min_delta, best: f64::INFINITY, best_epoch: 0, bad_epochs: 0 }
    }

    pub fn observe(&mut self, epoch: usize, val_mse: f64) -> StopDecision {
        if val_mse < self.best - self.min_delta || (self.best.is_infinite() && val_mse.is_finite()) {
            self.best = val_mse;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            StopDecision::Improved
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation MSE.
    pub net: RecurrentNet,
    /// Full-training-set objective before the first update.
    pub initial_loss: f64,
    /// Full-training-set objective after each epoch.
    pub train_loss: Vec<f64>,
    /// Validation MSE after each epoch, on the standardized scale.
    pub val_mse: Vec<f64>,
    pub best_epoch: usize,
    pub stop_epoch: usize,
    pub best_val_mse: f64,
}

struct Windows {
    inputs: Vec<DMatrix<f64>>,
    targets: Vec<DVector<f64>>,
}

fn windows(z: &DMatrix<f64>, p: usize, range: std::ops::Range<usize>) -> Windows {
    let inputs = range.clone().map(|t| z.columns(t - p, p).into_owned()).collect();
    let targets = range.map(|t| z.column(t).into_owned()).collect();
    Windows { inputs, targets }
}

fn predictions(net: &RecurrentNet, w: &Windows) -> Result<Vec<DVector<f64>>, RnnError> {
    w.inputs.iter().map(|x| forward_window(net, x).map(|(p, _)| p)).collect()
}

fn mse(pred: &[DVector<f64>], targets: &[DVector<f64>]) -> f64 {
    let n = targets[0].len();
    pred.iter().zip(targets).map(|(p, y)| (y - p).norm_squared()).sum::<f64>() / (pred.len() * n) as f64
}

/// Trains on sliding windows of the training segment with mini-batch Adam,
/// evaluating validation MSE after every epoch and keeping the best epoch.
///
/// The panel is standardized with training-segment statistics (constant
/// series are only centered); the returned network carries that scaling.
pub fn train(
    mut net: RecurrentNet,
    panel: &SeriesPanel,
    split: &SplitSpec,
    config: &TrainConfig,
) -> Result<TrainOutcome, RnnError> {
    config.validate()?;
    let p = net.arch.lag;
    if panel.n_series() != net.arch.input_dim {
        return Err(RnnError::Shape(format!(
            "panel has {} series, network expects {}",
            panel.n_series(),
            net.arch.input_dim
        )));
    }
    if split.train_end <= p {
        return Err(RnnError::Contract(format!(
            "training segment of length {} must exceed the lag {p}",
            split.train_end
        )));
    }
    if !(split.train_end < split.valid_end && split.valid_end <= panel.len()) {
        return Err(RnnError::Contract(format!("split {split} does not fit a panel of length {}", panel.len())));
    }
    net.scaling = Standardization::fit_lenient(panel, split);
    let z = net.scaling.apply(panel.values());
    let train_w = windows(&z, p, p..split.train_end);
    let valid_w = windows(&z, p, split.train_end..split.valid_end);

    let full_loss = |net: &RecurrentNet| -> Result<f64, RnnError> {
        loss_j(&predictions(net, &train_w)?, &train_w.targets, &net.params, config.lambda)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(net.params.len());
    let mut order: Vec<usize> = (0..train_w.inputs.len()).collect();
    let mut stopper = EarlyStopping::new(config.patience, config.min_delta);
    let initial_loss = full_loss(&net)?;
    let mut best = net.clone();
    let mut train_loss = Vec::new();
    let mut val_mse = Vec::new();
    let mut stop_epoch = config.epochs;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let mut tapes = Vec::with_capacity(batch.len());
            let mut targets = Vec::with_capacity(batch.len());
            for &i in batch {
                let (_, tape) = forward_window(&net, &train_w.inputs[i])?;
                tapes.push(tape);
                targets.push(train_w.targets[i].clone());
            }
            let grad = backward(&net, &tapes, &targets, config.lambda)?;
            adam_update(&mut adam, &mut net.params, &grad, config.learning_rate).map_err(|e| match e {
                RnnError::NonFinite(_) => RnnError::Diverged { epoch },
                other => other,
            })?;
        }
        let loss = full_loss(&net).map_err(|_| RnnError::Diverged { epoch })?;
        if !loss.is_finite() {
            return Err(RnnError::Diverged { epoch });
        }
        let v = mse(&predictions(&net, &valid_w).map_err(|_| RnnError::Diverged { epoch })?, &valid_w.targets);
        if !v.is_finite() {
            return Err(RnnError::Diverged { epoch });
        }
        train_loss.push(loss);
        val_mse.push(v);
        match stopper.observe(epoch, v) {
            StopDecision::Improved => best = net.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stop_epoch = epoch;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        net: best,
        initial_loss,
        train_loss,
        val_mse,
        best_epoch: stopper.best_epoch(),
        stop_epoch,
        best_val_mse: stopper.best(),
    })
}
