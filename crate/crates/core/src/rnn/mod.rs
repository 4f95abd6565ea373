//! Recurrent mean model: LSTM, multiplicative LSTM and GRU cells stacked in
//! one to three layers (optionally bidirectional) with a linear readout,
//! trained by backpropagation through time on the penalized squared loss.

mod adam;
mod cell;
mod checkpoint;
mod network;
mod train;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panel::Standardization;

pub use adam::{adam_update, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON};
pub use cell::{gru_step, lstm_step, mlstm_step};
pub use checkpoint::Checkpoint;
pub use network::{backward, forward_window, gradient_check, loss_j, Tape};
pub use train::{train, EarlyStopping, StopDecision, TrainConfig, TrainOutcome};

#[derive(Debug, Error)]
pub enum RnnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CellKind {
    #[serde(rename = "LSTM")]
    Lstm,
    #[serde(rename = "mLSTM")]
    Mlstm,
    #[serde(rename = "GRU")]
    Gru,
}

impl CellKind {
    pub const ALL: [CellKind; 3] = [CellKind::Lstm, CellKind::Mlstm, CellKind::Gru];

    /// LSTM family: input, forget, output, cell candidate. GRU: update, reset, candidate.
    pub fn gate_names(self) -> &'static [&'static str] {
        match self {
            CellKind::Lstm | CellKind::Mlstm => &["i", "f", "o", "k"],
            CellKind::Gru => &["z", "r", "h"],
        }
    }

    pub fn n_gates(self) -> usize {
        self.gate_names().len()
    }
}

impl std::fmt::Display for CellKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CellKind::Lstm => "LSTM",
            CellKind::Mlstm => "mLSTM",
            CellKind::Gru => "GRU",
        })
    }
}

/// Affine map feeding one gate: `w_in · x + w_rec · r + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gate {
    pub w_in: DMatrix<f64>,
    pub w_rec: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// Factor matrices of the multiplicative intermediate state
/// `m = (w_ma · h_prev) ⊙ (w_my · x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultFactors {
    pub w_ma: DMatrix<f64>,
    pub w_my: DMatrix<f64>,
}

/// Weights of one recurrent layer in one direction.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub kind: CellKind,
    pub input_dim: usize,
    pub size: usize,
    pub gates: Vec<Gate>,
    pub mult: Option<MultFactors>,
}

impl LayerWeights {
    pub fn zeros(kind: CellKind, input_dim: usize, size: usize) -> Self {
        let gates = (0..kind.n_gates())
            .map(|_| Gate {
                w_in: DMatrix::zeros(size, input_dim),
                w_rec: DMatrix::zeros(size, size),
                bias: DVector::zeros(size),
            })
            .collect();
        let mult = (kind == CellKind::Mlstm).then(|| MultFactors {
            w_ma: DMatrix::zeros(size, size),
            w_my: DMatrix::zeros(size, input_dim),
        });
        Self { kind, input_dim, size, gates, mult }
    }

    /// Weight matrices uniform on `[-1/√s, 1/√s]`; biases zero.
    pub fn random(kind: CellKind, input_dim: usize, size: usize, rng: &mut impl Rng) -> Self {
        let mut w = Self::zeros(kind, input_dim, size);
        let bound = 1.0 / (size as f64).sqrt();
        w.visit_mut("", &mut |_, data, penalized| {
            if penalized {
                data.iter_mut().for_each(|v| *v = rng.random_range(-bound..=bound));
            }
        });
        w
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64], bool)) {
        for (g, name) in self.gates.iter().zip(self.kind.gate_names()) {
            f(&format!("{prefix}W_{name}y"), g.w_in.as_slice(), true);
            f(&format!("{prefix}W_{name}a"), g.w_rec.as_slice(), true);
            f(&format!("{prefix}b_{name}"), g.bias.as_slice(), false);
        }
        if let Some(m) = &self.mult {
            f(&format!("{prefix}W_ma"), m.w_ma.as_slice(), true);
            f(&format!("{prefix}W_my"), m.w_my.as_slice(), true);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64], bool)) {
        let names = self.kind.gate_names();
        for (g, name) in self.gates.iter_mut().zip(names) {
            f(&format!("{prefix}W_{name}y"), g.w_in.as_mut_slice(), true);
            f(&format!("{prefix}W_{name}a"), g.w_rec.as_mut_slice(), true);
            f(&format!("{prefix}b_{name}"), g.bias.as_mut_slice(), false);
        }
        if let Some(m) = &mut self.mult {
            f(&format!("{prefix}W_ma"), m.w_ma.as_mut_slice(), true);
            f(&format!("{prefix}W_my"), m.w_my.as_mut_slice(), true);
        }
    }
}

/// One stacked layer: forward direction plus, when bidirectional, a reverse one.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub forward: LayerWeights,
    pub backward: Option<LayerWeights>,
}

/// Shape of a network; everything needed to allocate its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Architecture {
    pub cell: CellKind,
    /// Number of series `n`; input and output dimension.
    pub input_dim: usize,
    /// Lag window length `p`.
    pub lag: usize,
    pub layers: usize,
    pub size: usize,
    pub bidirectional: bool,
}

impl Architecture {
    pub fn validate(&self) -> Result<(), RnnError> {
        if self.input_dim == 0 || self.lag == 0 || self.size == 0 || !(1..=3).contains(&self.layers) {
            return Err(RnnError::Shape(format!("invalid architecture {self:?}")));
        }
        Ok(())
    }

    /// Width of a layer's output sequence and of the readout input.
    pub fn feature_dim(&self) -> usize {
        if self.bidirectional {
            2 * self.size
        } else {
            self.size
        }
    }

    pub fn layer_input_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim
        } else {
            self.feature_dim()
        }
    }
}

/// Every trainable tensor of a network. Gradients share this type.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub layers: Vec<Layer>,
    pub readout: DMatrix<f64>,
    pub readout_bias: DVector<f64>,
}

impl NetParams {
    pub fn zeros(arch: &Architecture) -> Self {
        let layers = (0..arch.layers)
            .map(|l| {
                let d = arch.layer_input_dim(l);
                Layer {
                    forward: LayerWeights::zeros(arch.cell, d, arch.size),
                    backward: arch.bidirectional.then(|| LayerWeights::zeros(arch.cell, d, arch.size)),
                }
            })
            .collect();
        Self {
            layers,
            readout: DMatrix::zeros(arch.input_dim, arch.feature_dim()),
            readout_bias: DVector::zeros(arch.input_dim),
        }
    }

    pub fn random(arch: &Architecture, rng: &mut impl Rng) -> Self {
        let layers = (0..arch.layers)
            .map(|l| {
                let d = arch.layer_input_dim(l);
                let forward = LayerWeights::random(arch.cell, d, arch.size, rng);
                let backward = arch.bidirectional.then(|| LayerWeights::random(arch.cell, d, arch.size, rng));
                Layer { forward, backward }
            })
            .collect();
        let bound = 1.0 / (arch.size as f64).sqrt();
        let readout = DMatrix::from_fn(arch.input_dim, arch.feature_dim(), |_, _| rng.random_range(-bound..=bound));
        Self { layers, readout, readout_bias: DVector::zeros(arch.input_dim) }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |_, d, _| d.fill(0.0));
        z
    }

    /// Visits tensors in a fixed order; the flag marks penalized weight matrices.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &[f64], bool)) {
        for (l, layer) in self.layers.iter().enumerate() {
            layer.forward.visit(&format!("layer{l}.fwd."), f);
            if let Some(b) = &layer.backward {
                b.visit(&format!("layer{l}.bwd."), f);
            }
        }
        f("readout.W", self.readout.as_slice(), true);
        f("readout.b", self.readout_bias.as_slice(), false);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64], bool)) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.forward.visit_mut(&format!("layer{l}.fwd."), f);
            if let Some(b) = &mut layer.backward {
                b.visit_mut(&format!("layer{l}.bwd."), f);
            }
        }
        f("readout.W", self.readout.as_mut_slice(), true);
        f("readout.b", self.readout_bias.as_mut_slice(), false);
    }

    pub fn len(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, d, _| n += d.len());
        n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        self.visit(&mut |_, d, _| out.extend_from_slice(d));
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<(), RnnError> {
        if flat.len() != self.len() {
            return Err(RnnError::Shape(format!("expected {} parameters, got {}", self.len(), flat.len())));
        }
        let mut pos = 0;
        self.visit_mut(&mut |_, d, _| {
            d.copy_from_slice(&flat[pos..pos + d.len()]);
            pos += d.len();
        });
        Ok(())
    }

    /// Per-element mask, true where the λ penalty applies.
    pub fn penalty_mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.len());
        self.visit(&mut |_, d, p| out.extend(std::iter::repeat_n(p, d.len())));
        out
    }

    /// `‖W‖²` over weight matrices and readout weights; biases excluded.
    pub fn weight_sq_norm(&self) -> f64 {
        let mut s = 0.0;
        self.visit(&mut |_, d, p| {
            if p {
                s += d.iter().map(|v| v * v).sum::<f64>();
            }
        });
        s
    }

    /// Name of the tensor holding flat index `idx`.
    pub fn name_of(&self, idx: usize) -> String {
        let mut pos = 0;
        let mut found = String::new();
        self.visit(&mut |name, d, _| {
            if found.is_empty() && idx < pos + d.len() {
                found = format!("{name}[{}]", idx - pos);
            }
            pos += d.len();
        });
        found
    }
}

/// Trained or freshly initialized mean model `f̂`, with the input scaling used
/// during training.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentNet {
    pub arch: Architecture,
    pub params: NetParams,
    pub scaling: Standardization,
}

impl RecurrentNet {
    pub fn zeros(arch: Architecture) -> Result<Self, RnnError> {
        arch.validate()?;
        Ok(Self { params: NetParams::zeros(&arch), scaling: Standardization::identity(arch.input_dim), arch })
    }

    pub fn random(arch: Architecture, seed: u64) -> Result<Self, RnnError> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            params: NetParams::random(&arch, &mut rng),
            scaling: Standardization::identity(arch.input_dim),
            arch,
        })
    }

    /// One-step prediction on the data scale from an `n × p` window of
    /// observations, oldest column first.
    pub fn predict(&self, window: &DMatrix<f64>) -> Result<DVector<f64>, RnnError> {
        let z = self.scaling.apply(window);
        let (pred, _) = forward_window(self, &z)?;
        Ok(self.scaling.invert_vec(&pred))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_roundtrip_and_names() {
        let arch = Architecture { cell: CellKind::Mlstm, input_dim: 3, lag: 2, layers: 2, size: 4, bidirectional: true };
        let net = RecurrentNet::random(arch, 7).unwrap();
        let flat = net.params.flatten();
        let mut other = NetParams::zeros(&arch);
        other.load_flat(&flat).unwrap();
        assert_eq!(other, net.params);
        assert_eq!(net.params.name_of(0), "layer0.fwd.W_iy[0]");
        assert_eq!(net.params.name_of(flat.len() - 1), "readout.b[2]");
        assert_eq!(net.params.penalty_mask().len(), flat.len());
    }

    #[test]
    fn initialization_is_bounded_and_seeded() {
        let arch = Architecture { cell: CellKind::Lstm, input_dim: 2, lag: 1, layers: 1, size: 16, bidirectional: false };
        let a = RecurrentNet::random(arch, 1).unwrap();
        let b = RecurrentNet::random(arch, 1).unwrap();
        let c = RecurrentNet::random(arch, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.params.flatten().iter().all(|v| v.abs() <= 0.25));
        assert!(a.params.layers[0].forward.gates.iter().all(|g| g.bias.iter().all(|b| *b == 0.0)));
    }

    #[test]
    fn architecture_rejects_four_layers() {
        let arch = Architecture { cell: CellKind::Gru, input_dim: 2, lag: 1, layers: 4, size: 4, bidirectional: false };
        assert!(RecurrentNet::zeros(arch).is_err());
    }
}
