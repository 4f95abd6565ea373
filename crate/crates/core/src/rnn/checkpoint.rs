use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, NetParams, RecurrentNet, RnnError, TrainConfig};
use crate::panel::Standardization;

const FORMAT: &str = "deeptail-checkpoint";
const VERSION: u32 = 1;

/// JSON container for a trained network. Parameters are stored flattened in
/// tensor visiting order; JSON floats use shortest round-trip text, so a save
/// and load reproduces every parameter bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub arch: Architecture,
    pub series: Vec<String>,
    pub scaling: Standardization,
    pub seed: u64,
    pub config: Option<TrainConfig>,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn from_net(net: &RecurrentNet, series: Vec<String>, seed: u64, config: Option<TrainConfig>) -> Self {
        Self {
            format: FORMAT.to_string(),
            version: VERSION,
            arch: net.arch,
            series,
            scaling: net.scaling.clone(),
            seed,
            config,
            params: net.params.flatten(),
        }
    }

    pub fn to_net(&self) -> Result<RecurrentNet, RnnError> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(RnnError::Checkpoint(format!("unsupported format {} v{}", self.format, self.version)));
        }
        self.arch.validate()?;
        if self.scaling.mean.len() != self.arch.input_dim || self.scaling.sd.len() != self.arch.input_dim {
            return Err(RnnError::Checkpoint("scaling does not match input dimension".into()));
        }
        let mut params = NetParams::zeros(&self.arch);
        params.load_flat(&self.params)?;
        Ok(RecurrentNet { arch: self.arch, params, scaling: self.scaling.clone() })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, RnnError> {
        serde_json::from_str(text).map_err(|e| RnnError::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), RnnError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RnnError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
