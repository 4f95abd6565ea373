//! Typed JSON configs. Unknown fields are rejected and every error carries
//! the JSON pointer of the offending value.

use std::path::Path;

use chrono::{DateTime, Utc};
use deeptail::evt::QuantileRule;
use deeptail::forecast::{AggregateMode, EvtConfig};
use deeptail::panel::{Bucket, SplitSpec};
use deeptail::select::GridSpec;
use deeptail::simgen::{CopulaGarchConfig, VarSkewtConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
#[error("config {file}{}: {message}", if .pointer.is_empty() { String::new() } else { format!(" at `{}`", .pointer) })]
pub struct ConfigError {
    pub file: String,
    /// RFC 6901 pointer; empty for the document root.
    pub pointer: String,
    pub message: String,
}

fn pointer_of(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } => out.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Enum { variant } => out.push_str(variant),
            Segment::Unknown => out.push('?'),
        }
    }
    out
}

/// Deserializes `value`, reporting errors at `prefix` + the inner pointer.
pub fn from_value<T: DeserializeOwned>(value: Value, file: &str, prefix: &str) -> Result<T, ConfigError> {
    serde_path_to_error::deserialize(value).map_err(|e| ConfigError {
        file: file.to_string(),
        pointer: format!("{prefix}{}", pointer_of(e.path())),
        message: e.inner().to_string(),
    })
}

pub fn parse_str<T: DeserializeOwned>(text: &str, file: &str) -> Result<T, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| ConfigError {
        file: file.to_string(),
        pointer: pointer_of(e.path()),
        message: e.inner().to_string(),
    })
}

/// Reads a JSON document, or `{}` when no file is given.
pub fn read_json(path: Option<&Path>) -> Result<(Value, String), ConfigError> {
    let Some(path) = path else {
        return Ok((Value::Object(Default::default()), "<defaults>".into()));
    };
    let file = path.display().to_string();
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError { file: file.clone(), pointer: String::new(), message: e.to_string() })?;
    let value = parse_str::<Value>(&text, &file)?;
    Ok((value, file))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorName {
    VarSkewt,
    CopulaArGarch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", content = "params", rename_all = "kebab-case")]
pub enum Generator {
    VarSkewt(VarSkewtConfig),
    CopulaArGarch(CopulaGarchConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateConfig {
    #[serde(flatten)]
    pub generator: Generator,
    pub seed: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateHead {
    #[serde(default = "default_generator")]
    generator: GeneratorName,
    #[serde(default)]
    params: Value,
    #[serde(default)]
    seed: u64,
}

fn default_generator() -> GeneratorName {
    GeneratorName::VarSkewt
}

impl SimulateConfig {
    /// `{"generator": "var-skewt" | "copula-ar-garch", "params": {...}, "seed": N}`.
    pub fn from_json(value: Value, file: &str, generator_flag: Option<&str>) -> Result<Self, ConfigError> {
        let mut value = value;
        if let (Some(g), Value::Object(map)) = (generator_flag, &mut value) {
            map.insert("generator".into(), Value::String(g.to_string()));
        }
        let head: SimulateHead = from_value(value, file, "")?;
        let params = if head.params.is_null() { Value::Object(Default::default()) } else { head.params };
        let generator = match head.generator {
            GeneratorName::VarSkewt => Generator::VarSkewt(from_value(params, file, "/params")?),
            GeneratorName::CopulaArGarch => Generator::CopulaArGarch(from_value(params, file, "/params")?),
        };
        Ok(Self { generator, seed: head.seed })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregateConfig {
    pub bucket: Bucket,
    /// RFC 3339; the window is `[start, end)`.
    pub start: String,
    pub end: String,
    #[serde(default)]
    pub targets: Option<Vec<String>>,
    #[serde(default)]
    pub strict: bool,
}

impl AggregateConfig {
    pub fn window(&self, file: &str) -> Result<(DateTime<Utc>, DateTime<Utc>), ConfigError> {
        let parse = |s: &str, ptr: &str| {
            DateTime::parse_from_rfc3339(s).map(|d| d.with_timezone(&Utc)).map_err(|e| ConfigError {
                file: file.to_string(),
                pointer: ptr.to_string(),
                message: format!("`{s}`: {e}"),
            })
        };
        Ok((parse(&self.start, "/start")?, parse(&self.end, "/end")?))
    }
}

/// Split boundaries as exclusive end indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub train_end: usize,
    pub valid_end: usize,
    pub test_end: usize,
}

impl SplitConfig {
    /// 60 / 20 / 20 of the panel when none is configured.
    pub fn resolve(split: Option<SplitConfig>, len: usize) -> SplitConfig {
        split.unwrap_or(SplitConfig { train_end: len * 3 / 5, valid_end: len * 4 / 5, test_end: len })
    }

    pub fn spec(&self) -> Result<SplitSpec, deeptail::panel::PanelError> {
        SplitSpec::new(self.train_end, self.valid_end, self.test_end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainCmdConfig {
    pub split: Option<SplitConfig>,
    pub grid: GridSpec,
    /// Apply `ln(1 + x)` to the panel first.
    pub log_transform: bool,
    /// Extra retraining rounds over the test segment.
    pub retrain: usize,
    /// Write every candidate's checkpoint under `candidates/`.
    pub keep_candidates: bool,
}

impl Default for TrainCmdConfig {
    fn default() -> Self {
        Self { split: None, grid: GridSpec::desk(), log_transform: false, retrain: 0, keep_candidates: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastCmdConfig {
    pub split: Option<SplitConfig>,
    pub levels: Vec<f64>,
    pub refit_every: usize,
    pub evt: EvtConfig,
    pub mode: AggregateMode,
    pub log_transform: bool,
}

impl Default for ForecastCmdConfig {
    fn default() -> Self {
        let f = deeptail::forecast::ForecastConfig::default();
        Self { split: None, levels: f.levels, refit_every: f.refit_every, evt: f.evt, mode: f.mode, log_transform: false }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestCmdConfig {
    pub log_transform: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseConfig {
    pub threshold_quantile: f64,
    pub grid_size: usize,
    /// Rows to use when the residual file holds several series.
    pub series: Option<String>,
    pub rule: QuantileRule,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self { threshold_quantile: 0.9, grid_size: 50, series: None, rule: QuantileRule::Pot }
    }
}
