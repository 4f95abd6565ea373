//! Least-squares VAR(p) benchmark with AIC lag selection.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum BaselineError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("segment of length {len} is too short for lag {p} (need more than {needed})")]
    TooShort { len: usize, p: usize, needed: usize },
    #[error("regressor matrix is rank deficient at lag {p}")]
    Singular { p: usize },
    #[error("no lag in 1..={p_max} gave a positive definite residual covariance")]
    NoAdmissibleLag { p_max: usize },
}

/// `y_t = μ0 + A_1 y_{t−1} + … + A_p y_{t−p} + ε_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "VarModelJson", try_from = "VarModelJson")]
pub struct VarModel {
    pub p: usize,
    pub mu0: DVector<f64>,
    pub a: Vec<DMatrix<f64>>,
    pub sigma: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VarModelJson {
    p: usize,
    mu0: Vec<f64>,
    #[serde(rename = "A")]
    a: Vec<Vec<Vec<f64>>>,
    sigma: Vec<Vec<f64>>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(r: &[Vec<f64>], n: usize) -> Result<DMatrix<f64>, String> {
    if r.len() != n || r.iter().any(|row| row.len() != n) {
        return Err(format!("expected a {n}×{n} matrix"));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| r[i][j]))
}

impl From<VarModel> for VarModelJson {
    fn from(m: VarModel) -> Self {
        VarModelJson { p: m.p, mu0: m.mu0.iter().copied().collect(), a: m.a.iter().map(rows).collect(), sigma: rows(&m.sigma) }
    }
}

impl TryFrom<VarModelJson> for VarModel {
    type Error = String;

    fn try_from(j: VarModelJson) -> Result<Self, String> {
        let n = j.mu0.len();
        if j.a.len() != j.p {
            return Err(format!("p = {} but {} coefficient matrices", j.p, j.a.len()));
        }
        let a = j.a.iter().map(|m| from_rows(m, n)).collect::<Result<Vec<_>, _>>()?;
        Ok(VarModel { p: j.p, mu0: DVector::from_vec(j.mu0), a, sigma: from_rows(&j.sigma, n)? })
    }
}

impl VarModel {
    pub fn n(&self) -> usize {
        self.mu0.len()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// OLS fit of a VAR(p) on the `n × T` segment `y`, using every target with
/// a full lag history.
pub fn fit_var_ols(y: &DMatrix<f64>, p: usize) -> Result<VarModel, BaselineError> {
    fit_from(y, p, p)
}

// Targets are y_start .. y_{T-1}; start ≥ p.
fn fit_from(y: &DMatrix<f64>, p: usize, start: usize) -> Result<VarModel, BaselineError> {
    let (n, len) = y.shape();
    if p == 0 {
        return Err(BaselineError::Shape("lag must be at least 1".into()));
    }
    let k = 1 + n * p;
    if len <= start || len - start <= k {
        return Err(BaselineError::TooShort { len, p, needed: start + k });
    }
    let t_eff = len - start;
    let x = DMatrix::from_fn(t_eff, k, |r, c| {
        if c == 0 {
            1.0
        } else {
            let (lag, i) = ((c - 1) / n + 1, (c - 1) % n);
            y[(i, start + r - lag)]
        }
    });
    let targets = y.columns(start, t_eff).transpose();

    let qr = x.clone().qr();
    let r = qr.r();
    let scale = r.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if r.diagonal().iter().any(|d| d.abs() <= 1e-10 * scale) {
        return Err(BaselineError::Singular { p });
    }
    let qty = qr.q().transpose() * &targets;
    let b = r.solve_upper_triangular(&qty).ok_or(BaselineError::Singular { p })?;

    let resid = &targets - &x * &b;
    let sigma = resid.transpose() * &resid / t_eff as f64;
    let mu0 = b.row(0).transpose();
    let a = (0..p)
        .map(|l| b.rows(1 + l * n, n).transpose())
        .collect();
    Ok(VarModel { p, mu0, a, sigma: (&sigma + sigma.transpose()) * 0.5 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagSelection {
    pub p: usize,
    /// AIC by lag (index 0 is p = 1); `None` where the lag was skipped.
    pub aic: Vec<Option<f64>>,
    pub skipped: Vec<usize>,
}

/// `AIC(p) = ln det Σ̂(p) + 2pn²/T_eff`, all lags fit on the same targets
/// (the first `p_max` observations are presample for every candidate).
pub fn select_lag_aic(y: &DMatrix<f64>, p_max: usize) -> Result<LagSelection, BaselineError> {
    if p_max == 0 {
        return Err(BaselineError::Shape("p_max must be at least 1".into()));
    }
    let n = y.nrows();
    let t_eff = y.ncols().saturating_sub(p_max) as f64;
    let mut aic = Vec::with_capacity(p_max);
    let mut skipped = Vec::new();
    for p in 1..=p_max {
        let value = match fit_from(y, p, p_max) {
            Ok(m) => m.sigma.clone().cholesky().map(|c| {
                let ln_det = 2.0 * c.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
                ln_det + 2.0 * (p * n * n) as f64 / t_eff
            }),
            Err(e @ BaselineError::TooShort { .. }) => return Err(e),
            Err(_) => None,
        };
        if value.is_none() {
            log::warn!("VAR({p}) skipped in AIC selection: residual covariance not positive definite");
            skipped.push(p);
        }
        aic.push(value);
    }
    let best = aic
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.map(|v| (i + 1, v)))
        .fold(None, |acc: Option<(usize, f64)>, (p, v)| match acc {
            Some((_, bv)) if bv <= v => acc,
            _ => Some((p, v)),
        })
        .ok_or(BaselineError::NoAdmissibleLag { p_max })?;
    Ok(LagSelection { p: best.0, aic, skipped })
}

/// One-step conditional mean from an `n × p` lag window, oldest column first.
pub fn var_forecast(model: &VarModel, lags: &DMatrix<f64>) -> Result<DVector<f64>, BaselineError> {
    let n = model.n();
    if lags.shape() != (n, model.p) {
        return Err(BaselineError::Shape(format!("lag window {:?}, model needs ({n}, {})", lags.shape(), model.p)));
    }
    let mut out = model.mu0.clone();
    for (i, a) in model.a.iter().enumerate() {
        out += a * lags.column(model.p - 1 - i);
    }
    Ok(out)
}

/// One-step forecasts for each `t` in `range`, using observed lags from `y`.
/// Column `j` forecasts `y_{range.start + j}`.
pub fn rolling_var_forecasts(
    model: &VarModel,
    y: &DMatrix<f64>,
    range: std::ops::Range<usize>,
) -> Result<DMatrix<f64>, BaselineError> {
    if range.start < model.p || range.end > y.ncols() {
        return Err(BaselineError::Shape(format!("forecast range {range:?} with lag {} over {} points", model.p, y.ncols())));
    }
    let mut out = DMatrix::zeros(model.n(), range.len());
    for (j, t) in range.enumerate() {
        let f = var_forecast(model, &y.columns(t - model.p, model.p).into_owned())?;
        out.set_column(j, &f);
    }
    Ok(out)
}
