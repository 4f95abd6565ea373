//! Synthetic data: VAR(2) with skewed-t errors, and AR(1)-GARCH(1,1) margins
//! coupled through an R-vine copula.

mod copula;
mod skewt;

pub use copula::{bicop_h, bicop_hinv, rvine_sample, Family, VineSpec};
pub use skewt::{skewt_cdf, skewt_density, skewt_mean, skewt_quantile, skewt_sample, SkewedTParams};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panel::{PanelError, SeriesPanel};
use skewt::StandardSkewT;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("invalid R-vine matrix in column {column}: {reason}")]
    Structure { column: usize, reason: String },
    #[error("skewed-t quantile inversion failed at u = {u} for {params:?}")]
    Quantile { u: f64, params: SkewedTParams },
    #[error("no stationary coefficient draw after {0} attempts")]
    Stationarity(usize),
    #[error(transparent)]
    Panel(#[from] PanelError),
}

fn series_names(dim: usize) -> Vec<String> {
    (1..=dim).map(|i| format!("y{i}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VarSkewtConfig {
    pub dim: usize,
    pub length: usize,
    /// Intercept μ_{i,0}, shared by all series.
    pub mu0: f64,
    /// Coefficients are drawn uniformly on `[−bound, bound]`.
    pub coef_bound: f64,
    pub innovation: SkewedTParams,
    pub centered: bool,
    pub burn_in: usize,
    /// Draws are rejected until the companion spectral radius is below this.
    pub max_radius: f64,
    pub max_draws: usize,
}

impl Default for VarSkewtConfig {
    fn default() -> Self {
        Self {
            dim: 5,
            length: 5000,
            mu0: 100.0,
            coef_bound: 0.2,
            innovation: SkewedTParams { xi: 1.5, nu: 3.0, scale: 20.0 },
            centered: true,
            burn_in: 500,
            max_radius: 0.98,
            max_draws: 1000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VarSimulation {
    pub panel: SeriesPanel,
    pub mu0: DVector<f64>,
    pub a1: DMatrix<f64>,
    pub a2: DMatrix<f64>,
}

impl VarSimulation {
    /// `(I − A_1 − A_2)^{-1} μ0`, the stationary mean under centered errors.
    pub fn unconditional_mean(&self) -> DVector<f64> {
        let n = self.mu0.len();
        let m = DMatrix::identity(n, n) - &self.a1 - &self.a2;
        m.lu().solve(&self.mu0).expect("stationary VAR has I − A1 − A2 invertible")
    }
}

/// Spectral radius of the VAR(2) companion matrix.
pub fn companion_radius(a1: &DMatrix<f64>, a2: &DMatrix<f64>) -> f64 {
    let n = a1.nrows();
    let mut c = DMatrix::zeros(2 * n, 2 * n);
    c.view_mut((0, 0), (n, n)).copy_from(a1);
    c.view_mut((0, n), (n, n)).copy_from(a2);
    c.view_mut((n, 0), (n, n)).fill_with_identity();
    c.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Simulates `y_t = μ0 + A_1 y_{t−1} + A_2 y_{t−2} + ε_t` with independent
/// skewed-t errors and random stationary coefficients.
pub fn simulate_var_skewt(cfg: &VarSkewtConfig, seed: u64) -> Result<VarSimulation, SimError> {
    let n = cfg.dim;
    if n == 0 || cfg.length == 0 {
        return Err(SimError::Params("dimension and length must be positive".into()));
    }
    let p = cfg.innovation;
    if !(p.xi > 0.0 && p.nu > 0.0 && p.scale >= 0.0) {
        return Err(SimError::Params(format!("innovation parameters {p:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = cfg.coef_bound;
    let mut draws = 0;
    let (a1, a2) = loop {
        if draws == cfg.max_draws {
            return Err(SimError::Stationarity(draws));
        }
        draws += 1;
        let a1 = DMatrix::from_fn(n, n, |_, _| rng.random_range(-b..=b));
        let a2 = DMatrix::from_fn(n, n, |_, _| rng.random_range(-b..=b));
        if companion_radius(&a1, &a2) < cfg.max_radius {
            break (a1, a2);
        }
    };
    let mu0 = DVector::from_element(n, cfg.mu0);
    let mut noise = StandardSkewT::new(p.xi, p.nu, cfg.centered)?;
    let total = cfg.burn_in + cfg.length;
    let mut out = DMatrix::zeros(n, cfg.length);
    let mut prev1 = DVector::zeros(n);
    let mut prev2 = DVector::zeros(n);
    for t in 0..total {
        let eps = DVector::from_fn(n, |_, _| p.scale * noise.draw(&mut rng));
        let y = &mu0 + &a1 * &prev1 + &a2 * &prev2 + eps;
        if t >= cfg.burn_in {
            out.set_column(t - cfg.burn_in, &y);
        }
        prev2 = std::mem::replace(&mut prev1, y);
    }
    let panel = SeriesPanel::from_rows(series_names(n), out)?;
    Ok(VarSimulation { panel, mu0, a1, a2 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GarchParams {
    pub mu: f64,
    pub phi1: f64,
    pub w: f64,
    pub alpha1: f64,
    pub beta1: f64,
    pub innovation: SkewedTParams,
}

impl GarchParams {
    /// `(μ, φ1, w, α1, β1, ξ, ν) = (50, .6, .5, .05, .8, 1.5, 3)`.
    pub fn reference() -> Self {
        Self {
            mu: 50.0,
            phi1: 0.6,
            w: 0.5,
            alpha1: 0.05,
            beta1: 0.8,
            innovation: SkewedTParams { xi: 1.5, nu: 3.0, scale: 1.0 },
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.innovation.validate()?;
        let ok = self.phi1.abs() < 1.0
            && self.w > 0.0
            && self.alpha1 >= 0.0
            && self.beta1 >= 0.0
            && self.alpha1 + self.beta1 < 1.0
            && self.mu.is_finite();
        if ok {
            Ok(())
        } else {
            Err(SimError::Params(format!("GARCH parameters {self:?} violate |φ1| < 1, w > 0, α1, β1 ≥ 0, α1 + β1 < 1")))
        }
    }

    pub fn unconditional_variance(&self) -> f64 {
        self.w / (1.0 - self.alpha1 - self.beta1)
    }
}

/// The five-dimensional vine used in the simulation study.
pub fn reference_vine() -> VineSpec {
    VineSpec {
        dim: 5,
        tree: vec![
            vec![2, 0, 0, 0, 0],
            vec![5, 3, 0, 0, 0],
            vec![3, 5, 4, 0, 0],
            vec![1, 1, 5, 5, 0],
            vec![4, 4, 1, 1, 1],
        ],
        family: vec![
            vec![0, 0, 0, 0, 0],
            vec![1, 0, 0, 0, 0],
            vec![3, 3, 0, 0, 0],
            vec![4, 4, 4, 0, 0],
            vec![4, 1, 1, 3, 0],
        ],
        params: vec![
            vec![0.0, 0.0, 0.0, 0.0, 0.0],
            vec![0.2, 0.0, 0.0, 0.0, 0.0],
            vec![0.9, 1.1, 0.0, 0.0, 0.0],
            vec![1.5, 1.6, 1.9, 0.0, 0.0],
            vec![3.9, 0.9, 0.5, 4.8, 0.0],
        ],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CopulaGarchConfig {
    pub length: usize,
    pub burn_in: usize,
    pub centered: bool,
    pub garch: GarchParams,
    pub vine: VineSpec,
}

impl Default for CopulaGarchConfig {
    fn default() -> Self {
        Self { length: 5000, burn_in: 500, centered: true, garch: GarchParams::reference(), vine: reference_vine() }
    }
}

/// Vine-coupled skewed-t innovations driving per-series AR(1)-GARCH(1,1):
/// `ε = σ_t Z_t`, `σ²_t = w + α1 ε²_{t−1} + β1 σ²_{t−1}`,
/// `y_t − μ = φ1 (y_{t−1} − μ) + ε_t`.
pub fn simulate_copula_ar_garch(cfg: &CopulaGarchConfig, seed: u64) -> Result<SeriesPanel, SimError> {
    let g = cfg.garch;
    g.validate()?;
    let d = cfg.vine.dim;
    if cfg.length == 0 {
        return Err(SimError::Params("length must be positive".into()));
    }
    let total = cfg.burn_in + cfg.length;
    let u = rvine_sample(&cfg.vine, total, seed)?;
    let shift = if cfg.centered { skewt_mean(g.innovation.xi, g.innovation.nu)? * g.innovation.scale } else { 0.0 };
    let mut out = DMatrix::zeros(d, cfg.length);
    for i in 0..d {
        let mut sigma2 = g.unconditional_variance();
        let mut eps_prev: Option<f64> = None;
        let mut y_prev = g.mu;
        for t in 0..total {
            if let Some(e) = eps_prev {
                sigma2 = g.w + g.alpha1 * e * e + g.beta1 * sigma2;
            }
            let z = skewt_quantile(u[(t, i)], &g.innovation)? - shift;
            let eps = sigma2.sqrt() * z;
            let y = g.mu + g.phi1 * (y_prev - g.mu) + eps;
            if t >= cfg.burn_in {
                out[(i, t - cfg.burn_in)] = y;
            }
            eps_prev = Some(eps);
            y_prev = y;
        }
    }
    Ok(SeriesPanel::from_rows(series_names(d), out)?)
}
