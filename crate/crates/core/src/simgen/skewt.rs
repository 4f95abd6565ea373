//! Two-piece skewed Student-t law: `g(z) = 2/(ξ + 1/ξ) [t_ν(ξz) 1(z<0) + t_ν(z/ξ) 1(z≥0)]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StudentT};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, StudentsT};
use statrs::function::gamma::ln_gamma;

use super::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkewedTParams {
    /// Skewness ξ; values above 1 put more mass on the right.
    pub xi: f64,
    /// Degrees of freedom ν.
    pub nu: f64,
    /// Scale σ_e applied after optional centering.
    pub scale: f64,
}

impl SkewedTParams {
    pub fn new(xi: f64, nu: f64, scale: f64) -> Result<Self, SimError> {
        let p = Self { xi, nu, scale };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.xi > 0.0 && self.nu > 0.0 && self.scale > 0.0 && self.xi.is_finite() && self.scale.is_finite() {
            Ok(())
        } else {
            Err(SimError::Params(format!("skewed-t needs ξ, ν, σ_e > 0, got {self:?}")))
        }
    }

    fn student(&self) -> StudentsT {
        StudentsT::new(0.0, 1.0, self.nu).expect("ν > 0 checked by validate")
    }
}

/// `E|T|` for a standard Student-t with `ν > 1` degrees of freedom.
fn abs_t_mean(nu: f64) -> f64 {
    let log = 0.5 * nu.ln() + ln_gamma((nu + 1.0) / 2.0) - 0.5 * std::f64::consts::PI.ln() - ln_gamma(nu / 2.0);
    2.0 * log.exp() / (nu - 1.0)
}

/// Mean of the unscaled law: `E|T|·(ξ − 1/ξ)`. Requires `ν > 1`.
pub fn skewt_mean(xi: f64, nu: f64) -> Result<f64, SimError> {
    if !(nu > 1.0) {
        return Err(SimError::Params(format!("the skewed-t mean needs ν > 1, got {nu}")));
    }
    Ok(abs_t_mean(nu) * (xi - 1.0 / xi))
}

/// Density of `σ_e·Z` with `Z ~ g` (no centering).
pub fn skewt_density(x: f64, p: &SkewedTParams) -> f64 {
    let t = p.student();
    let z = x / p.scale;
    let inner = if z < 0.0 { t.pdf(p.xi * z) } else { t.pdf(z / p.xi) };
    2.0 / (p.xi + 1.0 / p.xi) * inner / p.scale
}

/// Distribution function of `σ_e·Z`, in closed form through the Student-t CDF.
pub fn skewt_cdf(x: f64, p: &SkewedTParams) -> f64 {
    let t = p.student();
    let z = x / p.scale;
    let xi2 = p.xi * p.xi;
    if z < 0.0 {
        2.0 / (1.0 + xi2) * t.cdf(p.xi * z)
    } else {
        // 1 − upper tail keeps precision for large z
        1.0 - 2.0 * xi2 / (1.0 + xi2) * t.sf(z / p.xi)
    }
}

/// Quantile of `σ_e·Z`: piecewise Student-t inversion polished by Newton steps
/// on [`skewt_cdf`].
pub fn skewt_quantile(u: f64, p: &SkewedTParams) -> Result<f64, SimError> {
    if !(u > 0.0 && u < 1.0) {
        return Err(SimError::Quantile { u, params: *p });
    }
    let t = p.student();
    let xi2 = p.xi * p.xi;
    let split = 1.0 / (1.0 + xi2);
    let mut z = if u < split {
        t.inverse_cdf(u * (1.0 + xi2) / 2.0) / p.xi
    } else {
        // upper piece via the survival side
        let s = (1.0 - u) * (1.0 + xi2) / (2.0 * xi2);
        -t.inverse_cdf(s) * p.xi
    };
    if !z.is_finite() {
        return Err(SimError::Quantile { u, params: *p });
    }
    let unit = SkewedTParams { scale: 1.0, ..*p };
    for _ in 0..4 {
        let f = skewt_cdf(z, &unit) - u;
        let d = skewt_density(z, &unit);
        if d <= 0.0 || !d.is_finite() {
            break;
        }
        let step = f / d;
        if !step.is_finite() {
            break;
        }
        z -= step;
        if step.abs() <= 1e-15 * z.abs().max(1.0) {
            break;
        }
    }
    let x = z * p.scale;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(SimError::Quantile { u, params: *p })
    }
}

/// Draws via the two-piece construction: positive with probability
/// `ξ²/(1+ξ²)` and magnitude `ξ|T|`, else `−|T|/ξ`. With `centered` the
/// analytic mean is removed before scaling by `σ_e`.
pub fn skewt_sample(p: &SkewedTParams, count: usize, seed: u64, centered: bool) -> Result<Vec<f64>, SimError> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sampler = StandardSkewT::new(p.xi, p.nu, centered)?;
    Ok((0..count).map(|_| p.scale * sampler.draw(&mut rng)).collect())
}

/// Unscaled, optionally centered draws from `g`.
pub(crate) struct StandardSkewT {
    xi: f64,
    positive: f64,
    shift: f64,
    t: StudentT<f64>,
}

impl StandardSkewT {
    pub(crate) fn new(xi: f64, nu: f64, centered: bool) -> Result<Self, SimError> {
        let shift = if centered { skewt_mean(xi, nu)? } else { 0.0 };
        let t = StudentT::new(nu).map_err(|e| SimError::Params(format!("Student-t with ν = {nu}: {e}")))?;
        Ok(Self { xi, positive: xi * xi / (1.0 + xi * xi), shift, t })
    }

    pub(crate) fn draw<R: Rng>(&mut self, rng: &mut R) -> f64 {
        let up = rng.random::<f64>() < self.positive;
        let m = self.t.sample(rng).abs();
        let z = if up { self.xi * m } else { -m / self.xi };
        z - self.shift
    }
}
