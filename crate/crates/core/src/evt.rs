//! Peaks-over-threshold modelling with the generalized Pareto distribution:
//! survival and quantile functions, maximum-likelihood fitting, the
//! semiparametric tail quantile, threshold diagnostics and QQ/PP data.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Shapes with `|ξ|` below this use the exponential branch.
pub const XI_ZERO: f64 = 1e-8;
/// Minimum number of exceedances accepted by [`fit_gpd_mle`].
pub const MIN_EXCEEDANCES: usize = 20;

#[derive(Debug, Error, PartialEq)]
pub enum EvtError {
    #[error("x = {x} lies outside the support [{lower}, {upper}]")]
    Domain { x: f64, lower: f64, upper: f64 },
    #[error("probability {0} outside (0, 1)")]
    Probability(f64),
    #[error("level {q} is below the threshold probability {threshold_prob}; use the empirical residual quantile")]
    BelowThreshold { q: f64, threshold_prob: f64 },
    #[error("only {count} exceedances above the threshold, need at least {needed}")]
    TooFewExceedances { count: usize, needed: usize },
    #[error("likelihood optimizer failed at xi = {xi}, sigma = {sigma} (gradient norm {grad_norm})")]
    Optimizer { xi: f64, sigma: f64, grad_norm: f64 },
    #[error("empty sample")]
    Empty,
    #[error("need at least {needed} observations, got {got}")]
    SampleSize { needed: usize, got: usize },
    #[error("invalid parameters: {0}")]
    Parameters(String),
}

/// Fitted tail model. `threshold` is in residual units; `n` counts the whole
/// sample and `n_exceed` the points strictly above the threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpdFit {
    pub threshold: f64,
    pub xi: f64,
    pub sigma: f64,
    pub se_xi: Option<f64>,
    pub se_sigma: Option<f64>,
    pub n: usize,
    pub n_exceed: usize,
    pub loglik: f64,
}

impl GpdFit {
    /// Model with given parameters and no estimation metadata.
    pub fn new(threshold: f64, xi: f64, sigma: f64, n: usize, n_exceed: usize) -> Result<Self, EvtError> {
        if !(sigma > 0.0) || !xi.is_finite() || !threshold.is_finite() {
            return Err(EvtError::Parameters(format!("xi = {xi}, sigma = {sigma}, threshold = {threshold}")));
        }
        if n_exceed == 0 || n_exceed > n {
            return Err(EvtError::Parameters(format!("n_exceed = {n_exceed}, n = {n}")));
        }
        Ok(Self { threshold, xi, sigma, se_xi: None, se_sigma: None, n, n_exceed, loglik: f64::NAN })
    }

    /// Upper end of the support (finite only for ξ < 0).
    pub fn upper_endpoint(&self) -> f64 {
        if self.xi < 0.0 {
            self.threshold - self.sigma / self.xi
        } else {
            f64::INFINITY
        }
    }

    /// `1 − N_u/n`: the lowest level the tail model covers.
    pub fn threshold_prob(&self) -> f64 {
        1.0 - self.n_exceed as f64 / self.n as f64
    }
}

/// Survival function `Ḡ(x)` of the GPD located at the threshold.
pub fn gpd_sf(fit: &GpdFit, x: f64) -> Result<f64, EvtError> {
    if x < fit.threshold || x.is_nan() {
        return Err(EvtError::Domain { x, lower: fit.threshold, upper: fit.upper_endpoint() });
    }
    let z = (x - fit.threshold) / fit.sigma;
    if fit.xi.abs() < XI_ZERO {
        return Ok((-z).exp());
    }
    let base = 1.0 + fit.xi * z;
    if base <= 0.0 {
        return Ok(0.0);
    }
    Ok((-(base.ln()) / fit.xi).exp())
}

pub fn gpd_cdf(fit: &GpdFit, x: f64) -> Result<f64, EvtError> {
    let z = (x - fit.threshold) / fit.sigma;
    if x < fit.threshold || x.is_nan() {
        return Err(EvtError::Domain { x, lower: fit.threshold, upper: fit.upper_endpoint() });
    }
    if fit.xi.abs() < XI_ZERO {
        return Ok(-(-z).exp_m1());
    }
    let base = 1.0 + fit.xi * z;
    if base <= 0.0 {
        return Ok(1.0);
    }
    Ok(-((-(base.ln()) / fit.xi).exp_m1()))
}

fn check_prob(q: f64) -> Result<(), EvtError> {
    if q > 0.0 && q < 1.0 {
        Ok(())
    } else {
        Err(EvtError::Probability(q))
    }
}

/// `μ + (σ/ξ)(s^{−ξ} − 1)` for a tail probability `s`, with the exponential limit.
fn tail_quantile(fit: &GpdFit, s: f64) -> f64 {
    if fit.xi.abs() < XI_ZERO {
        fit.threshold - fit.sigma * s.ln()
    } else {
        fit.threshold + fit.sigma / fit.xi * (-fit.xi * s.ln()).exp_m1()
    }
}

/// Inverse of the GPD distribution function located at the threshold.
pub fn gpd_quantile(fit: &GpdFit, q: f64) -> Result<f64, EvtError> {
    check_prob(q)?;
    Ok(tail_quantile(fit, 1.0 - q))
}

/// Tail quantile of the whole residual distribution: the threshold carries
/// probability `1 − N_u/n` and the GPD models the mass above it.
pub fn pot_quantile(fit: &GpdFit, q: f64) -> Result<f64, EvtError> {
    check_prob(q)?;
    let tp = fit.threshold_prob();
    // Tolerates rounding at the boundary q = 1 − N_u/n.
    if q < tp - 1e-12 {
        return Err(EvtError::BelowThreshold { q, threshold_prob: tp });
    }
    let s = ((1.0 - q) * fit.n as f64 / fit.n_exceed as f64).min(1.0);
    Ok(tail_quantile(fit, s))
}

/// How a residual tail quantile is read off a fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantileRule {
    /// Semiparametric POT quantile of the whole residual distribution.
    #[default]
    Pot,
    /// `G^{-1}(q)` of the excess law shifted to the threshold, ignoring the
    /// mass below it. Kept for comparison only.
    LocationShifted,
}

pub fn residual_quantile(fit: &GpdFit, q: f64, rule: QuantileRule) -> Result<f64, EvtError> {
    match rule {
        QuantileRule::Pot => pot_quantile(fit, q),
        QuantileRule::LocationShifted => gpd_quantile(fit, q),
    }
}

/// Empirical quantile by linear interpolation of order statistics at
/// 1-based position `h = (n−1)p + 1`.
pub fn empirical_quantile(sample: &[f64], level: f64) -> Result<f64, EvtError> {
    if sample.is_empty() {
        return Err(EvtError::Empty);
    }
    if !(0.0..=1.0).contains(&level) {
        return Err(EvtError::Probability(level));
    }
    let mut sorted = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&sorted, level))
}

pub(crate) fn quantile_sorted(sorted: &[f64], level: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * level;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    if frac == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

/// Threshold at the empirical `level`-quantile of the residuals.
pub fn threshold_from_quantile(residuals: &[f64], level: f64) -> Result<f64, EvtError> {
    check_prob(level)?;
    empirical_quantile(residuals, level)
}

// ln(1 + ξz)/ξ, ξ ≠ 0, accurate for small ξz.
fn log1p_over(xi: f64, z: f64) -> f64 {
    (xi * z).ln_1p() / xi
}

/// GPD log-likelihood of excesses; `-inf` outside the parameter space.
pub fn gpd_loglik(excesses: &[f64], xi: f64, sigma: f64) -> f64 {
    if !(sigma > 0.0) || !xi.is_finite() {
        return f64::NEG_INFINITY;
    }
    let n = excesses.len() as f64;
    if xi.abs() < XI_ZERO {
        return -n * sigma.ln() - excesses.iter().sum::<f64>() / sigma;
    }
    let mut acc = 0.0;
    for &e in excesses {
        let z = e / sigma;
        if 1.0 + xi * z <= 0.0 {
            return f64::NEG_INFINITY;
        }
        acc += (1.0 + xi) * log1p_over(xi, z);
    }
    -n * sigma.ln() - acc
}

/// Gradient and Hessian of the log-likelihood in `(ξ, σ)`.
fn gpd_derivatives(excesses: &[f64], xi: f64, sigma: f64) -> ([f64; 2], [[f64; 2]; 2]) {
    let n = excesses.len() as f64;
    let (mut g_xi, mut h_xixi) = (0.0, 0.0);
    let (mut b, mut c, mut d) = (0.0, 0.0, 0.0);
    for &e in excesses {
        let z = e / sigma;
        let x = xi * z;
        let w = 1.0 + x;
        b += z / w;
        c += z * z / (w * w);
        d += z / (w * w);
        // [ln w − x/w]/ξ² and [−2 ln w + 2x/w + x²/w²]/ξ³, by series for small x.
        if x.abs() < 1e-3 {
            // Series in z^k ξ^(k-2) and z^k ξ^(k-3); consecutive terms differ by a factor x.
            let (mut p1, mut p2) = (z * z, z * z * z);
            for k in 2..=10 {
                let kf = k as f64;
                let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                g_xi += sign * (kf - 1.0) / kf * p1;
                p1 *= x;
                if k >= 3 {
                    h_xixi += sign * (kf - 1.0) * (kf - 2.0) / kf * p2;
                    p2 *= x;
                }
            }
        } else {
            let lw = x.ln_1p();
            g_xi += (lw - x / w) / (xi * xi);
            h_xixi += (-2.0 * lw + 2.0 * x / w + x * x / (w * w)) / (xi * xi * xi);
        }
    }
    let g_xi = g_xi - b;
    let h_xixi = h_xixi + c;
    let g_sigma = (-n + (1.0 + xi) * b) / sigma;
    let h_sigsig = (n - (1.0 + xi) * (b + d)) / (sigma * sigma);
    let h_xisig = (d - c) / sigma;
    ([g_xi, g_sigma], [[h_xixi, h_xisig], [h_xisig, h_sigsig]])
}

/// Probability-weighted-moment starting values `(ξ, σ)`.
fn pwm_start(sorted: &[f64]) -> (f64, f64) {
    let n = sorted.len() as f64;
    let a0 = sorted.iter().sum::<f64>() / n;
    let a1 = sorted.iter().enumerate().map(|(i, x)| (1.0 - (i as f64 + 0.65) / n) * x).sum::<f64>() / n;
    let denom = a0 - 2.0 * a1;
    if denom <= 0.0 {
        return (0.1, a0.max(f64::MIN_POSITIVE));
    }
    let xi = (2.0 - a0 / denom).clamp(-0.45, 0.9);
    let sigma = 2.0 * a0 * a1 / denom;
    let sigma = if sigma > 0.0 { sigma } else { a0 };
    // Keep the start feasible for negative shapes.
    let max = sorted[sorted.len() - 1];
    let sigma = if xi < 0.0 { sigma.max(-xi * max * 1.01) } else { sigma };
    (xi, sigma)
}

fn exceedances(residuals: &[f64], threshold: f64) -> Vec<f64> {
    let mut ex: Vec<f64> = residuals.iter().filter(|&&r| r > threshold).map(|&r| r - threshold).collect();
    ex.sort_by(f64::total_cmp);
    ex
}

/// Maximum-likelihood GPD fit to the excesses of `residuals` over `threshold`.
///
/// Damped Newton iterations on `(ξ, ln σ)` from probability-weighted-moment
/// starting values, with a backtracking line search that keeps every excess
/// inside the support. Standard errors come from the inverse observed
/// information and are absent when that matrix is not positive definite.
pub fn fit_gpd_mle(residuals: &[f64], threshold: f64) -> Result<GpdFit, EvtError> {
    let ex = exceedances(residuals, threshold);
    if ex.len() < MIN_EXCEEDANCES {
        return Err(EvtError::TooFewExceedances { count: ex.len(), needed: MIN_EXCEEDANCES });
    }
    let (xi, sigma) = fit_excesses(&ex)?;
    let mut fit = GpdFit::new(threshold, xi, sigma, residuals.len(), ex.len())?;
    fit.loglik = gpd_loglik(&ex, xi, sigma);
    let (se_xi, se_sigma) = standard_errors(&ex, xi, sigma);
    fit.se_xi = se_xi;
    fit.se_sigma = se_sigma;
    Ok(fit)
}

const XI_MIN: f64 = -0.999;

fn fit_excesses(ex: &[f64]) -> Result<(f64, f64), EvtError> {
    let max = ex[ex.len() - 1];
    if max <= 0.0 {
        return Err(EvtError::Parameters("all excesses are zero".into()));
    }
    let (mut xi, sigma0) = pwm_start(ex);
    let mut s = sigma0.ln();
    let mut ll = gpd_loglik(ex, xi, s.exp());
    if !ll.is_finite() {
        xi = 0.0;
        s = (ex.iter().sum::<f64>() / ex.len() as f64).ln();
        ll = gpd_loglik(ex, xi, s.exp());
    }
    let n = ex.len() as f64;
    let mut grad_norm = f64::INFINITY;
    for _ in 0..500 {
        let sigma = s.exp();
        let (g, h) = gpd_derivatives(ex, xi, sigma);
        // Chain rule to (ξ, s = ln σ).
        let gs = [g[0], sigma * g[1]];
        let hs = [
            [h[0][0], sigma * h[0][1]],
            [sigma * h[0][1], sigma * sigma * h[1][1] + sigma * g[1]],
        ];
        grad_norm = (gs[0] * gs[0] + gs[1] * gs[1]).sqrt();
        if grad_norm < 1e-9 * n.max(1.0) {
            break;
        }
        // Newton direction when −H is positive definite, else steepest ascent.
        let (a, b, c) = (-hs[0][0], -hs[0][1], -hs[1][1]);
        let det = a * c - b * b;
        let dir = if a > 0.0 && det > 0.0 {
            [(c * gs[0] - b * gs[1]) / det, (a * gs[1] - b * gs[0]) / det]
        } else {
            let scale = 1.0 / grad_norm.max(1.0);
            [gs[0] * scale, gs[1] * scale]
        };
        let mut step = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let nxi = (xi + step * dir[0]).max(XI_MIN);
            let ns = s + step * dir[1];
            let nll = gpd_loglik(ex, nxi, ns.exp());
            if nll.is_finite() && nll >= ll {
                moved = (nxi - xi).abs() > 0.0 || (ns - s).abs() > 0.0;
                xi = nxi;
                s = ns;
                ll = nll;
                break;
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
    }
    let sigma = s.exp();
    let (g, _) = gpd_derivatives(ex, xi, sigma);
    let gn = (g[0] * g[0] + (sigma * g[1]).powi(2)).sqrt();
    if !(xi.is_finite() && sigma.is_finite()) || gn > 1e-3 * n.max(1.0) {
        return Err(EvtError::Optimizer { xi, sigma, grad_norm: gn.min(grad_norm) });
    }
    if xi.abs() < XI_ZERO {
        return Ok((0.0, ex.iter().sum::<f64>() / n));
    }
    Ok((xi, sigma))
}

fn standard_errors(ex: &[f64], xi: f64, sigma: f64) -> (Option<f64>, Option<f64>) {
    let (_, h) = gpd_derivatives(ex, xi, sigma);
    let (a, b, c) = (-h[0][0], -h[0][1], -h[1][1]);
    let det = a * c - b * b;
    if !(a > 0.0 && det > 0.0) {
        return (None, None);
    }
    let var_xi = c / det;
    let var_sigma = a / det;
    (Some(var_xi.sqrt()), Some(var_sigma.sqrt()))
}

/// Mean-excess diagnostics over a grid of candidate thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdDiag {
    pub thresholds: Vec<f64>,
    /// Mean of `x − u` over `x > u`; absent where fewer than 5 points exceed `u`.
    pub mean_excess: Vec<Option<f64>>,
    pub counts: Vec<usize>,
}

pub const MRL_MIN_SAMPLE: usize = 50;
const MRL_MIN_COUNT: usize = 5;

/// Mean residual life over `grid_size` thresholds evenly spaced between the
/// empirical 50th and 99th percentiles.
pub fn mean_residual_life(residuals: &[f64], grid_size: usize) -> Result<ThresholdDiag, EvtError> {
    if residuals.len() < MRL_MIN_SAMPLE {
        return Err(EvtError::SampleSize { needed: MRL_MIN_SAMPLE, got: residuals.len() });
    }
    let mut sorted = residuals.to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = quantile_sorted(&sorted, 0.5);
    let hi = quantile_sorted(&sorted, 0.99);
    let thresholds: Vec<f64> = match grid_size {
        0 => vec![],
        1 => vec![lo],
        k => (0..k).map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64).collect(),
    };
    let mut mean_excess = Vec::with_capacity(thresholds.len());
    let mut counts = Vec::with_capacity(thresholds.len());
    for &u in &thresholds {
        let start = sorted.partition_point(|&x| x <= u);
        let above = &sorted[start..];
        counts.push(above.len());
        mean_excess.push(
            (above.len() >= MRL_MIN_COUNT).then(|| above.iter().map(|x| x - u).sum::<f64>() / above.len() as f64),
        );
    }
    Ok(ThresholdDiag { thresholds, mean_excess, counts })
}

/// Plot-ready fit diagnostics, in residual units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QqPp {
    /// `(model quantile, empirical quantile)` at plotting positions `i/(N_u+1)`.
    pub qq: Vec<(f64, f64)>,
    /// `(model probability, empirical probability)`.
    pub pp: Vec<(f64, f64)>,
}

pub fn qq_pp_points(fit: &GpdFit, residuals: &[f64]) -> Result<QqPp, EvtError> {
    let mut above: Vec<f64> = residuals.iter().copied().filter(|&r| r > fit.threshold).collect();
    above.sort_by(f64::total_cmp);
    let m = above.len() as f64;
    let mut qq = Vec::with_capacity(above.len());
    let mut pp = Vec::with_capacity(above.len());
    for (i, &x) in above.iter().enumerate() {
        let p = (i as f64 + 1.0) / (m + 1.0);
        qq.push((gpd_quantile(fit, p)?, x));
        pp.push((gpd_cdf(fit, x)?, p));
    }
    Ok(QqPp { qq, pp })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(threshold: f64, xi: f64, sigma: f64) -> GpdFit {
        GpdFit::new(threshold, xi, sigma, 1000, 100).unwrap()
    }

    pub(crate) fn gpd_draws(xi: f64, sigma: f64, count: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let u: f64 = rng.random();
                if xi == 0.0 {
                    -sigma * (1.0 - u).ln()
                } else {
                    sigma / xi * ((1.0 - u).powf(-xi) - 1.0)
                }
            })
            .collect()
    }

    #[test]
    fn survival_values() {
        assert_abs_diff_eq!(gpd_sf(&model(0.0, 0.5, 1.0), 2.0).unwrap(), 0.25, epsilon = 1e-15);
        for (xi, sigma) in [(0.3, 2.0), (-0.2, 1.0), (0.0, 0.5)] {
            assert_eq!(gpd_sf(&model(1.5, xi, sigma), 1.5).unwrap(), 1.0);
        }
        let a = gpd_sf(&model(0.0, 1e-8, 2.0), 6.0).unwrap();
        let b = gpd_sf(&model(0.0, 0.0, 2.0), 6.0).unwrap();
        assert!((a - b).abs() < 1e-6);
        assert!(matches!(gpd_sf(&model(1.0, 0.2, 1.0), 0.5), Err(EvtError::Domain { .. })));
        // beyond the finite upper endpoint the truncation gives 0
        assert_eq!(gpd_sf(&model(0.0, -0.5, 1.0), 3.0).unwrap(), 0.0);
    }

    #[test]
    fn quantile_values() {
        let q = 1.0 - (-1.0f64).exp();
        assert_abs_diff_eq!(gpd_quantile(&model(0.0, 0.0, 1.0), q).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(gpd_quantile(&model(3.0, 0.4, 2.0), 1e-15).unwrap(), 3.0, epsilon = 1e-12);
        assert!(matches!(gpd_quantile(&model(0.0, 0.1, 1.0), 1.0), Err(EvtError::Probability(_))));
        assert!(gpd_quantile(&model(0.0, 0.1, 1.0), 0.0).is_err());
    }

    #[test]
    fn pot_quantile_values() {
        let fit = GpdFit::new(10.0, 0.5, 2.0, 1000, 100).unwrap();
        let expect = 10.0 + 4.0 * (10f64.sqrt() - 1.0);
        assert_abs_diff_eq!(pot_quantile(&fit, 0.99).unwrap(), expect, epsilon = 1e-12);
        assert_abs_diff_eq!(expect, 18.6491, epsilon = 1e-4);
        assert_eq!(pot_quantile(&fit, 0.9).unwrap(), 10.0);
        assert!(matches!(pot_quantile(&fit, 0.85), Err(EvtError::BelowThreshold { .. })));
        // the shifted reading sits far above: it treats the threshold as the median at q = 0.5
        let lit = residual_quantile(&fit, 0.99, QuantileRule::LocationShifted).unwrap();
        assert_abs_diff_eq!(lit, 10.0 + 4.0 * (10.0 - 1.0), epsilon = 1e-9);
    }

    #[test]
    fn pot_quantile_monte_carlo() {
        // 50,000 draws: 90% below a threshold at 5 (uniform), 10% GPD excesses above it.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ex = gpd_draws(0.25, 1.5, 5_000, 4);
        let mut sample: Vec<f64> = (0..45_000).map(|_| rng.random_range(0.0..5.0)).collect();
        sample.extend(ex.iter().map(|e| 5.0 + e));
        let threshold = threshold_from_quantile(&sample, 0.9).unwrap();
        let fit = fit_gpd_mle(&sample, threshold).unwrap();
        let emp = empirical_quantile(&sample, 0.99).unwrap();
        let pot = pot_quantile(&fit, 0.99).unwrap();
        assert!((pot - emp).abs() / emp < 0.02, "{pot} vs {emp}");
    }

    #[test]
    fn empirical_quantile_rule() {
        let s: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_abs_diff_eq!(threshold_from_quantile(&s, 0.9).unwrap(), 9.1, epsilon = 1e-12);
        assert_eq!(threshold_from_quantile(&[4.0; 12], 0.37).unwrap(), 4.0);
        assert_eq!(threshold_from_quantile(&[3.0, 1.0, 2.0], 0.5).unwrap(), 2.0);
        assert_eq!(threshold_from_quantile(&[], 0.5), Err(EvtError::Empty));
    }

    #[test]
    fn recovers_exponential_shape() {
        let ex = gpd_draws(0.0, 1.0, 20_000, 11);
        let fit = fit_gpd_mle(&ex, 0.0).unwrap();
        assert!(fit.xi.abs() < 3.0 * fit.se_xi.unwrap(), "{fit:?}");
        assert!((fit.sigma - 1.0).abs() < 3.0 * fit.se_sigma.unwrap());
    }

    #[test]
    fn recovers_negative_shape() {
        let ex = gpd_draws(-0.3, 1.0, 5_000, 12);
        let fit = fit_gpd_mle(&ex, 0.0).unwrap();
        assert!((fit.xi + 0.3).abs() < 3.0 * fit.se_xi.unwrap(), "{fit:?}");
        let max = ex.iter().cloned().fold(0.0, f64::max);
        assert!(max <= fit.upper_endpoint());
    }

    #[test]
    fn too_few_exceedances() {
        let r: Vec<f64> = (0..100).map(f64::from).collect();
        assert_eq!(
            fit_gpd_mle(&r, 90.0),
            Err(EvtError::TooFewExceedances { count: 9, needed: MIN_EXCEEDANCES })
        );
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let ex = gpd_draws(0.2, 1.3, 200, 5);
        for (xi, sigma) in [(0.25, 1.2), (-0.1, 1.5), (3e-6, 1.0), (-2e-7, 0.9)] {
            let (g, h) = gpd_derivatives(&ex, xi, sigma);
            let eps = 1e-5;
            let f = |a: f64, b: f64| gpd_loglik(&ex, a, b);
            let gx = (f(xi + eps, sigma) - f(xi - eps, sigma)) / (2.0 * eps);
            let gs = (f(xi, sigma + eps) - f(xi, sigma - eps)) / (2.0 * eps);
            assert!((g[0] - gx).abs() < 1e-4 * (1.0 + gx.abs()), "{xi}: {} vs {gx}", g[0]);
            assert!((g[1] - gs).abs() < 1e-4 * (1.0 + gs.abs()));
            let (g_up, _) = gpd_derivatives(&ex, xi + eps, sigma);
            let (g_dn, _) = gpd_derivatives(&ex, xi - eps, sigma);
            let hxx = (g_up[0] - g_dn[0]) / (2.0 * eps);
            let hxs = (g_up[1] - g_dn[1]) / (2.0 * eps);
            assert!((h[0][0] - hxx).abs() < 1e-4 * (1.0 + hxx.abs()), "{xi}: {} vs {hxx}", h[0][0]);
            assert!((h[0][1] - hxs).abs() < 1e-4 * (1.0 + hxs.abs()));
        }
    }

    #[test]
    fn mle_is_local_maximum() {
        let ex = gpd_draws(0.3, 2.0, 2_000, 21);
        let fit = fit_gpd_mle(&ex, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..100 {
            let xi = fit.xi + rng.random_range(-0.05..0.05);
            let sigma = fit.sigma * (1.0 + rng.random_range(-0.05..0.05));
            assert!(gpd_loglik(&ex, xi, sigma) <= fit.loglik + 1e-9);
        }
    }

    #[test]
    fn mean_residual_life_shapes() {
        let ex = gpd_draws(0.0, 2.0, 50_000, 31);
        let diag = mean_residual_life(&ex, 10).unwrap();
        for me in diag.mean_excess.iter().flatten() {
            assert!((me - 2.0).abs() < 0.25, "{me}");
        }
        // GPD(ξ): e(u) = (σ + ξu)/(1 − ξ), slope ξ/(1 − ξ)
        let xi = 0.25;
        let ex = gpd_draws(xi, 1.0, 200_000, 32);
        let diag = mean_residual_life(&ex, 8).unwrap();
        let (u0, u1) = (diag.thresholds[0], diag.thresholds[4]);
        let slope = (diag.mean_excess[4].unwrap() - diag.mean_excess[0].unwrap()) / (u1 - u0);
        assert!((slope - xi / (1.0 - xi)).abs() < 0.05, "{slope}");

        assert!(matches!(mean_residual_life(&ex[..49], 5), Err(EvtError::SampleSize { .. })));
    }

    #[test]
    fn mrl_candidate_at_max_has_no_mean() {
        let mut s: Vec<f64> = (0..60).map(f64::from).collect();
        s.extend([1000.0; 1]);
        let diag = mean_residual_life(&s, 3).unwrap();
        assert!(diag.counts.iter().all(|&c| c <= s.len()));
        // the 99th percentile of 61 points lies below the single outlier, which alone is too few
        assert_eq!(*diag.mean_excess.last().unwrap(), None);
    }

    #[test]
    fn qq_pp_single_point_and_range() {
        let fit = GpdFit::new(0.0, 0.2, 1.0, 10, 1).unwrap();
        let d = qq_pp_points(&fit, &[-1.0, 0.5]).unwrap();
        assert_eq!(d.qq.len(), 1);
        assert_eq!(d.pp[0].1, 0.5);
        assert_abs_diff_eq!(d.qq[0].0, gpd_quantile(&fit, 0.5).unwrap(), epsilon = 1e-15);

        let ex = gpd_draws(0.2, 1.0, 500, 41);
        let fit = fit_gpd_mle(&ex, 0.0).unwrap();
        let d = qq_pp_points(&fit, &ex).unwrap();
        assert!(d.pp.iter().all(|(a, b)| *a > 0.0 && *a < 1.0 && *b > 0.0 && *b < 1.0));
        // Kolmogorov 95% band 1.36/√n
        let band = 1.36 / (ex.len() as f64).sqrt();
        assert!(d.pp.iter().all(|(a, b)| (a - b).abs() < band));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn sf_quantile_inverse(xi in -0.5f64..1.0, sigma in 0.1f64..10.0, mu in -5.0f64..5.0, q in 0.001f64..0.999) {
                let fit = model(mu, xi, sigma);
                let x = gpd_quantile(&fit, q).unwrap();
                prop_assert!((gpd_sf(&fit, x).unwrap() - (1.0 - q)).abs() < 1e-12);
            }

            #[test]
            fn monotone_in_level(xi in -0.5f64..1.0, sigma in 0.1f64..10.0, q1 in 0.9f64..0.999, dq in 1e-6f64..0.0009) {
                let fit = model(0.0, xi, sigma);
                let q2 = q1 + dq;
                prop_assert!(gpd_quantile(&fit, q1).unwrap() < gpd_quantile(&fit, q2).unwrap());
                prop_assert!(pot_quantile(&fit, q1).unwrap() < pot_quantile(&fit, q2).unwrap());
                prop_assert!(pot_quantile(&fit, q1).unwrap() >= fit.threshold);
            }

            #[test]
            fn sf_decreasing(xi in -0.5f64..1.0, sigma in 0.1f64..10.0, a in 0.0f64..1.0, b in 0.0f64..1.0) {
                let fit = model(0.0, xi, sigma);
                let span = if xi < 0.0 { -sigma / xi } else { 20.0 * sigma };
                let (x1, x2) = (a.min(b) * span * 0.99, a.max(b) * span * 0.99);
                prop_assume!(x2 - x1 > 1e-9);
                prop_assert!(gpd_sf(&fit, x1).unwrap() > gpd_sf(&fit, x2).unwrap());
            }

            #[test]
            fn branches_continuous_near_zero(xi in -1e-8f64..1e-8, x in 0.0f64..30.0) {
                let a = tail_quantile(&model(0.0, xi, 1.0), (-x).exp());
                let b = tail_quantile(&model(0.0, 0.0, 1.0), (-x).exp());
                prop_assert!((a - b).abs() < 1e-6);
                let xi_nz = if xi == 0.0 { 1e-9 } else { xi * 1.5 };
                let sa = (-(xi_nz * x).ln_1p() / xi_nz).exp();
                prop_assert!((sa - (-x).exp()).abs() < 1e-6);
            }
        }
    }
}
