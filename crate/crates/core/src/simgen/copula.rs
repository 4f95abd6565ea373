//! Pair-copula h-functions and R-vine sampling in the lower-triangular
//! matrix convention: row `d` is the first tree, and the entry in row `k`,
//! column `i` (`k > i`) pairs the diagonal variable `M[i][i]` with `M[k][i]`
//! given the variables listed below it in that column.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use super::SimError;

/// Clamp applied to copula arguments so boundary draws stay finite.
const U_EDGE: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    Independence,
    Gaussian,
    Clayton,
    Gumbel,
}

impl Family {
    /// Integer codes: 0 independence, 1 Gaussian, 3 Clayton, 4 Gumbel.
    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Self::Independence),
            1 => Some(Self::Gaussian),
            3 => Some(Self::Clayton),
            4 => Some(Self::Gumbel),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Self::Independence => 0,
            Self::Gaussian => 1,
            Self::Clayton => 3,
            Self::Gumbel => 4,
        }
    }

    pub fn check(self, theta: f64) -> Result<(), SimError> {
        let ok = match self {
            Self::Independence => true,
            Self::Gaussian => theta > -1.0 && theta < 1.0,
            Self::Clayton => theta > 0.0 && theta.is_finite(),
            Self::Gumbel => theta >= 1.0 && theta.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(SimError::Params(format!("parameter {theta} outside the range of the {self:?} family")))
        }
    }

    /// Kendall's τ implied by the parameter.
    pub fn kendall_tau(self, theta: f64) -> f64 {
        match self {
            Self::Independence => 0.0,
            Self::Gaussian => 2.0 / std::f64::consts::PI * theta.asin(),
            Self::Clayton => theta / (theta + 2.0),
            Self::Gumbel => 1.0 - 1.0 / theta,
        }
    }

    /// Copula distribution function `C(u, v)`.
    pub fn cdf(self, u: f64, v: f64, theta: f64) -> f64 {
        match self {
            Self::Independence => u * v,
            Self::Gaussian => bvn_cdf(phi_inv(u), phi_inv(v), theta),
            Self::Clayton => (u.powf(-theta) + v.powf(-theta) - 1.0).powf(-1.0 / theta),
            Self::Gumbel => {
                let a = (-u.ln()).powf(theta) + (-v.ln()).powf(theta);
                (-a.powf(1.0 / theta)).exp()
            }
        }
    }
}

fn phi(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile: Acklam's rational approximation followed by one
/// Halley step, accurate to a few ulps across (0, 1).
pub(crate) fn phi_inv(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e1, 2.209460984245205e2, -2.759285104469687e2, 1.383577518672690e2,
        -3.066479806614716e1, 2.506628277459239,
    ];
    const B: [f64; 5] =
        [-5.447609879822406e1, 1.615858368580409e2, -1.556989798598866e2, 6.680131188771972e1, -1.328068155288572e1];
    const C: [f64; 6] = [
        -7.784894002430293e-3, -3.223964580411365e-1, -2.400758277161838, -2.549732539343734,
        4.374664141464968, 2.938163982698783,
    ];
    const D: [f64; 4] = [7.784695709041462e-3, 3.224671290700398e-1, 2.445134137142996, 3.754408661907416];
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let x = if p < 0.02425 {
        tail((-2.0 * p.ln()).sqrt())
    } else if p > 1.0 - 0.02425 {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    };
    // Halley refinement; the error is measured on the smaller tail for precision.
    let e = if x < 0.0 { phi(x) - p } else { (1.0 - p) - phi(-x) };
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}

// Bivariate standard normal CDF by Gauss–Legendre quadrature over the
// correlation (Drezner–Wesolowsky / Genz form, accurate to ~1e-14).
fn bvn_cdf(x: f64, y: f64, rho: f64) -> f64 {
    const NODES: [f64; 10] = [
        -0.9739065285171717, -0.8650633666889845, -0.6794095682990244, -0.4333953941292472, -0.1488743389816312,
        0.1488743389816312, 0.4333953941292472, 0.6794095682990244, 0.8650633666889845, 0.9739065285171717,
    ];
    const WEIGHTS: [f64; 10] = [
        0.0666713443086881, 0.1494513491505806, 0.2190863625159820, 0.2692667193099963, 0.2955242247147529,
        0.2955242247147529, 0.2692667193099963, 0.2190863625159820, 0.1494513491505806, 0.0666713443086881,
    ];
    // Φ2(x, y; ρ) = Φ(x)Φ(y) + 1/(2π) ∫_0^{asin ρ} exp(−(x² + y² − 2xy sin t)/(2 cos² t)) dt
    let a = rho.asin();
    let mut acc = 0.0;
    for (t, w) in NODES.iter().zip(WEIGHTS) {
        let th = 0.5 * a * (t + 1.0);
        let (s, c) = th.sin_cos();
        acc += w * (-(x * x + y * y - 2.0 * x * y * s) / (2.0 * c * c)).exp();
    }
    phi(x) * phi(y) + 0.5 * a * acc / (2.0 * std::f64::consts::PI)
}

fn check_unit(name: &str, x: f64) -> Result<(), SimError> {
    if x > 0.0 && x < 1.0 {
        Ok(())
    } else {
        Err(SimError::Params(format!("{name} = {x} outside (0, 1)")))
    }
}

/// `h(u | v) = ∂C(u, v)/∂v`.
pub fn bicop_h(u: f64, v: f64, family: Family, theta: f64) -> Result<f64, SimError> {
    check_unit("u", u)?;
    check_unit("v", v)?;
    family.check(theta)?;
    Ok(h_unchecked(u, v, family, theta))
}

/// Inverse of `u ↦ h(u | v)`.
pub fn bicop_hinv(w: f64, v: f64, family: Family, theta: f64) -> Result<f64, SimError> {
    check_unit("w", w)?;
    check_unit("v", v)?;
    family.check(theta)?;
    Ok(hinv_unchecked(w, v, family, theta))
}

fn clamp_unit(x: f64) -> f64 {
    x.clamp(U_EDGE, 1.0 - U_EDGE)
}

fn h_unchecked(u: f64, v: f64, family: Family, theta: f64) -> f64 {
    let (u, v) = (clamp_unit(u), clamp_unit(v));
    let h = match family {
        Family::Independence => u,
        Family::Gaussian => {
            phi((phi_inv(u) - theta * phi_inv(v)) / (1.0 - theta * theta).sqrt())
        }
        Family::Clayton => {
            // v^{−θ−1} (u^{−θ} + v^{−θ} − 1)^{−1/θ−1} = (1 + (u^{−θ} − 1) v^θ)^{−(1+θ)/θ}
            let x = (-theta * u.ln()).exp_m1() * (theta * v.ln()).exp();
            (-(1.0 + theta) / theta * x.ln_1p()).exp()
        }
        Family::Gumbel => {
            // with r = (x/y)^θ: ln h = −y·((1+r)^{1/θ} − 1) + (1/θ − 1)·ln(1+r)
            let (x, y) = (-u.ln(), -v.ln());
            let lr = theta * (x.ln() - y.ln());
            let l1r = if lr > 30.0 { lr + (-lr).exp().ln_1p() } else { lr.exp().ln_1p() };
            (-y * (l1r / theta).exp_m1() + (1.0 / theta - 1.0) * l1r).exp()
        }
    };
    h.clamp(0.0, 1.0)
}

fn hinv_unchecked(w: f64, v: f64, family: Family, theta: f64) -> f64 {
    // the inverses stay accurate for tiny w, so only v gets the wide clamp
    let w = w.clamp(1e-300, 1.0 - f64::EPSILON / 2.0);
    let v = clamp_unit(v);
    let u = match family {
        Family::Independence => w,
        Family::Gaussian => {
            phi(phi_inv(w) * (1.0 - theta * theta).sqrt() + theta * phi_inv(v))
        }
        Family::Clayton => {
            // ((w v^{θ+1})^{−θ/(1+θ)} + 1 − v^{−θ})^{−1/θ}, rearranged to stay positive
            let vt = (-theta * v.ln()).exp();
            let excess = vt * (-theta / (1.0 + theta) * w.ln()).exp_m1();
            (-excess.ln_1p() / theta).exp()
        }
        Family::Gumbel => {
            // h is increasing in u; bisect on (0, 1).
            let (mut lo, mut hi) = (0.0f64, 1.0f64);
            while hi - lo > 1e-13 {
                let mid = 0.5 * (lo + hi);
                if h_unchecked(mid, v, family, theta) < w {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        }
    };
    clamp_unit(u)
}

/// Regular vine in matrix form. Variables are labelled `1..=dim`; only the
/// strictly lower triangle of `family` and `params` is read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VineSpec {
    pub dim: usize,
    pub tree: Vec<Vec<usize>>,
    pub family: Vec<Vec<u8>>,
    pub params: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct Edge {
    a: usize,
    b: usize,
    cond: u64,
    family: Family,
    theta: f64,
}

fn bit(var: usize) -> u64 {
    1u64 << var
}

impl VineSpec {
    fn structure_err(column: usize, reason: impl Into<String>) -> SimError {
        SimError::Structure { column: column + 1, reason: reason.into() }
    }

    fn edges(&self) -> Result<Vec<Vec<Edge>>, SimError> {
        let d = self.dim;
        if d < 2 || d > 63 {
            return Err(SimError::Params(format!("vine dimension {d} outside 2..=63")));
        }
        for (name, rows) in [("tree", self.tree.len()), ("family", self.family.len()), ("params", self.params.len())] {
            if rows != d {
                return Err(SimError::Params(format!("{name} matrix has {rows} rows, expected {d}")));
            }
        }
        for r in 0..d {
            if self.tree[r].len() != d || self.family[r].len() != d || self.params[r].len() != d {
                return Err(SimError::Params(format!("row {} of a vine matrix does not have {d} entries", r + 1)));
            }
        }
        let mut seen = vec![false; d + 1];
        for i in 0..d {
            let v = self.tree[i][i];
            if v == 0 || v > d || seen[v] {
                return Err(Self::structure_err(i, "diagonal is not a permutation of 1..=d"));
            }
            seen[v] = true;
        }
        // per column, edges from the first tree (row d) upward
        let mut cols = Vec::with_capacity(d - 1);
        for i in 0..d - 1 {
            let below: u64 = (i + 1..d).map(|j| bit(self.tree[j][j])).sum();
            let mut used = bit(self.tree[i][i]);
            let mut col = Vec::new();
            let mut cond = 0u64;
            for k in (i + 1..d).rev() {
                let b = self.tree[k][i];
                if b == 0 || b > d || below & bit(b) == 0 {
                    return Err(Self::structure_err(i, format!("entry {b} in row {} is not a diagonal variable to its right", k + 1)));
                }
                if used & bit(b) != 0 {
                    return Err(Self::structure_err(i, format!("variable {b} repeats")));
                }
                used |= bit(b);
                let code = self.family[k][i];
                let family = Family::from_code(code).ok_or_else(|| {
                    SimError::Params(format!("unknown family code {code} at ({}, {})", k + 1, i + 1))
                })?;
                let theta = self.params[k][i];
                family
                    .check(theta)
                    .map_err(|e| SimError::Params(format!("at ({}, {}): {e}", k + 1, i + 1)))?;
                col.push(Edge { a: self.tree[i][i], b, cond, family, theta });
                cond |= bit(b);
            }
            cols.push(col);
        }
        Ok(cols)
    }

    /// Checks the matrix and that every conditional distribution the sampler
    /// needs is reachable from the listed pair copulas.
    pub fn validate(&self) -> Result<(), SimError> {
        let cols = self.edges()?;
        let index = EdgeIndex::new(&cols);
        for (i, col) in cols.iter().enumerate() {
            for e in col {
                if !index.resolvable(e.b, e.cond, &mut HashMap::new()) {
                    return Err(Self::structure_err(
                        i,
                        format!("F({} | conditioning set) cannot be formed from the listed pairs", e.b),
                    ));
                }
            }
        }
        Ok(())
    }
}

struct EdgeIndex<'a> {
    by_key: HashMap<(usize, usize, u64), &'a Edge>,
}

impl<'a> EdgeIndex<'a> {
    fn new(cols: &'a [Vec<Edge>]) -> Self {
        let mut by_key = HashMap::new();
        for e in cols.iter().flatten() {
            by_key.insert((e.a.min(e.b), e.a.max(e.b), e.cond), e);
        }
        Self { by_key }
    }

    fn find(&self, a: usize, s: u64) -> Option<(usize, &'a Edge)> {
        let mut rest = s;
        while rest != 0 {
            let b = rest.trailing_zeros() as usize;
            rest &= rest - 1;
            if let Some(e) = self.by_key.get(&(a.min(b), a.max(b), s & !bit(b))) {
                return Some((b, e));
            }
        }
        None
    }

    fn resolvable(&self, a: usize, s: u64, memo: &mut HashMap<(usize, u64), bool>) -> bool {
        if s == 0 {
            return true;
        }
        if let Some(&r) = memo.get(&(a, s)) {
            return r;
        }
        let r = match self.find(a, s) {
            Some((b, _)) => {
                let rest = s & !bit(b);
                self.resolvable(a, rest, memo) && self.resolvable(b, rest, memo)
            }
            None => false,
        };
        memo.insert((a, s), r);
        r
    }

    // F(a | S) = h(F(a | S∖b) | F(b | S∖b)) for the edge {a, b} | S∖b.
    fn conditional(&self, a: usize, s: u64, u: &[f64], memo: &mut HashMap<(usize, u64), f64>) -> f64 {
        if s == 0 {
            return u[a];
        }
        if let Some(&v) = memo.get(&(a, s)) {
            return v;
        }
        let (b, e) = self.find(a, s).expect("validated vine");
        let rest = s & !bit(b);
        let fa = self.conditional(a, rest, u, memo);
        let fb = self.conditional(b, rest, u, memo);
        // all supported families are exchangeable, so orientation is irrelevant
        let v = h_unchecked(fa, fb, e.family, e.theta);
        memo.insert((a, s), v);
        v
    }
}

/// Inverse-Rosenblatt sampling: `count × dim` matrix whose column `j` holds
/// variable `j + 1`, all entries in (0, 1).
pub fn rvine_sample(spec: &VineSpec, count: usize, seed: u64) -> Result<DMatrix<f64>, SimError> {
    spec.validate()?;
    let cols = spec.edges()?;
    let index = EdgeIndex::new(&cols);
    let d = spec.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = DMatrix::zeros(count, d);
    let mut u = vec![0.0; d + 1];
    let mut memo = HashMap::new();
    for r in 0..count {
        memo.clear();
        let draws: Vec<f64> = (0..d).map(|_| rng.sample(Open01)).collect();
        u[spec.tree[d - 1][d - 1]] = draws[d - 1];
        for i in (0..d - 1).rev() {
            let mut w = draws[i];
            // highest tree first, down to the first tree
            for e in cols[i].iter().rev() {
                let v = index.conditional(e.b, e.cond, &u, &mut memo);
                w = hinv_unchecked(w, v, e.family, e.theta);
            }
            u[spec.tree[i][i]] = w;
        }
        for var in 1..=d {
            out[(r, var - 1)] = u[var];
        }
    }
    Ok(out)
}
