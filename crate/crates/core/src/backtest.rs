//! Point-forecast accuracy and VaR backtests (Kupiec unconditional coverage,
//! Christoffersen conditional coverage).

use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum BacktestError {
    #[error("length mismatch: {actual} actual values vs {predicted} forecasts")]
    Shape { actual: usize, predicted: usize },
    #[error("empty input")]
    Empty,
    #[error("{0}")]
    Undefined(String),
    #[error("level {0} outside (0, 1)")]
    Level(f64),
}

fn check_pair(actual: &[f64], predicted: &[f64]) -> Result<(), BacktestError> {
    if actual.len() != predicted.len() {
        return Err(BacktestError::Shape { actual: actual.len(), predicted: predicted.len() });
    }
    if actual.is_empty() {
        return Err(BacktestError::Empty);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mape {
    pub value: f64,
    /// Terms dropped because the actual value was zero.
    pub skipped: usize,
}

/// Mean of `|a − p| / |a|` over points with `a ≠ 0`.
pub fn mape(actual: &[f64], predicted: &[f64]) -> Result<Mape, BacktestError> {
    check_pair(actual, predicted)?;
    let (mut sum, mut used) = (0.0, 0usize);
    for (a, p) in actual.iter().zip(predicted) {
        if *a != 0.0 {
            sum += ((a - p) / a).abs();
            used += 1;
        }
    }
    if used == 0 {
        return Err(BacktestError::Undefined("MAPE is undefined when every actual value is zero".into()));
    }
    Ok(Mape { value: sum / used as f64, skipped: actual.len() - used })
}

pub fn mse(actual: &[f64], predicted: &[f64]) -> Result<f64, BacktestError> {
    check_pair(actual, predicted)?;
    Ok(actual.iter().zip(predicted).map(|(a, p)| (a - p).powi(2)).sum::<f64>() / actual.len() as f64)
}

/// Upper-tail violations: `actual_t > var_t`.
pub fn count_violations(actual: &[f64], var_forecasts: &[f64]) -> Result<(Vec<bool>, usize), BacktestError> {
    if actual.len() != var_forecasts.len() {
        return Err(BacktestError::Shape { actual: actual.len(), predicted: var_forecasts.len() });
    }
    let hits: Vec<bool> = actual.iter().zip(var_forecasts).map(|(a, v)| a > v).collect();
    let count = hits.iter().filter(|&&h| h).count();
    Ok((hits, count))
}

// x·ln(p) with 0·ln 0 = 0.
fn xlogy(x: f64, p: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * p.ln()
    }
}

/// `P(χ²₁ > x)`.
pub fn chi2_1_sf(x: f64) -> f64 {
    erfc((x.max(0.0) / 2.0).sqrt())
}

/// `P(χ²₂ > x)`.
pub fn chi2_2_sf(x: f64) -> f64 {
    (-x.max(0.0) / 2.0).exp()
}

fn check_level(alpha: f64) -> Result<f64, BacktestError> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(1.0 - alpha)
    } else {
        Err(BacktestError::Level(alpha))
    }
}

/// Kupiec's unconditional coverage statistic and its χ²₁ p-value for `n1`
/// violations in `n` trials at VaR level `alpha`.
pub fn lr_uc(n1: usize, n: usize, alpha: f64) -> Result<(f64, f64), BacktestError> {
    let pi0 = check_level(alpha)?;
    if n == 0 {
        return Err(BacktestError::Empty);
    }
    if n1 > n {
        return Err(BacktestError::Undefined(format!("{n1} violations in {n} trials")));
    }
    let (n1f, n0f) = (n1 as f64, (n - n1) as f64);
    let pi_hat = n1f / n as f64;
    let lr = -2.0 * (xlogy(n0f, 1.0 - pi0) + xlogy(n1f, pi0) - xlogy(n0f, 1.0 - pi_hat) - xlogy(n1f, pi_hat));
    let lr = lr.max(0.0);
    Ok((lr, chi2_1_sf(lr)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionalCoverage {
    pub lr_uc: f64,
    pub lr_ind: f64,
    pub lr_cc: f64,
    pub p_value: f64,
    /// Set when there are no violations, so the independence part is 0 by convention.
    pub degenerate: bool,
}

/// Christoffersen's conditional coverage test: LRuc plus the first-order
/// Markov independence statistic, referred to χ²₂.
pub fn lr_cc(hits: &[bool], alpha: f64) -> Result<ConditionalCoverage, BacktestError> {
    check_level(alpha)?;
    if hits.len() < 2 {
        return Err(BacktestError::Undefined(format!("conditional coverage needs ≥ 2 indicators, got {}", hits.len())));
    }
    let n1 = hits.iter().filter(|&&h| h).count();
    let (lr_uc, _) = lr_uc(n1, hits.len(), alpha)?;
    let mut t = [[0.0f64; 2]; 2];
    for w in hits.windows(2) {
        t[usize::from(w[0])][usize::from(w[1])] += 1.0;
    }
    let [[n00, n01], [n10, n11]] = t;
    let degenerate = n1 == 0;
    let lr_ind = if degenerate {
        0.0
    } else {
        let rate = |a: f64, b: f64| if a + b > 0.0 { b / (a + b) } else { 0.0 };
        let (pi01, pi11) = (rate(n00, n01), rate(n10, n11));
        let pi = (n01 + n11) / (n00 + n01 + n10 + n11);
        let restricted = xlogy(n00 + n10, 1.0 - pi) + xlogy(n01 + n11, pi);
        let markov = xlogy(n00, 1.0 - pi01) + xlogy(n01, pi01) + xlogy(n10, 1.0 - pi11) + xlogy(n11, pi11);
        (-2.0 * (restricted - markov)).max(0.0)
    };
    let lr_cc = lr_uc + lr_ind;
    Ok(ConditionalCoverage { lr_uc, lr_ind, lr_cc, p_value: chi2_2_sf(lr_cc), degenerate })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub alpha: f64,
    /// `N(1 − α)`.
    pub expected: f64,
    pub expected_rounded: u64,
    pub observed: usize,
    pub lruc: f64,
    pub lruc_p: f64,
    pub lrcc: f64,
    pub lrcc_p: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesReport {
    pub series: String,
    pub n: usize,
    pub mape: Option<f64>,
    pub mape_skipped: usize,
    pub mse: f64,
    pub levels: Vec<LevelReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BacktestReport {
    pub series: Vec<SeriesReport>,
}

/// Backtests one series: `quantiles` pairs each level with its VaR forecasts.
pub fn backtest_series(
    name: &str,
    actual: &[f64],
    point: &[f64],
    quantiles: &[(f64, Vec<f64>)],
) -> Result<SeriesReport, BacktestError> {
    let mse = mse(actual, point)?;
    let (mape, mape_skipped) = match mape(actual, point) {
        Ok(m) => (Some(m.value), m.skipped),
        Err(BacktestError::Undefined(_)) => (None, actual.len()),
        Err(e) => return Err(e),
    };
    let n = actual.len();
    let mut levels = Vec::with_capacity(quantiles.len());
    for (alpha, var) in quantiles {
        let (hits, observed) = count_violations(actual, var)?;
        let (lruc, lruc_p) = lr_uc(observed, n, *alpha)?;
        let (lrcc, lrcc_p, degenerate) = if n >= 2 {
            let cc = lr_cc(&hits, *alpha)?;
            (cc.lr_cc, cc.p_value, cc.degenerate)
        } else {
            (f64::NAN, f64::NAN, true)
        };
        let expected = n as f64 * (1.0 - alpha);
        levels.push(LevelReport {
            alpha: *alpha,
            expected,
            expected_rounded: expected.round() as u64,
            observed,
            lruc,
            lruc_p,
            lrcc,
            lrcc_p,
            degenerate,
        });
    }
    Ok(SeriesReport { series: name.to_string(), n, mape, mape_skipped, mse, levels })
}

impl BacktestReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Flat table: one row per series and level with expected and observed
    /// violation counts and both p-values.
    pub fn write_table_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["series", "level", "Exp.", "Exp.rounded", "Ob.", "LRuc", "LRcc"])?;
        for s in &self.series {
            for l in &s.levels {
                w.write_record([
                    s.series.clone(),
                    l.alpha.to_string(),
                    l.expected.to_string(),
                    l.expected_rounded.to_string(),
                    l.observed.to_string(),
                    l.lruc_p.to_string(),
                    l.lrcc_p.to_string(),
                ])?;
            }
        }
        w.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mape_cases() {
        assert_eq!(mape(&[1.0, 2.0], &[1.0, 2.0]).unwrap().value, 0.0);
        assert_abs_diff_eq!(mape(&[100.0, 200.0], &[110.0, 180.0]).unwrap().value, 0.1, epsilon = 1e-15);
        assert_eq!(mape(&[0.0, 10.0], &[5.0, 10.0]).unwrap(), Mape { value: 0.0, skipped: 1 });
        assert!(matches!(mape(&[0.0, 0.0], &[1.0, 1.0]), Err(BacktestError::Undefined(_))));
        assert!(matches!(mape(&[1.0], &[1.0, 2.0]), Err(BacktestError::Shape { .. })));
    }

    #[test]
    fn mse_cases() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[0.0, 0.0], &[3.0, -3.0]).unwrap(), 9.0);
        assert_eq!(mse(&[], &[]), Err(BacktestError::Empty));
    }

    #[test]
    fn violations() {
        let (hits, c) = count_violations(&[5.0, 10.0, 15.0], &[6.0, 9.0, 20.0]).unwrap();
        assert_eq!(hits, vec![false, true, false]);
        assert_eq!(c, 1);
        assert_eq!(count_violations(&[5.0, 1e300], &[f64::MAX, f64::MAX]).unwrap().1, 0);
    }

    #[test]
    fn lruc_spot_values() {
        // π̂ = π0 exactly
        let (lr, p) = lr_uc(25, 500, 0.95).unwrap();
        assert_abs_diff_eq!(lr, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p, 1.0, epsilon = 1e-6);
        let (_, p) = lr_uc(41, 512, 0.92).unwrap();
        assert!((0.98..=1.0).contains(&p), "{p}");
        // degenerate counts use 0·ln 0 = 0: LR = −2N ln(1 − π0) for n1 = 0
        let (lr, _) = lr_uc(0, 100, 0.95).unwrap();
        assert_abs_diff_eq!(lr, -200.0 * 0.95f64.ln(), epsilon = 1e-10);
        let (lr, _) = lr_uc(100, 100, 0.95).unwrap();
        assert_abs_diff_eq!(lr, -200.0 * 0.05f64.ln(), epsilon = 1e-10);
    }

    #[test]
    fn chi2_closed_forms_match_quadrature() {
        fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
            let h = (b - a) / n as f64;
            let mut s = f(a) + f(b);
            for i in 1..n {
                s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            s * h / 3.0
        }
        for x in [0.1, 1.0, 5.0] {
            let cdf = simpson(|t| 0.5 * (-t / 2.0).exp(), 0.0, x, 2000);
            assert!((chi2_2_sf(x) - (1.0 - cdf)).abs() < 1e-10);
            // 1 df, with t = s² to remove the singularity at 0
            let cdf1 = simpson(|s| 2.0 * (-s * s / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt(), 0.0, x.sqrt(), 2000);
            assert!((chi2_1_sf(x) - (1.0 - cdf1)).abs() < 1e-10);
        }
    }

    #[test]
    fn alternating_hits_are_dependent() {
        let hits: Vec<bool> = (0..100).map(|i| i % 2 == 1).collect();
        let cc = lr_cc(&hits, 0.5).unwrap();
        // n01 = 50, n10 = 49, n00 = n11 = 0, so the Markov likelihood is 1
        let pi: f64 = 50.0 / 99.0;
        let expect = -2.0 * (49.0 * (1.0 - pi).ln() + 50.0 * pi.ln());
        assert_abs_diff_eq!(cc.lr_ind, expect, epsilon = 1e-9);
        assert!(cc.p_value < 1e-10);
        let mut shuffled = hits.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
        let cc2 = lr_cc(&shuffled, 0.5).unwrap();
        assert_abs_diff_eq!(cc2.lr_uc, cc.lr_uc, epsilon = 1e-12);
        assert!(cc2.lr_ind < cc.lr_ind);
    }

    #[test]
    fn no_violations_reduce_to_lruc() {
        let hits = vec![false; 50];
        let cc = lr_cc(&hits, 0.95).unwrap();
        assert!(cc.degenerate);
        assert_eq!(cc.lr_ind, 0.0);
        assert_abs_diff_eq!(cc.p_value, (-cc.lr_uc / 2.0).exp(), epsilon = 1e-15);
    }

    #[test]
    fn pvalues_fall_as_counts_move_away() {
        let mut last = 1.1;
        for n1 in 26..60 {
            let (_, p) = lr_uc(n1, 512, 0.95).unwrap();
            assert!(p < last && (0.0..=1.0).contains(&p));
            last = p;
        }
    }

    #[test]
    fn null_rejection_rate_is_calibrated() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let (mut uc, mut cc) = (0, 0);
        for _ in 0..500 {
            let hits: Vec<bool> = (0..512).map(|_| rng.random::<f64>() < 0.05).collect();
            let n1 = hits.iter().filter(|&&h| h).count();
            if lr_uc(n1, 512, 0.95).unwrap().1 < 0.05 {
                uc += 1;
            }
            if lr_cc(&hits, 0.95).unwrap().p_value < 0.05 {
                cc += 1;
            }
        }
        for rate in [uc as f64 / 500.0, cc as f64 / 500.0] {
            assert!((0.025..=0.08).contains(&rate), "{rate}");
        }
    }

    #[test]
    fn report_round_trip_and_table() {
        let r = backtest_series("a", &[1.0, 5.0, 2.0], &[1.0, 4.0, 2.0], &[(0.95, vec![2.0, 4.5, 3.0])]).unwrap();
        assert_eq!(r.levels[0].observed, 1);
        assert_abs_diff_eq!(r.levels[0].expected, 0.15, epsilon = 1e-12);
        let report = BacktestReport { series: vec![r] };
        assert_eq!(BacktestReport::from_json(&report.to_json()).unwrap(), report);
        let mut buf = Vec::new();
        report.write_table_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("series,level,Exp.,Exp.rounded,Ob.,LRuc,LRcc\n"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn lruc_permutation_invariant_and_valid(hits in prop::collection::vec(any::<bool>(), 2..200), alpha in 0.5f64..0.999) {
                let n1 = hits.iter().filter(|&&h| h).count();
                let (lr, p) = lr_uc(n1, hits.len(), alpha).unwrap();
                prop_assert!(lr >= 0.0 && (0.0..=1.0).contains(&p));
                let cc = lr_cc(&hits, alpha).unwrap();
                prop_assert!((0.0..=1.0).contains(&cc.p_value));
                prop_assert!((cc.lr_uc - lr).abs() < 1e-12);
            }

            #[test]
            fn more_headroom_fewer_violations(a in prop::collection::vec(-10.0f64..10.0, 1..50), bump in 0.0f64..5.0) {
                let v: Vec<f64> = a.iter().map(|x| x * 0.5).collect();
                let v2: Vec<f64> = v.iter().map(|x| x + bump).collect();
                prop_assert!(count_violations(&a, &v2).unwrap().1 <= count_violations(&a, &v).unwrap().1);
            }

            #[test]
            fn mse_shift_invariant(pairs in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 1..50), c in -50.0f64..50.0) {
                let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
                let p: Vec<f64> = pairs.iter().map(|p| p.1).collect();
                let a2: Vec<f64> = a.iter().map(|x| x + c).collect();
                let p2: Vec<f64> = p.iter().map(|x| x + c).collect();
                let (m1, m2) = (mse(&a, &p).unwrap(), mse(&a2, &p2).unwrap());
                prop_assert!((m1 - m2).abs() <= 1e-9 * m1.max(1.0));
            }
        }
    }
}
