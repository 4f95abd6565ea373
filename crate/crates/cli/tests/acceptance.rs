//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
//! criterion fails. Run with `cargo test -p deeptail-cli --test acceptance`.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use deeptail::backtest::{lr_cc, lr_uc};
use deeptail::baseline::{fit_var_ols, rolling_var_forecasts, select_lag_aic};
use deeptail::evt::fit_gpd_mle;
use deeptail::forecast::{rolling_forecast, ForecastConfig};
use deeptail::panel::{SeriesPanel, SplitSpec, Standardization};
use deeptail::rnn::{gradient_check, Architecture, CellKind, RecurrentNet};
use deeptail::select::{select_best, FittedValues, GridSpec, RnnTrainer, SelectOptions};
use deeptail::simgen::{
    reference_vine, rvine_sample, simulate_copula_ar_garch, simulate_var_skewt, skewt_density, skewt_sample,
    CopulaGarchConfig, SkewedTParams, VarSkewtConfig, VineSpec,
};
use deeptail::stats::{kendall_tau, ks_uniform};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use statrs::distribution::{Binomial, DiscreteCDF};

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn gradients() -> Outcome {
    let mut worst = 0.0f64;
    let mut case = 0u64;
    for cell in CellKind::ALL {
        for layers in [1, 2] {
            for bidirectional in [false, true] {
                case += 1;
                let mut rng = ChaCha8Rng::seed_from_u64(case);
                let mut z = || -> f64 { StandardNormal.sample(&mut rng) };
                let windows: Vec<DMatrix<f64>> = (0..4).map(|_| DMatrix::from_fn(3, 3, |_, _| z())).collect();
                let targets: Vec<DVector<f64>> = (0..4).map(|_| DVector::from_fn(3, |_, _| z())).collect();
                let arch = Architecture { cell, input_dim: 3, lag: 3, layers, size: 4, bidirectional };
                let net = RecurrentNet::random(arch, 1000 + case).unwrap();
                worst = worst.max(gradient_check(&net, &windows, &targets, 0.01, 1e-5, 1e-6).unwrap());
            }
        }
    }
    check(worst < 1e-5, format!("max relative error {worst:.2e} over 12 configurations (< 1e-5)"))
}

fn gpd_recovery() -> Outcome {
    let (xi, sigma) = (0.3, 2.0);
    let mut ok = 0;
    for rep in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(10_000 + rep);
        let ex: Vec<f64> = (0..20_000)
            .map(|_| {
                let u: f64 = rng.random();
                sigma / xi * ((1.0 - u).powf(-xi) - 1.0)
            })
            .collect();
        let Ok(fit) = fit_gpd_mle(&ex, 0.0) else { continue };
        if let (Some(sx), Some(ss)) = (fit.se_xi, fit.se_sigma) {
            if (fit.xi - xi).abs() < 3.0 * sx && (fit.sigma - sigma).abs() < 3.0 * ss {
                ok += 1;
            }
        }
    }
    check(ok >= 95, format!("{ok}/100 replications within 3 standard errors (≥ 95)"))
}

fn pot_coverage() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let t4 = StudentT::new(4.0).unwrap();
    let values = DMatrix::from_fn(1, 3000, |_, _| 20.0 + t4.sample(&mut rng));
    let panel = SeriesPanel::from_rows(vec!["x".into()], values).unwrap();
    let arch = Architecture { cell: CellKind::Gru, input_dim: 1, lag: 1, layers: 1, size: 2, bidirectional: false };
    let mut net = RecurrentNet::zeros(arch).unwrap();
    net.scaling = Standardization { mean: vec![20.0], sd: vec![1.0] };
    let split = SplitSpec::new(1500, 2000, 3000).unwrap();
    let levels = vec![0.95, 0.96, 0.97, 0.98];
    let cfg = ForecastConfig { levels: levels.clone(), ..Default::default() };
    let run = rolling_forecast(&net, &panel, &split, &cfg).unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for (k, q) in levels.iter().enumerate() {
        let hits = run.records.iter().filter(|r| panel.values()[(0, r.time)] > r.quantiles[k]).count() as u64;
        let b = Binomial::new(1.0 - q, 1000).unwrap();
        let (lo, hi) = (b.inverse_cdf(0.025), b.inverse_cdf(0.975));
        pass &= (lo..=hi).contains(&hits);
        parts.push(format!("α={q}: {hits} in [{lo},{hi}]"));
    }
    check(pass, format!("Student-t(4) residuals, 1000 test points; {}", parts.join(", ")))
}

fn backtest_calibration() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut uc, mut cc) = (0, 0);
    for _ in 0..500 {
        let hits: Vec<bool> = (0..512).map(|_| rng.random::<f64>() < 0.05).collect();
        let n1 = hits.iter().filter(|&&h| h).count();
        uc += usize::from(lr_uc(n1, 512, 0.95).unwrap().1 < 0.05);
        cc += usize::from(lr_cc(&hits, 0.95).unwrap().p_value < 0.05);
    }
    let (ruc, rcc) = (uc as f64 / 500.0, cc as f64 / 500.0);
    let spot = lr_uc(41, 512, 0.92).unwrap().1;
    let band = 0.025..=0.08;
    check(
        band.contains(&ruc) && band.contains(&rcc) && (0.98..=1.0).contains(&spot),
        format!("LRuc rate {ruc:.3}, LRcc rate {rcc:.3} (in [0.025, 0.08]); N=512, α=.92, n1=41 → p = {spot:.4}"),
    )
}

struct Comparison {
    deep: Vec<f64>,
    var: Vec<f64>,
    p_star: usize,
    config: String,
}

/// Desk-grid deep model vs the AIC-selected VAR on the test segment,
/// scored per series by `metric(actual, predicted)`.
fn compare(panel: &SeriesPanel, split: &SplitSpec, metric: fn(&[f64], &[f64]) -> f64) -> Comparison {
    let sel = select_best(panel, split, &GridSpec { seed: 2018, ..GridSpec::desk() }, &RnnTrainer, &SelectOptions::default())
        .unwrap();
    let test = split.test();
    let deep = FittedValues::from_net(&sel.net, panel, test.start, test.end).unwrap();
    let history = panel.values().columns(0, split.valid_end).into_owned();
    let p_star = select_lag_aic(&history, 5).unwrap().p;
    let var = fit_var_ols(&history, p_star).unwrap();
    let var_pred = rolling_var_forecasts(&var, panel.values(), test.clone()).unwrap();
    let actual = panel.values().columns(test.start, test.len());
    let score = |pred: &DMatrix<f64>| -> Vec<f64> {
        (0..panel.n_series())
            .map(|i| {
                let a: Vec<f64> = actual.row(i).iter().copied().collect();
                let p: Vec<f64> = pred.row(i).iter().copied().collect();
                metric(&a, &p)
            })
            .collect()
    };
    let c = &sel.config;
    Comparison {
        deep: score(&deep.values),
        var: score(&var_pred),
        p_star,
        config: format!("{} p={} s={}", c.cell, c.lag, c.size),
    }
}

fn mse(a: &[f64], p: &[f64]) -> f64 {
    deeptail::backtest::mse(a, p).unwrap()
}

fn mape(a: &[f64], p: &[f64]) -> f64 {
    deeptail::backtest::mape(a, p).unwrap().value
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", ")
}

fn copula_study() -> Outcome {
    let cfg = CopulaGarchConfig { length: 3000, ..Default::default() };
    let panel = simulate_copula_ar_garch(&cfg, 2018).unwrap();
    let split = SplitSpec::new(2000, 2300, 3000).unwrap();
    let c = compare(&panel, &split, mse);
    let wins = c.deep.iter().zip(&c.var).filter(|(d, v)| d < v).count();
    check(
        wins >= 4,
        format!(
            "deep ({}) beats VAR({}) on {wins}/5 series (≥ 4); test MSE deep [{}] vs VAR [{}]",
            c.config,
            c.p_star,
            fmt(&c.deep),
            fmt(&c.var)
        ),
    )
}

fn var_study() -> Outcome {
    let cfg = VarSkewtConfig { length: 3000, ..Default::default() };
    let panel = simulate_var_skewt(&cfg, 2018).unwrap().panel;
    let split = SplitSpec::new(2000, 2300, 3000).unwrap();
    let c = compare(&panel, &split, mape);
    let wins = c.deep.iter().zip(&c.var).filter(|(d, v)| d <= v).count();
    check(
        wins >= 3,
        format!(
            "deep ({}) MAPE ≤ VAR({}) on {wins}/5 series (≥ 3); deep [{}] vs VAR [{}]",
            c.config,
            c.p_star,
            fmt(&c.deep),
            fmt(&c.var)
        ),
    )
}

fn vine_oracle() -> Outcome {
    let pair = |family: u8| VineSpec {
        dim: 2,
        tree: vec![vec![2, 0], vec![1, 1]],
        family: vec![vec![0, 0], vec![family, 0]],
        params: vec![vec![0.0, 0.0], vec![2.0, 0.0]],
    };
    let mut taus = Vec::new();
    for (name, fam) in [("Clayton", 3u8), ("Gumbel", 4u8)] {
        let u = rvine_sample(&pair(fam), 50_000, 7).unwrap();
        let a: Vec<f64> = u.column(0).iter().copied().collect();
        let b: Vec<f64> = u.column(1).iter().copied().collect();
        taus.push((name, kendall_tau(&a, &b).unwrap()));
    }
    let u = rvine_sample(&reference_vine(), 20_000, 8).unwrap();
    let ks: Vec<f64> = (0..5).map(|j| ks_uniform(&u.column(j).iter().copied().collect::<Vec<_>>()).1).collect();
    let pass = taus.iter().all(|(_, t)| (t - 0.5).abs() <= 0.02) && ks.iter().all(|p| *p > 0.01);
    check(
        pass,
        format!(
            "τ {} ({} ± 0.02 of 0.5); five-dim margins KS p = [{}] (> 0.01)",
            taus.iter().map(|(n, t)| format!("{n} {t:.4}")).collect::<Vec<_>>().join(", "),
            "each",
            fmt(&ks)
        ),
    )
}

// Adaptive Simpson on (-π/2, π/2) after x = tan t.
fn integrate_real_line(f: &dyn Fn(f64) -> f64) -> f64 {
    let g = |t: f64| {
        let c = t.cos();
        if c <= 0.0 {
            0.0
        } else {
            f(t.tan()) / (c * c)
        }
    };
    fn simpson(g: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (g(lm), g(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            left + right + (left + right - whole) / 15.0
        } else {
            simpson(g, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + simpson(g, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
    }
    let h = std::f64::consts::FRAC_PI_2 * (1.0 - 1e-12);
    let (a, b) = (-h, h);
    let (fa, fm, fb) = (g(a), g(0.0), g(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson(&g, a, b, fa, fm, fb, whole, 1e-12, 50)
}

fn skewt_integrity() -> Outcome {
    let p = SkewedTParams::new(1.5, 3.0, 1.0).unwrap();
    let mass = integrate_real_line(&|x| skewt_density(x, &p));
    let draws = skewt_sample(&p, 1_000_000, 99, true).unwrap();
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let sd = (draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    check(
        (mass - 1.0).abs() <= 1e-6 && mean.abs() <= 0.05 * sd,
        format!("∫ density = {mass:.10} (1 ± 1e-6); centered mean {mean:.5} vs 0.05·σ_e = {:.5}", 0.05 * sd),
    )
}

fn var_recovery() -> Outcome {
    let sim = simulate_var_skewt(&VarSkewtConfig::default(), 42).unwrap();
    let m = fit_var_ols(sim.panel.values(), 2).unwrap();
    let err = (&m.a[0] - &sim.a1).abs().max().max((&m.a[1] - &sim.a2).abs().max());
    let mut hits = 0;
    for seed in 0..100 {
        let cfg = VarSkewtConfig { length: 3500, ..Default::default() };
        let sim = simulate_var_skewt(&cfg, 5000 + seed).unwrap();
        hits += usize::from(select_lag_aic(sim.panel.values(), 5).unwrap().p == 2);
    }
    check(
        err <= 0.05 && hits >= 90,
        format!("max |Â − A| = {err:.4} (≤ 0.05) at T=5000; AIC picks p=2 in {hits}/100 (≥ 90)"),
    )
}

fn pipeline(bin: &Path, dir: &Path) -> Vec<(String, Vec<u8>)> {
    let run = |args: &[&str]| {
        let out = Command::new(bin).args(args).output().unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    let p = |s: &str| dir.join(s).display().to_string();
    std::fs::create_dir_all(dir).unwrap();
    std::fs::write(dir.join("sim.json"), r#"{"generator":"copula-ar-garch","params":{"length":400}}"#).unwrap();
    std::fs::write(
        dir.join("train.json"),
        r#"{"split":{"train_end":250,"valid_end":320,"test_end":400},
            "grid":{"cells":["LSTM","GRU"],"sizes":[8],"layers":[1],"batch":[10],"bidir":[false],
                    "lags":[2],"lambdas":[0.001],"learning_rates":[0.01],"epochs":[10]}}"#,
    )
    .unwrap();
    std::fs::write(dir.join("fc.json"), r#"{"split":{"train_end":250,"valid_end":320,"test_end":400}}"#).unwrap();
    run(&["simulate", "--config", &p("sim.json"), "--seed", "31", "--out", &p("sim")]);
    run(&["train", "--panel", &p("sim/panel.csv"), "--config", &p("train.json"), "--seed", "31", "--jobs", "2", "--out", &p("train")]);
    run(&["forecast", "--panel", &p("sim/panel.csv"), "--checkpoint", &p("train/checkpoint.json"), "--config", &p("fc.json"), "--out", &p("fc")]);
    run(&["backtest", "--panel", &p("sim/panel.csv"), "--forecast", &p("fc/forecast.csv"), "--out", &p("bt")]);
    let mut files = Vec::new();
    for stage in ["sim", "train", "fc", "bt"] {
        let mut names: Vec<_> = std::fs::read_dir(dir.join(stage)).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        for name in names {
            let name = name.to_string_lossy().to_string();
            if name != "manifest.json" {
                files.push((format!("{stage}/{name}"), std::fs::read(dir.join(stage).join(&name)).unwrap()));
            }
        }
    }
    files
}

fn end_to_end() -> Outcome {
    let bin = Path::new(env!("CARGO_BIN_EXE_deeptail"));
    let tmp = tempfile::tempdir().unwrap();
    let a = pipeline(bin, &tmp.path().join("a"));
    let b = pipeline(bin, &tmp.path().join("b"));
    let names: Vec<&str> = a.iter().map(|f| f.0.as_str()).collect();
    let same = a == b;
    check(same, format!("{} artifacts byte-identical across two runs: {}", a.len(), names.join(" ")))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Duration); 10] = [
        ("gradient correctness", gradients, Duration::from_secs(60)),
        ("GPD MLE recovery", gpd_recovery, Duration::from_secs(120)),
        ("POT coverage", pot_coverage, Duration::from_secs(300)),
        ("backtest calibration", backtest_calibration, Duration::from_secs(60)),
        ("simulation study, copula AR-GARCH (MSE)", copula_study, Duration::from_secs(1800)),
        ("simulation study, VAR skewed-t (MAPE)", var_study, Duration::from_secs(1800)),
        ("vine sampler oracle", vine_oracle, Duration::from_secs(120)),
        ("skewed-t integrity", skewt_integrity, Duration::from_secs(60)),
        ("VAR baseline recovery", var_recovery, Duration::from_secs(180)),
        ("end-to-end determinism", end_to_end, Duration::from_secs(600)),
    ];
    let mut failed = 0;
    for (i, (name, f, budget)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let out = f();
        let took = t0.elapsed();
        let pass = out.pass && took <= *budget;
        failed += usize::from(!pass);
        println!(
            "[{}] criterion {}: {name}: {} [{:.1}s, budget {}s]",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            out.detail,
            took.as_secs_f64(),
            budget.as_secs()
        );
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
