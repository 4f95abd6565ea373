use deeptail::forecast::{
    retrain_schedule, rolling_forecast, rolling_forecast_schedule, ForecastConfig, QuantileSource,
};
use deeptail::panel::{SeriesPanel, SplitSpec, Standardization};
use deeptail::rnn::{forward_window, Architecture, CellKind, RecurrentNet};
use deeptail::select::{select_best, GridSpec, RnnTrainer, SelectOptions};
use deeptail::simgen::{simulate_var_skewt, VarSkewtConfig};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StudentT};
use statrs::distribution::{Binomial, DiscreteCDF};

fn var_panel(len: usize, seed: u64) -> SeriesPanel {
    let cfg = VarSkewtConfig { dim: 3, length: len, ..Default::default() };
    simulate_var_skewt(&cfg, seed).unwrap().panel
}

fn tiny_grid(seed: u64) -> GridSpec {
    GridSpec {
        cells: vec![CellKind::Gru],
        layers: vec![1],
        sizes: vec![6],
        batch: vec![10],
        bidir: vec![false],
        lags: vec![2],
        lambdas: vec![0.001],
        learning_rates: vec![0.01],
        epochs: vec![8],
        seed,
        ..GridSpec::default()
    }
}

#[test]
fn point_forecasts_replay_forward_pass() {
    let panel = var_panel(400, 1);
    let arch = Architecture { cell: CellKind::Mlstm, input_dim: 3, lag: 3, layers: 2, size: 5, bidirectional: true };
    let mut net = RecurrentNet::random(arch, 9).unwrap();
    let split = SplitSpec::new(250, 320, 400).unwrap();
    net.scaling = Standardization::fit_lenient(&panel, &split);
    let run = rolling_forecast(&net, &panel, &split, &ForecastConfig::default()).unwrap();
    assert_eq!(run.records.len(), 80 * 3);
    for r in &run.records {
        let i = panel.names().iter().position(|n| *n == r.series).unwrap();
        let z = net.scaling.apply(&panel.window(r.time, 3));
        let (pred, _) = forward_window(&net, &z).unwrap();
        let manual = pred[i] * net.scaling.sd[i] + net.scaling.mean[i];
        assert_eq!(r.point, manual);
    }
}

#[test]
fn schedule_without_retraining_is_plain_forecast() {
    let panel = var_panel(300, 2);
    let split = SplitSpec::new(180, 230, 300).unwrap();
    let grid = tiny_grid(5);
    let models = retrain_schedule(&panel, &split, &grid, 0, &RnnTrainer, &SelectOptions::default()).unwrap();
    assert_eq!(models.len(), 1);
    let cfg = ForecastConfig::default();
    let scheduled = rolling_forecast_schedule(&models, &panel, &cfg).unwrap();
    let sel = select_best(&panel, &split, &grid, &RnnTrainer, &SelectOptions::default()).unwrap();
    let plain = rolling_forecast(&sel.net, &panel, &split, &cfg).unwrap();
    assert_eq!(scheduled, plain);
}

#[test]
fn retrained_blocks_only_see_the_past() {
    let panel = var_panel(340, 3);
    let split = SplitSpec::new(200, 250, 340).unwrap();
    let models = retrain_schedule(&panel, &split, &tiny_grid(1), 2, &RnnTrainer, &SelectOptions::default()).unwrap();
    let sizes: Vec<usize> = models.iter().map(|m| m.split.test().len()).collect();
    assert_eq!(sizes, vec![30, 30, 30]);
    for m in &models {
        assert_eq!(m.split.valid_end, m.split.test().start);
        assert_eq!(m.split.valid_end - m.split.train_end, 50);
    }
    let run = rolling_forecast_schedule(&models, &panel, &ForecastConfig::default()).unwrap();
    let times: Vec<usize> = run.records.iter().step_by(3).map(|r| r.time).collect();
    assert_eq!(times, (250..340).collect::<Vec<_>>());
}

#[test]
fn tail_quantiles_cover_at_nominal_rate() {
    // constant mean plus Student-t(4) noise; the mean model is exact
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let t4 = StudentT::new(4.0).unwrap();
    let len = 3000;
    let values = DMatrix::from_fn(1, len, |_, _| 20.0 + t4.sample(&mut rng));
    let panel = SeriesPanel::from_rows(vec!["x".into()], values).unwrap();
    let arch = Architecture { cell: CellKind::Gru, input_dim: 1, lag: 1, layers: 1, size: 2, bidirectional: false };
    let mut net = RecurrentNet::zeros(arch).unwrap();
    net.scaling = Standardization { mean: vec![20.0], sd: vec![1.0] };
    let split = SplitSpec::new(1500, 2000, 3000).unwrap();
    let levels = vec![0.95, 0.96, 0.97, 0.98];
    let cfg = ForecastConfig { levels: levels.clone(), ..Default::default() };
    let run = rolling_forecast(&net, &panel, &split, &cfg).unwrap();
    assert!(run.records.iter().all(|r| r.sources.iter().all(|s| *s == QuantileSource::Gpd)));
    for (k, q) in levels.iter().enumerate() {
        let hits = run.records.iter().filter(|r| panel.values()[(0, r.time)] > r.quantiles[k]).count() as u64;
        let b = Binomial::new(1.0 - q, 1000).unwrap();
        let (lo, hi) = (b.inverse_cdf(0.025), b.inverse_cdf(0.975));
        assert!((lo..=hi).contains(&hits), "level {q}: {hits} violations outside [{lo}, {hi}]");
    }
}

#[test]
fn desk_selection_beats_median_and_is_reproducible() {
    let panel = var_panel(500, 4);
    let split = SplitSpec::new(350, 420, 500).unwrap();
    let grid = GridSpec { epochs: vec![10], seed: 77, ..GridSpec::desk() };
    let opts = SelectOptions { jobs: 4, checkpoint_dir: None };
    let a = select_best(&panel, &split, &grid, &RnnTrainer, &opts).unwrap();
    assert_eq!(a.leaderboard.len() + a.failed.len(), grid.cardinality());
    let mut mses: Vec<f64> = a.leaderboard.iter().map(|r| r.val_mse).collect();
    mses.sort_by(f64::total_cmp);
    assert_eq!(a.val_mse, mses[0]);
    assert!(a.val_mse <= mses[mses.len() / 2]);
    let b = select_best(&panel, &split, &grid, &RnnTrainer, &SelectOptions { jobs: 1, checkpoint_dir: None }).unwrap();
    let bits = |s: &deeptail::select::Selection| -> Vec<(usize, u64)> {
        s.leaderboard.iter().map(|r| (r.config.index, r.val_mse.to_bits())).collect()
    };
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.net, b.net);
}
