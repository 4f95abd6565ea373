//! Python bindings. Structured results cross the boundary as JSON and are
//! decoded with the stdlib `json` module, so nested reports arrive as plain
//! dicts and lists.

use deeptail::backtest;
use deeptail::baseline;
use deeptail::evt;
use deeptail::forecast::{rolling_forecast, ForecastConfig};
use deeptail::panel::{SeriesPanel, SplitSpec};
use deeptail::rnn::Checkpoint;
use deeptail::select::{leaderboard_json, select_best, GridSpec, RnnTrainer, SelectOptions};
use deeptail::simgen::{simulate_copula_ar_garch, simulate_var_skewt, CopulaGarchConfig, VarSkewtConfig};
use nalgebra::DMatrix;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse<T: DeserializeOwned + Default>(text: Option<&str>) -> PyResult<T> {
    match text {
        None => Ok(T::default()),
        Some(t) => serde_json::from_str(t).map_err(err),
    }
}

fn split(bounds: (usize, usize, usize)) -> PyResult<SplitSpec> {
    SplitSpec::new(bounds.0, bounds.1, bounds.2).map_err(err)
}

/// An n × T panel of series values.
#[pyclass(name = "Panel", module = "deeptail")]
#[derive(Clone)]
pub struct PyPanel {
    inner: SeriesPanel,
}

#[pymethods]
impl PyPanel {
    /// Builds a panel from one list of values per series.
    #[new]
    fn new(names: Vec<String>, rows: Vec<Vec<f64>>) -> PyResult<Self> {
        let t = rows.first().map_or(0, Vec::len);
        if rows.len() != names.len() || rows.iter().any(|r| r.len() != t) {
            return Err(PyValueError::new_err("rows must be one equal-length list per name"));
        }
        let values = DMatrix::from_fn(rows.len(), t, |i, j| rows[i][j]);
        Ok(Self { inner: SeriesPanel::from_rows(names, values).map_err(err)? })
    }

    #[staticmethod]
    fn read_csv(path: &str) -> PyResult<Self> {
        Ok(Self { inner: SeriesPanel::read_csv_path(path.as_ref()).map_err(err)? })
    }

    fn write_csv(&self, path: &str) -> PyResult<()> {
        self.inner.write_csv_path(path.as_ref()).map_err(err)
    }

    #[getter]
    fn names(&self) -> Vec<String> {
        self.inner.names().to_vec()
    }

    /// `(n_series, length)`.
    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.inner.n_series(), self.inner.len())
    }

    fn rows(&self) -> Vec<Vec<f64>> {
        self.inner.values().row_iter().map(|r| r.iter().copied().collect()).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Panel(names={:?}, length={})", self.inner.names(), self.inner.len())
    }
}

/// A trained recurrent mean model.
#[pyclass(name = "Model", module = "deeptail")]
pub struct PyModel {
    checkpoint: Checkpoint,
    #[pyo3(get)]
    val_mse: Option<f64>,
    leaderboard: Option<String>,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let checkpoint = Checkpoint::from_json(text).map_err(err)?;
        checkpoint.to_net().map_err(err)?;
        Ok(Self { checkpoint, val_mse: None, leaderboard: None })
    }

    fn to_json(&self) -> String {
        self.checkpoint.to_json()
    }

    /// Ranked candidates from the grid search, if this model came from `train`.
    fn leaderboard<'py>(&self, py: Python<'py>) -> PyResult<Option<Bound<'py, PyAny>>> {
        match &self.leaderboard {
            Some(text) => Ok(Some(py.import("json")?.call_method1("loads", (text,))?)),
            None => Ok(None),
        }
    }

    #[getter]
    fn architecture<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.checkpoint.arch)
    }
}

/// Simulates `"var-skewt"` or `"copula-ar-garch"`; `params` is a JSON object
/// overriding the generator defaults.
#[pyfunction]
#[pyo3(signature = (generator, seed, params=None))]
fn simulate(generator: &str, seed: u64, params: Option<&str>) -> PyResult<PyPanel> {
    let inner = match generator {
        "var-skewt" => simulate_var_skewt(&parse::<VarSkewtConfig>(params)?, seed).map_err(err)?.panel,
        "copula-ar-garch" => simulate_copula_ar_garch(&parse::<CopulaGarchConfig>(params)?, seed).map_err(err)?,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown generator `{other}`; expected `var-skewt` or `copula-ar-garch`"
            )))
        }
    };
    Ok(PyPanel { inner })
}

/// Grid search over the recurrent model; `grid` is a JSON object (default: the
/// eight-configuration desk grid).
#[pyfunction]
#[pyo3(signature = (panel, bounds, grid=None, seed=0, jobs=0))]
fn train(py: Python<'_>, panel: &PyPanel, bounds: (usize, usize, usize), grid: Option<&str>, seed: u64, jobs: usize) -> PyResult<PyModel> {
    let split = split(bounds)?;
    let mut spec = match grid {
        Some(text) => serde_json::from_str::<GridSpec>(text).map_err(err)?,
        None => GridSpec::desk(),
    };
    spec.seed = seed;
    let sel = py
        .allow_threads(|| {
            select_best(&panel.inner, &split, &spec, &RnnTrainer, &SelectOptions { jobs, checkpoint_dir: None })
        })
        .map_err(err)?;
    let checkpoint = Checkpoint::from_net(
        &sel.net,
        panel.inner.names().to_vec(),
        sel.config.seed,
        Some(sel.config.train_config()),
    );
    Ok(PyModel { checkpoint, val_mse: Some(sel.val_mse), leaderboard: Some(leaderboard_json(&sel.leaderboard)) })
}

/// Rolling one-step point and tail-quantile forecasts over the test segment.
#[pyfunction]
#[pyo3(signature = (model, panel, bounds, levels=None, refit_every=1))]
fn forecast<'py>(
    py: Python<'py>,
    model: &PyModel,
    panel: &PyPanel,
    bounds: (usize, usize, usize),
    levels: Option<Vec<f64>>,
    refit_every: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let net = model.checkpoint.to_net().map_err(err)?;
    let mut cfg = ForecastConfig { refit_every, ..Default::default() };
    if let Some(l) = levels {
        cfg.levels = l;
    }
    let run = rolling_forecast(&net, &panel.inner, &split(bounds)?, &cfg).map_err(err)?;
    to_py(py, &run.records)
}

/// GPD maximum likelihood on the excesses of `residuals` over `threshold`.
#[pyfunction]
fn fit_gpd<'py>(py: Python<'py>, residuals: Vec<f64>, threshold: f64) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &evt::fit_gpd_mle(&residuals, threshold).map_err(err)?)
}

/// Unconditional coverage test: `(LR, p-value)`.
#[pyfunction]
fn lr_uc(violations: usize, n: usize, alpha: f64) -> PyResult<(f64, f64)> {
    backtest::lr_uc(violations, n, alpha).map_err(err)
}

#[pyfunction]
fn lr_cc<'py>(py: Python<'py>, hits: Vec<bool>, alpha: f64) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &backtest::lr_cc(&hits, alpha).map_err(err)?)
}

/// MAPE, MSE and coverage tests for one series; `quantiles` maps level to
/// the forecast VaR path.
#[pyfunction]
#[pyo3(signature = (name, actual, point, quantiles=Vec::new()))]
fn backtest_series<'py>(
    py: Python<'py>,
    name: &str,
    actual: Vec<f64>,
    point: Vec<f64>,
    quantiles: Vec<(f64, Vec<f64>)>,
) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &backtest::backtest_series(name, &actual, &point, &quantiles).map_err(err)?)
}

/// AIC lag order for a VAR on the whole panel.
#[pyfunction]
fn var_select_lag<'py>(py: Python<'py>, panel: &PyPanel, p_max: usize) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &baseline::select_lag_aic(panel.inner.values(), p_max).map_err(err)?)
}

#[pymodule]
#[pyo3(name = "deeptail")]
fn deeptail_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPanel>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(forecast, m)?)?;
    m.add_function(wrap_pyfunction!(fit_gpd, m)?)?;
    m.add_function(wrap_pyfunction!(lr_uc, m)?)?;
    m.add_function(wrap_pyfunction!(lr_cc, m)?)?;
    m.add_function(wrap_pyfunction!(backtest_series, m)?)?;
    m.add_function(wrap_pyfunction!(var_select_lag, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
