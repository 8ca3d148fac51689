//! Python bindings. Nested parameter blocks cross the boundary as JSON
//! strings in the same schema the CLI reads and writes; the commonly
//! touched scalars also get properties.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use learnpanel::estimator::{self, FitConfig};
use learnpanel::functionals::{self, Decomposition, FittedModel, WeightedSumSpec, XkDistribution};
use learnpanel::harness::{self, io, ExperimentConfig};
use learnpanel::likelihood;
use learnpanel::model;
use learnpanel::npmle;
use learnpanel::simulate::{self, DgpConfig};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Outcome and choice parameters of the learning model.
#[pyclass(name = "ModelParams", from_py_object)]
#[derive(Clone)]
pub struct PyModelParams {
    pub inner: model::ModelParams,
}

#[pymethods]
impl PyModelParams {
    /// The three-period, two-alternative Monte Carlo design.
    #[staticmethod]
    fn mc_design() -> Self {
        PyModelParams { inner: model::ModelParams::mc_design() }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: model::ModelParams = serde_json::from_str(text).map_err(err)?;
        inner.validate().map_err(err)?;
        Ok(PyModelParams { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(err)
    }

    #[getter]
    fn rho(&self) -> f64 {
        self.inner.choice.rho
    }

    #[setter]
    fn set_rho(&mut self, v: f64) {
        self.inner.choice.rho = v;
    }

    #[getter]
    fn kappa(&self) -> f64 {
        self.inner.choice.kappa
    }

    #[setter]
    fn set_kappa(&mut self, v: f64) {
        self.inner.choice.kappa = v;
    }

    /// Factor covariance as a nested list.
    #[getter]
    fn sigma_u(&self) -> Vec<Vec<f64>> {
        self.inner.outcome.sigma_u.clone()
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.outcome.horizon()
    }

    #[getter]
    fn alternatives(&self) -> usize {
        self.inner.outcome.alternatives()
    }

    fn __repr__(&self) -> String {
        format!(
            "ModelParams(T={}, D={}, rho={}, kappa={})",
            self.horizon(),
            self.alternatives(),
            self.rho(),
            self.kappa()
        )
    }
}

/// A balanced panel. Periods and alternatives are one-based on the Python side.
#[pyclass(name = "Panel", from_py_object)]
#[derive(Clone)]
pub struct PyPanel {
    pub inner: model::PanelData,
}

#[pymethods]
impl PyPanel {
    /// Builds a panel from `(id, t, d, y, x)` rows, `t` and `d` one-based.
    #[staticmethod]
    fn from_rows(rows: Vec<(usize, usize, usize, f64, Vec<f64>)>) -> PyResult<Self> {
        let mut individuals: Vec<Vec<model::Observation>> = Vec::new();
        let mut current = None;
        for (id, t, d, y, x) in rows {
            if d == 0 || t == 0 {
                return Err(err("periods and alternatives are one-based"));
            }
            if current != Some(id) {
                individuals.push(Vec::new());
                current = Some(id);
            }
            let h = individuals.last_mut().expect("pushed above");
            if t != h.len() + 1 {
                return Err(err(format!("individual {id}: rows out of period order")));
            }
            h.push(model::Observation { y, d: d - 1, x });
        }
        Ok(PyPanel { inner: model::PanelData::new(individuals).map_err(err)? })
    }

    fn rows(&self) -> Vec<(usize, usize, usize, f64, Vec<f64>)> {
        let mut out = Vec::new();
        for (i, h) in self.inner.individuals.iter().enumerate() {
            for (t, o) in h.iter().enumerate() {
                out.push((i, t + 1, o.d + 1, o.y, o.x.clone()));
            }
        }
        out
    }

    #[staticmethod]
    fn read_csv(path: &str) -> PyResult<Self> {
        Ok(PyPanel { inner: io::read_panel_file(path.as_ref()).map_err(err)? })
    }

    fn write_csv(&self, path: &str) -> PyResult<()> {
        io::write_panel_file(path.as_ref(), &self.inner).map_err(err)
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.horizon()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Panel(n={}, T={})", self.inner.len(), self.inner.horizon())
    }
}

/// Data-generating process: parameters, `X*_k` mixture, covariates, seed.
#[pyclass(name = "Dgp", from_py_object)]
#[derive(Clone)]
pub struct PyDgp {
    pub inner: DgpConfig,
}

#[pymethods]
impl PyDgp {
    #[new]
    #[pyo3(signature = (seed = 0, params = None))]
    fn new(seed: u64, params: Option<PyModelParams>) -> Self {
        let mut inner = DgpConfig { seed, ..DgpConfig::default() };
        if let Some(p) = params {
            inner.outcome = p.inner.outcome;
            inner.choice = p.inner.choice;
        }
        PyDgp { inner }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: DgpConfig = serde_json::from_str(text).map_err(err)?;
        inner.validate().map_err(err)?;
        Ok(PyDgp { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(err)
    }

    #[getter]
    fn params(&self) -> PyModelParams {
        PyModelParams { inner: self.inner.params() }
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    /// Simulates `n` individuals.
    fn simulate(&self, n: usize) -> PyResult<PyPanel> {
        Ok(PyPanel { inner: simulate::simulate_panel(&self.inner, n).map_err(err)?.data })
    }

    /// Quantile of the true `X*_k` distribution.
    fn xk_quantile(&self, alpha: f64) -> PyResult<f64> {
        XkDistribution::Truncated(self.inner.xk.clone()).quantile(alpha).map_err(err)
    }
}

#[pyclass(name = "FitResult", from_py_object)]
#[derive(Clone)]
pub struct PyFitResult {
    pub inner: estimator::FitResult,
}

#[pymethods]
impl PyFitResult {
    #[getter]
    fn params(&self) -> PyModelParams {
        PyModelParams { inner: self.inner.theta_hat.clone() }
    }

    #[getter]
    fn loglik(&self) -> f64 {
        self.inner.loglik
    }

    #[getter]
    fn converged(&self) -> bool {
        self.inner.converged
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations
    }

    #[getter]
    fn gradient_norm(&self) -> f64 {
        self.inner.gradient_norm
    }

    #[getter]
    fn kkt_residual(&self) -> f64 {
        self.inner.kkt_residual
    }

    #[getter]
    fn support(&self) -> Vec<f64> {
        self.inner.mixture_hat.support.clone()
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.mixture_hat.weights.clone()
    }

    #[getter]
    fn warnings(&self) -> Vec<String> {
        self.inner.warnings.clone()
    }

    /// Free coordinates on their reported scale, keyed by name.
    fn estimates(&self) -> Vec<(String, f64)> {
        self.inner.free_names.iter().cloned().zip(self.inner.free_hat.iter().cloned()).collect()
    }

    /// Quantile of the estimated `X*_k` distribution.
    fn xk_quantile(&self, alpha: f64) -> PyResult<f64> {
        functionals::mixture_quantile(&self.inner.mixture_hat, alpha).map_err(err)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyFitResult { inner: serde_json::from_str(text).map_err(err)? })
    }

    fn __repr__(&self) -> String {
        format!(
            "FitResult(loglik={:.6}, converged={}, iterations={})",
            self.inner.loglik, self.inner.converged, self.inner.iterations
        )
    }
}

/// Profile sieve ML fit. `config` is a JSON object in the `FitConfig`
/// schema; `initial` overrides its start value.
#[pyfunction]
#[pyo3(signature = (panel, config = None, initial = None, seed = None))]
fn fit(
    py: Python<'_>,
    panel: &PyPanel,
    config: Option<&str>,
    initial: Option<PyModelParams>,
    seed: Option<u64>,
) -> PyResult<PyFitResult> {
    let mut cfg: FitConfig = match config {
        Some(text) => serde_json::from_str(text).map_err(err)?,
        None => FitConfig::default(),
    };
    if let Some(p) = initial {
        cfg.initial = Some(p.inner);
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let data = panel.inner.clone();
    let r = py.detach(move || estimator::fit(&data, &cfg)).map_err(err)?;
    Ok(PyFitResult { inner: r })
}

/// Default sieve support for a sample of size `n`.
#[pyfunction]
fn build_grid(n: usize) -> Vec<f64> {
    estimator::build_grid(n)
}

/// `log ℓ^c(w_i, x_s)` as an `n × q` nested list.
#[pyfunction]
fn loglik_matrix(panel: &PyPanel, support: Vec<f64>, params: &PyModelParams) -> PyResult<Vec<Vec<f64>>> {
    let p = &params.inner;
    let l = likelihood::loglik_matrix(&panel.inner, &support, &p.outcome, &p.choice).map_err(err)?;
    Ok((0..l.n).map(|i| l.row(i).iter().map(|v| v + l.row_shift[i]).collect()).collect())
}

/// Observed-data log-likelihood under a discrete `X*_k` distribution.
#[pyfunction]
fn observed_loglik(panel: &PyPanel, support: Vec<f64>, weights: Vec<f64>, params: &PyModelParams) -> PyResult<f64> {
    let p = &params.inner;
    likelihood::observed_loglik(&panel.inner, &support, &weights, &p.outcome, &p.choice).map_err(err)
}

/// NPMLE of mixing weights for a log-likelihood matrix. Returns
/// `(weights, kkt_residual, certified)`.
#[pyfunction]
fn solve_weights(log_l: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, f64, bool)> {
    let n = log_l.len();
    let q = log_l.first().map_or(0, |r| r.len());
    if log_l.iter().any(|r| r.len() != q) {
        return Err(err("ragged likelihood matrix"));
    }
    let l = likelihood::LikelihoodMatrix::from_raw(n, q, log_l.into_iter().flatten().collect()).map_err(err)?;
    let s = npmle::solve_weights(&l).map_err(err)?;
    Ok((s.weights, s.kkt_residual, s.certified))
}

fn parse_which(which: &str) -> PyResult<Decomposition> {
    match which {
        "conditional" => Ok(Decomposition::Conditional),
        "unconditional" => Ok(Decomposition::Unconditional),
        "counterfactual" => Ok(Decomposition::Counterfactual),
        other => Err(err(format!("unknown decomposition '{other}'"))),
    }
}

/// Variance decomposition of a discounted sum of potential outcomes along
/// the one-based `path`. Returns `(v_unknown, v_known, total)`.
/// `model` is either a `FitResult` or a `Dgp`.
#[pyfunction]
#[pyo3(signature = (model, path, discount = 0.95, period = 1, which = "conditional", x = None, draws = 100_000, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn decompose(
    py: Python<'_>,
    model: &Bound<'_, PyAny>,
    path: Vec<usize>,
    discount: f64,
    period: usize,
    which: &str,
    x: Option<Vec<f64>>,
    draws: usize,
    seed: u64,
) -> PyResult<(f64, f64, f64)> {
    let fitted = if let Ok(r) = model.cast::<PyFitResult>() {
        let r = r.borrow();
        FittedModel { params: r.inner.theta_hat.clone(), xk: XkDistribution::Grid(r.inner.mixture_hat.clone()) }
    } else if let Ok(d) = model.cast::<PyDgp>() {
        let d = d.borrow();
        FittedModel { params: d.inner.params(), xk: XkDistribution::Truncated(d.inner.xk.clone()) }
    } else {
        return Err(err("model must be a FitResult or a Dgp"));
    };
    if period == 0 || path.contains(&0) {
        return Err(err("periods and alternatives are one-based"));
    }
    let spec = WeightedSumSpec::discounted(path.iter().map(|d| d - 1).collect(), discount);
    let which = parse_which(which)?;
    let x = x.unwrap_or_else(|| {
        let mut v = vec![0.0; fitted.params.outcome.covariate_dim()];
        v[0] = 1.0;
        v
    });
    let r = py
        .detach(move || functionals::decompose_t(&spec, period - 1, which, &fitted, &x, draws, seed))
        .map_err(err)?;
    Ok((r.v_unknown, r.v_known, r.total))
}

/// Runs a Monte Carlo experiment described by a TOML document and returns
/// the report as JSON. Writes CSV tables too when `out_dir` is given.
#[pyfunction]
#[pyo3(signature = (config_toml, out_dir = None))]
fn mc_run(py: Python<'_>, config_toml: &str, out_dir: Option<&str>) -> PyResult<String> {
    let config = ExperimentConfig::from_toml_str(config_toml).map_err(err)?;
    let report = py.detach(|| harness::mc_run(&config)).map_err(err)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(err)?;
        harness::mc::write_report(dir.as_ref(), &report, true).map_err(err)?;
    }
    serde_json::to_string(&report).map_err(err)
}

#[pymodule]
fn pylearnpanel(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelParams>()?;
    m.add_class::<PyPanel>()?;
    m.add_class::<PyDgp>()?;
    m.add_class::<PyFitResult>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(build_grid, m)?)?;
    m.add_function(wrap_pyfunction!(loglik_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(observed_loglik, m)?)?;
    m.add_function(wrap_pyfunction!(solve_weights, m)?)?;
    m.add_function(wrap_pyfunction!(decompose, m)?)?;
    m.add_function(wrap_pyfunction!(mc_run, m)?)?;
    Ok(())
}
