//! Python bindings: NIW fusion, Gaussian conditioning, the online moment
//! estimator and single experiment trials.

use std::collections::BTreeMap;

use adaptmpc::estimator::{AdaptConfig, RunningMoments};
use adaptmpc::experiments::{self, stats, ExperimentConfig, PriorFamily, TrialSpec};
use adaptmpc::gaussian::{self, JointGaussian, MeanRule, NiwParams};
use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyFileNotFoundError, PyValueError};
use pyo3::prelude::*;

type Matrix = Vec<Vec<f64>>;

fn err(e: adaptmpc::Error) -> PyErr {
    match e {
        adaptmpc::Error::MissingFiles(_) => PyFileNotFoundError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_matrix(rows: &Matrix) -> PyResult<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn from_matrix(m: &DMatrix<f64>) -> Matrix {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn to_vector(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

fn mean_rule(name: &str) -> PyResult<MeanRule> {
    match name {
        "prior_count" => Ok(MeanRule::PriorCount),
        "standard" => Ok(MeanRule::Standard),
        _ => Err(PyValueError::new_err(format!("unknown mean rule {name:?}"))),
    }
}

/// MAP fusion of NIW prior `(phi, mu0, m, n0)` with empirical moments of
/// weight `n`. Returns `(mean, cov)`.
#[pyfunction]
#[pyo3(signature = (phi, mu0, m, n0, mean, cov, n, rule = "prior_count"))]
#[allow(clippy::too_many_arguments)]
fn niw_map_update(
    phi: Matrix,
    mu0: Vec<f64>,
    m: f64,
    n0: f64,
    mean: Vec<f64>,
    cov: Matrix,
    n: f64,
    rule: &str,
) -> PyResult<(Vec<f64>, Matrix)> {
    let prior = NiwParams::new(to_matrix(&phi)?, to_vector(&mu0), m, n0).map_err(err)?;
    let post = gaussian::niw_map_update(&prior, &to_vector(&mean), &to_matrix(&cov)?, n, mean_rule(rule)?)
        .map_err(err)?;
    Ok((post.mean.iter().copied().collect(), from_matrix(&post.cov)))
}

/// Conditions a joint Gaussian over `[x; u; x']` on `[x; u]`. Returns a dict
/// with `fx`, `fu`, `fc` and `noise_cov`.
#[pyfunction]
fn condition_dynamics(mean: Vec<f64>, cov: Matrix, dx: usize, du: usize) -> PyResult<BTreeMap<String, Matrix>> {
    let joint = JointGaussian::new(to_vector(&mean), to_matrix(&cov)?).map_err(err)?;
    let d = gaussian::condition_dynamics(&joint, dx, du).map_err(err)?;
    Ok(BTreeMap::from([
        ("fx".to_string(), from_matrix(&d.fx)),
        ("fu".to_string(), from_matrix(&d.fu)),
        ("fc".to_string(), vec![d.fc.iter().copied().collect()]),
        ("noise_cov".to_string(), from_matrix(&d.noise_cov)),
    ]))
}

/// Forgetting factor and effective sample size for prediction error `rho`
/// under the default adaptation settings.
#[pyfunction]
fn adapt_beta_n(rho: f64) -> (f64, f64) {
    AdaptConfig::default().beta_and_n(rho)
}

#[pyfunction]
#[pyo3(signature = (successes, trials, z = stats::Z95))]
fn wilson_interval(successes: usize, trials: usize, z: f64) -> (f64, f64) {
    stats::wilson_interval(successes, trials, z)
}

/// Reference experiment config as JSON.
#[pyfunction]
fn default_config() -> PyResult<String> {
    ExperimentConfig::default().to_json_pretty().map_err(err)
}

/// Collects the task's data, trains one prior and runs a single trial.
/// Returns the trial result as JSON.
#[pyfunction]
#[pyo3(signature = (task, family, adapt = true, trial = 0, offset = 0.0, config = None, overrides = vec![]))]
fn run_trial(
    py: Python<'_>,
    task: &str,
    family: &str,
    adapt: bool,
    trial: usize,
    offset: f64,
    config: Option<&str>,
    overrides: Vec<String>,
) -> PyResult<String> {
    let base = match config {
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => ExperimentConfig::default(),
    };
    let cfg = base.with_overrides(&overrides).map_err(err)?;
    cfg.validate().map_err(err)?;
    let family: PriorFamily = family.parse().map_err(err)?;
    py.detach(|| {
        let eval = cfg.task(task)?;
        let mut sub = cfg.clone();
        sub.data.retain(|d| eval.sources.iter().any(|s| s == d.task()));
        let sources = experiments::collect_all(&sub)?;
        let trained = experiments::train_prior(&cfg, eval, family, &sources)?;
        let spec = TrialSpec {
            index: 0,
            task: task.to_string(),
            family,
            adapt,
            offset,
            trial,
            seed: cfg.seed + trial as u64,
        };
        let (result, _) = experiments::run_trial(&cfg, &spec, &trained)?;
        Ok(serde_json::to_string(&result)?)
    })
    .map_err(err)
}

/// Exponentially forgetting mean and second moment of joint transitions.
#[pyclass(name = "RunningMoments")]
struct PyRunningMoments {
    inner: RunningMoments,
}

#[pymethods]
impl PyRunningMoments {
    #[new]
    #[pyo3(signature = (mean, second_moment, beta, n_eff = 1.0))]
    fn new(mean: Vec<f64>, second_moment: Matrix, beta: f64, n_eff: f64) -> PyResult<Self> {
        let inner = RunningMoments::new(to_vector(&mean), to_matrix(&second_moment)?, beta, n_eff).map_err(err)?;
        Ok(Self { inner })
    }

    fn observe(&mut self, p: Vec<f64>) -> PyResult<()> {
        self.inner.observe(&to_vector(&p)).map_err(err)
    }

    fn covariance(&self) -> Matrix {
        from_matrix(&self.inner.covariance())
    }

    #[getter]
    fn mean(&self) -> Vec<f64> {
        self.inner.mean.iter().copied().collect()
    }

    #[getter]
    fn second_moment(&self) -> Matrix {
        from_matrix(&self.inner.second_moment)
    }

    #[getter]
    fn beta(&self) -> f64 {
        self.inner.beta
    }

    #[getter]
    fn n_eff(&self) -> f64 {
        self.inner.n_eff
    }

    fn __len__(&self) -> usize {
        self.inner.dim()
    }
}

#[pymodule]
pub fn adaptmpc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(niw_map_update, m)?)?;
    m.add_function(wrap_pyfunction!(condition_dynamics, m)?)?;
    m.add_function(wrap_pyfunction!(adapt_beta_n, m)?)?;
    m.add_function(wrap_pyfunction!(wilson_interval, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_trial, m)?)?;
    m.add_class::<PyRunningMoments>()?;
    Ok(())
}
