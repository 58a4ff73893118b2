//! Python bindings. Matrices cross the boundary as lists of row lists.

use covpool::geometry;
use covpool::gradcheck::{run_gradcheck_with, GradCheckOptions, GradCheckReport};
use covpool::linalg::{Matrix, SymmetricMatrix};
use covpool::pool;
use covpool::trainer::{EpochRecord, ExperimentConfig, PoolingConfig};
use covpool::{BackwardMethod, Error, Precision, Variant};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Shape(_) | Error::InvalidParameter(_) | Error::NotSymmetric { .. } | Error::NonFinite { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix<f64>> {
    Matrix::from_rows(&rows).map_err(py_err)
}

fn symmetric(rows: Vec<Vec<f64>>) -> PyResult<SymmetricMatrix<f64>> {
    SymmetricMatrix::new(matrix(rows)?).map_err(py_err)
}

fn to_rows(m: &Matrix<f64>) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn method(name: &str) -> PyResult<BackwardMethod> {
    match name {
        "eigen" => Ok(BackwardMethod::Eigen),
        "fused" => Ok(BackwardMethod::Fused),
        other => Err(PyValueError::new_err(format!("unknown backward method '{other}'"))),
    }
}

/// Pooling normalization: variant name plus the parameters it reads.
#[pyclass(name = "NormalizationSpec", frozen)]
#[derive(Clone)]
struct PySpec {
    inner: covpool::NormalizationSpec,
}

#[pymethods]
impl PySpec {
    #[new]
    #[pyo3(signature = (variant = "mpn", alpha = 0.5, eps_log = 1e-3, beta = 0.5, eps_elem = 1e-5))]
    fn new(variant: &str, alpha: f64, eps_log: f64, beta: f64, eps_elem: f64) -> PyResult<Self> {
        let inner = covpool::NormalizationSpec {
            variant: variant.parse::<Variant>().map_err(py_err)?,
            alpha,
            eps_log,
            beta,
            eps_elem,
        };
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.variant.name()
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha
    }

    #[getter]
    fn eps_log(&self) -> f64 {
        self.inner.eps_log
    }

    #[getter]
    fn beta(&self) -> f64 {
        self.inner.beta
    }

    #[getter]
    fn eps_elem(&self) -> f64 {
        self.inner.eps_elem
    }

    fn __repr__(&self) -> String {
        format!(
            "NormalizationSpec(variant='{}', alpha={}, eps_log={}, beta={}, eps_elem={})",
            self.inner.variant, self.inner.alpha, self.inner.eps_log, self.inner.beta, self.inner.eps_elem
        )
    }
}

/// Names of every normalization variant.
#[pyfunction]
fn variants() -> Vec<&'static str> {
    Variant::ALL.iter().map(|v| v.name()).collect()
}

/// Sample covariance of a `d × N` feature matrix.
#[pyfunction]
fn covariance(x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(to_rows(pool::covariance(&matrix(x)?).as_matrix()))
}

/// Eigenvalues (descending) and eigenvectors (columns) of a symmetric matrix.
#[pyfunction]
fn sym_eig(a: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
    let e = covpool::sym_eig(&symmetric(a)?).map_err(py_err)?;
    Ok((e.lambda.clone(), to_rows(&e.u)))
}

/// Normalized covariance `Q` of a `d × N` feature matrix.
#[pyfunction]
fn pool_forward(x: Vec<Vec<f64>>, spec: &PySpec) -> PyResult<Vec<Vec<f64>>> {
    let (q, _) = pool::pool_forward(&matrix(x)?, &spec.inner).map_err(py_err)?;
    Ok(to_rows(q.as_matrix()))
}

/// Gradient with respect to `X` of `⟨grad_q, Q(X)⟩`.
#[pyfunction]
#[pyo3(signature = (x, spec, grad_q, method = "fused"))]
fn pool_backward(x: Vec<Vec<f64>>, spec: &PySpec, grad_q: Vec<Vec<f64>>, method: &str) -> PyResult<Vec<Vec<f64>>> {
    let (_, tape) = pool::pool_forward(&matrix(x)?, &spec.inner).map_err(py_err)?;
    let dx = covpool::pool_backward_with(&tape, &matrix(grad_q)?, self::method(method)?).map_err(py_err)?;
    Ok(to_rows(&dx))
}

/// Upper triangle of a symmetric matrix, row by row.
#[pyfunction]
fn vectorize_upper(q: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    Ok(pool::vectorize_upper(&symmetric(q)?))
}

fn report_dict<'py>(py: Python<'py>, r: &GradCheckReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("variant", r.variant.name())?;
    d.set_item("alpha", r.alpha)?;
    d.set_item("dims", r.dims)?;
    d.set_item("max_rel_err", r.max_rel_err)?;
    d.set_item("max_abs_err", r.max_abs_err)?;
    d.set_item("worst_entry", r.worst_entry)?;
    d.set_item("passed", r.passed)?;
    d.set_item("seed", r.seed)?;
    d.set_item("threshold", r.threshold)?;
    d.set_item("precision", r.precision.name())?;
    d.set_item("method", if r.method == BackwardMethod::Eigen { "eigen" } else { "fused" })?;
    Ok(d)
}

/// Analytic vs central-difference gradient of a random linear loss on `Q`.
#[pyfunction]
#[pyo3(signature = (spec, d = 8, n = 12, seed = 0, precision = "f64", method = "eigen"))]
fn gradcheck<'py>(
    py: Python<'py>,
    spec: &PySpec,
    d: usize,
    n: usize,
    seed: u64,
    precision: &str,
    method: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let opts = GradCheckOptions {
        precision: precision.parse::<Precision>().map_err(py_err)?,
        method: self::method(method)?,
        ..GradCheckOptions::default()
    };
    let r = run_gradcheck_with(&spec.inner, d, n, seed, &opts).map_err(py_err)?;
    report_dict(py, &r)
}

#[pyfunction]
fn pow_euclidean_dist(p: Vec<Vec<f64>>, q: Vec<Vec<f64>>, alpha: f64) -> PyResult<f64> {
    geometry::pow_euclidean_dist(&symmetric(p)?, &symmetric(q)?, alpha).map_err(py_err)
}

#[pyfunction]
fn log_euclidean_dist(p: Vec<Vec<f64>>, q: Vec<Vec<f64>>) -> PyResult<f64> {
    geometry::log_euclidean_dist(&symmetric(p)?, &symmetric(q)?).map_err(py_err)
}

/// Numerical minimizer of the von Neumann regularized likelihood.
#[pyfunction]
fn vnmle_minimize(p: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(to_rows(geometry::vnmle_minimize(&symmetric(p)?).map_err(py_err)?.as_matrix()))
}

/// Rows of `(lambda, f_sqrt, f_log, d_sqrt, d_log)`.
#[pyfunction]
fn shrinkage_table(lambdas: Vec<f64>) -> PyResult<Vec<(f64, f64, f64, f64, f64)>> {
    Ok(geometry::shrinkage_table(&lambdas)
        .map_err(py_err)?
        .into_iter()
        .map(|r| (r.lambda, r.f_sqrt, r.f_log, r.d_sqrt, r.d_log))
        .collect())
}

/// JSON experiment config for the reference toy task. `pooling` is a
/// variant name or `avg`/`max` for first-order pooling.
#[pyfunction]
#[pyo3(signature = (pooling = "mpn", alpha = 0.5, seed = 0))]
fn toy_config(pooling: &str, alpha: f64, seed: u64) -> PyResult<String> {
    let p = match pooling.parse::<covpool::FirstOrderKind>() {
        Ok(mode) => PoolingConfig::FirstOrder { mode },
        Err(_) => PoolingConfig::covariance(pooling.parse::<Variant>().map_err(py_err)?, alpha),
    };
    serde_json::to_string_pretty(&ExperimentConfig::acceptance(p, seed)).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

fn history_dict<'py>(py: Python<'py>, r: &EpochRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("epoch", r.epoch)?;
    d.set_item("train_loss", r.train_loss)?;
    d.set_item("train_err", r.train_err)?;
    d.set_item("test_loss", r.test_loss)?;
    d.set_item("test_err", r.test_err)?;
    d.set_item("lr", r.lr)?;
    Ok(d)
}

/// Trains from a JSON experiment config; returns the per-epoch history.
#[pyfunction]
fn train<'py>(py: Python<'py>, config_json: &str) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg: ExperimentConfig = serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let out = py.allow_threads(|| cfg.run()).map_err(py_err)?;
    out.history.iter().map(|r| history_dict(py, r)).collect()
}

#[pymodule]
#[pyo3(name = "covpool")]
fn covpool_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySpec>()?;
    m.add_function(wrap_pyfunction!(variants, m)?)?;
    m.add_function(wrap_pyfunction!(covariance, m)?)?;
    m.add_function(wrap_pyfunction!(sym_eig, m)?)?;
    m.add_function(wrap_pyfunction!(pool_forward, m)?)?;
    m.add_function(wrap_pyfunction!(pool_backward, m)?)?;
    m.add_function(wrap_pyfunction!(vectorize_upper, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(pow_euclidean_dist, m)?)?;
    m.add_function(wrap_pyfunction!(log_euclidean_dist, m)?)?;
    m.add_function(wrap_pyfunction!(vnmle_minimize, m)?)?;
    m.add_function(wrap_pyfunction!(shrinkage_table, m)?)?;
    m.add_function(wrap_pyfunction!(toy_config, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
