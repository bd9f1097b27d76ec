use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use zkd_core::experiments::{self, ShackleOptions};
use zkd_core::maxent::{self, MaxEntProblem};
use zkd_core::nn::{self, Activation, MlpSpec};
use zkd_core::{Error, LogitVector, ProbabilityVector, SoftmaxParams, TemperatureScheme};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn logits(v: Vec<f64>) -> PyResult<LogitVector> {
    LogitVector::new(v).map_err(to_py)
}

fn probs(v: Vec<f64>) -> PyResult<ProbabilityVector> {
    ProbabilityVector::new(v).map_err(to_py)
}

/// Z-score standardization `(z - mean) / (std * tau)`.
#[pyfunction]
#[pyo3(signature = (z, tau = 1.0))]
fn zscore(z: Vec<f64>, tau: f64) -> PyResult<Vec<f64>> {
    Ok(zkd_core::zscore(&logits(z)?, tau).map_err(to_py)?.values)
}

#[pyfunction]
#[pyo3(signature = (z, t = 1.0))]
fn softmax_t(z: Vec<f64>, t: f64) -> PyResult<Vec<f64>> {
    Ok(zkd_core::softmax_t(&logits(z)?, t).map_err(to_py)?.into_vec())
}

#[pyfunction]
fn general_softmax(z: Vec<f64>, a: f64, b: f64) -> PyResult<Vec<f64>> {
    Ok(zkd_core::general_softmax(&logits(z)?, SoftmaxParams { a, b })
        .map_err(to_py)?
        .into_vec())
}

/// Returns `(mean, std)` with the population standard deviation.
#[pyfunction]
fn logit_stats(z: Vec<f64>) -> PyResult<(f64, f64)> {
    let s = zkd_core::logit_stats(&logits(z)?);
    Ok((s.mean, s.std))
}

#[pyfunction]
fn kl_div(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    zkd_core::kl_div(&probs(p)?, &probs(q)?).map_err(to_py)
}

#[pyfunction]
fn cross_entropy(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    zkd_core::cross_entropy(&probs(p)?, &probs(q)?).map_err(to_py)
}

#[pyfunction]
fn entropy(p: Vec<f64>) -> PyResult<f64> {
    Ok(zkd_core::entropy(&probs(p)?))
}

#[pyclass(name = "KdConfig", frozen, get_all)]
struct PyKdConfig {
    lambda_ce: f64,
    lambda_kd: f64,
    tau: f64,
    /// "zscore" or "shared_constant"
    scheme: String,
    /// Shared temperature; only used by "shared_constant".
    t: Option<f64>,
}

impl PyKdConfig {
    fn to_core(&self) -> PyResult<zkd_core::KdConfig> {
        let scheme = match (self.scheme.as_str(), self.t) {
            ("zscore", _) => TemperatureScheme::ZScore,
            ("shared_constant", Some(t)) => TemperatureScheme::SharedConstant { t },
            ("shared_constant", None) => TemperatureScheme::SharedConstant { t: self.tau },
            (other, _) => return Err(PyValueError::new_err(format!("unknown scheme {other:?}"))),
        };
        let cfg = zkd_core::KdConfig {
            lambda_ce: self.lambda_ce,
            lambda_kd: self.lambda_kd,
            tau: self.tau,
            scheme,
        };
        cfg.validate().map_err(to_py)?;
        Ok(cfg)
    }
}

#[pymethods]
impl PyKdConfig {
    #[new]
    #[pyo3(signature = (lambda_ce = 1.0, lambda_kd = 9.0, tau = 2.0, scheme = "zscore".to_string(), t = None))]
    fn new(lambda_ce: f64, lambda_kd: f64, tau: f64, scheme: String, t: Option<f64>) -> PyResult<Self> {
        let c = Self { lambda_ce, lambda_kd, tau, scheme, t };
        c.to_core()?;
        Ok(c)
    }

    fn __repr__(&self) -> String {
        format!(
            "KdConfig(lambda_ce={}, lambda_kd={}, tau={}, scheme={:?}, t={:?})",
            self.lambda_ce, self.lambda_kd, self.tau, self.scheme, self.t
        )
    }
}

#[pyclass(name = "LossBreakdown", frozen, get_all)]
struct PyLossBreakdown {
    ce_hard: f64,
    kd: f64,
    total: f64,
}

fn config_or_default(config: Option<&PyKdConfig>) -> PyResult<zkd_core::KdConfig> {
    config.map_or_else(|| Ok(zkd_core::KdConfig::default()), |c| c.to_core())
}

/// `lambda_ce * CE(y, softmax(student)) + lambda_kd * tau^2 * KL(q(teacher) || q(student))`.
#[pyfunction]
#[pyo3(signature = (teacher, student, label, config = None))]
fn kd_objective(
    teacher: Vec<f64>,
    student: Vec<f64>,
    label: usize,
    config: Option<&PyKdConfig>,
) -> PyResult<PyLossBreakdown> {
    let l = zkd_core::kd_objective(&logits(teacher)?, &logits(student)?, label, &config_or_default(config)?)
        .map_err(to_py)?;
    Ok(PyLossBreakdown { ce_hard: l.ce_hard, kd: l.kd, total: l.total })
}

#[pyfunction]
#[pyo3(signature = (teacher, student, label, config = None))]
fn kd_objective_grad(
    teacher: Vec<f64>,
    student: Vec<f64>,
    label: usize,
    config: Option<&PyKdConfig>,
) -> PyResult<Vec<f64>> {
    zkd_core::kd_objective_grad(&logits(teacher)?, &logits(student)?, label, &config_or_default(config)?)
        .map_err(to_py)
}

#[pyclass(name = "MaxEntSolution", frozen, get_all)]
struct PyMaxEntSolution {
    multiplier: f64,
    distribution: Vec<f64>,
    entropy: f64,
    log_partition: f64,
    residual: f64,
}

/// Maximum-entropy distribution over classes with `E[logits] = target`.
#[pyfunction]
#[pyo3(signature = (logits, target, tol = maxent::DEFAULT_TOL))]
fn solve_multiplier(logits: Vec<f64>, target: f64, tol: f64) -> PyResult<PyMaxEntSolution> {
    let problem = MaxEntProblem::new(LogitVector::new(logits).map_err(to_py)?, target).map_err(to_py)?;
    let s = maxent::solve_multiplier(&problem, tol).map_err(to_py)?;
    Ok(PyMaxEntSolution {
        multiplier: s.multiplier,
        distribution: s.distribution.into_vec(),
        entropy: s.entropy,
        log_partition: s.log_partition,
        residual: s.residual,
    })
}

#[pyclass(name = "ShackleReport", frozen, get_all)]
struct PyShackleReport {
    temperature: f64,
    converged_student_logits: Vec<f64>,
    delta: f64,
    max_shift_residual: f64,
    std_ratio: f64,
    iterations: usize,
    final_kl: f64,
}

#[pyfunction]
#[pyo3(signature = (teacher, temperature, init, lr = None, max_iters = None, tol = None))]
fn shackle_study(
    teacher: Vec<f64>,
    temperature: f64,
    init: Vec<f64>,
    lr: Option<f64>,
    max_iters: Option<usize>,
    tol: Option<f64>,
) -> PyResult<PyShackleReport> {
    let d = ShackleOptions::for_temperature(temperature);
    let opts = ShackleOptions {
        lr: lr.unwrap_or(d.lr),
        max_iters: max_iters.unwrap_or(d.max_iters),
        tol: tol.unwrap_or(d.tol),
    };
    let r = experiments::shackle_study(&logits(teacher)?, temperature, &logits(init)?, opts).map_err(to_py)?;
    Ok(PyShackleReport {
        temperature: r.temperature,
        converged_student_logits: r.converged_student_logits,
        delta: r.delta,
        max_shift_residual: r.max_shift_residual,
        std_ratio: r.std_ratio,
        iterations: r.iterations,
        final_kl: r.final_kl,
    })
}

/// Per student: `(vanilla_kl, zscore_kl, argmax)`.
#[pyfunction]
#[pyo3(signature = (teacher, students, tau = 2.0))]
fn toy_case(teacher: Vec<f64>, students: Vec<Vec<f64>>, tau: f64) -> PyResult<Vec<(f64, f64, usize)>> {
    let students = students.into_iter().map(logits).collect::<PyResult<Vec<_>>>()?;
    let r = experiments::toy_case(&logits(teacher)?, &students, tau, None).map_err(to_py)?;
    Ok(r.rows.iter().map(|row| (row.vanilla_kl, row.zscore_kl, row.argmax)).collect())
}

/// Fully connected network with manual backprop.
#[pyclass(name = "Mlp")]
struct PyMlp {
    inner: nn::Mlp,
}

#[pymethods]
impl PyMlp {
    #[new]
    #[pyo3(signature = (layer_sizes, activation = "relu", seed = 0))]
    fn new(layer_sizes: Vec<usize>, activation: &str, seed: u64) -> PyResult<Self> {
        let activation = match activation {
            "relu" => Activation::Relu,
            "tanh" => Activation::Tanh,
            other => return Err(PyValueError::new_err(format!("unknown activation {other:?}"))),
        };
        let spec = MlpSpec::new(layer_sizes, activation, seed).map_err(to_py)?;
        Ok(Self { inner: nn::Mlp::init(&spec).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: nn::load_checkpoint(path).map_err(to_py)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        nn::save_checkpoint(&self.inner, path).map_err(to_py)
    }

    #[getter]
    fn layer_sizes(&self) -> Vec<usize> {
        self.inner.spec().layer_sizes.clone()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    fn forward(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.forward_raw(&x).map_err(to_py)
    }

    /// Flat parameter gradient of `dot(d_logits, forward(x))`.
    fn backward(&self, x: Vec<f64>, d_logits: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.inner.backward(&x, &d_logits).map_err(to_py)?.flatten())
    }

    fn parameters(&self) -> Vec<f64> {
        self.inner.parameters()
    }

    fn set_parameters(&mut self, values: Vec<f64>) -> PyResult<()> {
        self.inner.set_parameters(&values).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("Mlp(layer_sizes={:?})", self.inner.spec().layer_sizes)
    }
}

#[pymodule]
fn zkd(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(zscore, m)?)?;
    m.add_function(wrap_pyfunction!(softmax_t, m)?)?;
    m.add_function(wrap_pyfunction!(general_softmax, m)?)?;
    m.add_function(wrap_pyfunction!(logit_stats, m)?)?;
    m.add_function(wrap_pyfunction!(kl_div, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(entropy, m)?)?;
    m.add_function(wrap_pyfunction!(kd_objective, m)?)?;
    m.add_function(wrap_pyfunction!(kd_objective_grad, m)?)?;
    m.add_function(wrap_pyfunction!(solve_multiplier, m)?)?;
    m.add_function(wrap_pyfunction!(shackle_study, m)?)?;
    m.add_function(wrap_pyfunction!(toy_case, m)?)?;
    m.add_class::<PyKdConfig>()?;
    m.add_class::<PyLossBreakdown>()?;
    m.add_class::<PyMaxEntSolution>()?;
    m.add_class::<PyShackleReport>()?;
    m.add_class::<PyMlp>()?;
    Ok(())
}
