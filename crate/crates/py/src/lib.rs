//! Python bindings. Structured results are returned as plain dicts and lists.

use std::path::PathBuf;
use std::sync::Arc;

use adaptcbf::adaptation::{adapt_run, simulate_fixed, AdaptationConfig, EnsembleScorer, OracleScorer};
use adaptcbf::harness::{self, ConfigError, Scenario, ScenarioConfig};
use adaptcbf::harness::config::model_by_name;
use adaptcbf::iccbf::kcand_feasible;
use adaptcbf::validator::{candidate_features, validate_horizon, ValidationSettings};
use adaptcbf::{
    CandidateBarrier, ClassKParams, EnsembleModel, Error, LowerBound, PdGains, SafetyLoop, StateVec, UpperBound,
};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyAny;
use serde::Serialize;

fn err(e: Error) -> PyErr {
    match e {
        Error::IntegrationBlowup { .. } | Error::NonFinite(_) | Error::NanLoss { .. } | Error::Io { .. } => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn config_err(e: ConfigError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn cli_err(e: harness::CliError) -> PyErr {
    match e.kind {
        harness::ErrorKind::Runtime => PyRuntimeError::new_err(e.message),
        _ => PyValueError::new_err(e.message),
    }
}

/// Round-trip through JSON into native Python objects.
fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn params(v: Vec<f64>) -> PyResult<ClassKParams> {
    ClassKParams::new(v).map_err(err)
}

fn state(v: &[f64]) -> StateVec {
    StateVec::from_column_slice(v)
}

/// A dynamics model, a bound barrier and PD gains; gains of the barrier are
/// supplied per call.
#[pyclass(name = "SafetyLoop", module = "pyadaptcbf")]
struct PySafetyLoop {
    inner: SafetyLoop,
}

#[pymethods]
impl PySafetyLoop {
    /// `kind` is `upper_bound` (`limit - x[index]`) or `lower_bound`.
    #[new]
    #[pyo3(signature = (model, kind, index, limit, kp = 1.0, kd = 1.5))]
    fn new(model: &str, kind: &str, index: usize, limit: f64, kp: f64, kd: f64) -> PyResult<Self> {
        let m = model_by_name(model).map_err(config_err)?;
        if index >= m.state_dim() {
            return Err(PyValueError::new_err(format!(
                "index {index} out of range for a {}-dimensional state",
                m.state_dim()
            )));
        }
        let barrier: Arc<dyn CandidateBarrier> = match kind {
            "upper_bound" => Arc::new(UpperBound { index, limit }),
            "lower_bound" => Arc::new(LowerBound { index, limit }),
            other => return Err(PyValueError::new_err(format!("unknown barrier {other:?}"))),
        };
        let gains = PdGains::new(kp, kd).map_err(err)?;
        Ok(Self {
            inner: SafetyLoop::new(m, barrier, gains),
        })
    }

    #[getter]
    fn state_dim(&self) -> usize {
        self.inner.model.state_dim()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.model.input_dim()
    }

    /// Barrier stack, candidate-set margin and the affine constraint at `x`.
    fn evaluate<'py>(&self, py: Python<'py>, x: Vec<f64>, gains: Vec<f64>) -> PyResult<Bound<'py, PyAny>> {
        let spec = self.inner.spec(&params(gains)?);
        let x = self.check_state(&x)?;
        let eval = spec.evaluate(&x).map_err(err)?;
        let feas = kcand_feasible(&spec, &x).map_err(err)?;
        #[derive(Serialize)]
        struct Out {
            stack: Vec<f64>,
            inner_margin: f64,
            feasible: bool,
            feasibility_margin: f64,
            offset: f64,
            slope: Vec<f64>,
        }
        to_py(
            py,
            &Out {
                inner_margin: eval.stack.inner_margin(),
                stack: eval.stack.values,
                feasible: feas.feasible,
                feasibility_margin: feas.margin,
                offset: eval.constraint.offset,
                slope: eval.constraint.slope.as_slice().to_vec(),
            },
        )
    }

    /// Filtered input at `x` for tracking `goal`.
    fn filter(&self, x: Vec<f64>, gains: Vec<f64>, goal: Vec<f64>) -> PyResult<Vec<f64>> {
        let x = self.check_state(&x)?;
        let goal = self.check_state(&goal)?;
        let d = self.inner.policy(&params(gains)?, &goal).decide(&x).map_err(err)?;
        Ok(d.input.as_slice().to_vec())
    }

    #[pyo3(signature = (x, gains, goal, horizon = 2.0, dt = 0.01, eps = 1e-3))]
    #[allow(clippy::too_many_arguments)]
    fn validate<'py>(
        &self,
        py: Python<'py>,
        x: Vec<f64>,
        gains: Vec<f64>,
        goal: Vec<f64>,
        horizon: f64,
        dt: f64,
        eps: f64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let k = params(gains)?;
        let x = self.check_state(&x)?;
        let goal = self.check_state(&goal)?;
        let settings = ValidationSettings { horizon, dt, eps };
        let report = validate_horizon(&self.inner.spec(&k), &self.inner.policy(&k, &goal), &x, &goal, &settings)
            .map_err(err)?;
        to_py(py, &report)
    }

    /// Fixed-gain closed loop; one dict per sample.
    #[pyo3(signature = (x0, gains, goal, duration, dt = 0.01))]
    fn simulate<'py>(
        &self,
        py: Python<'py>,
        x0: Vec<f64>,
        gains: Vec<f64>,
        goal: Vec<f64>,
        duration: f64,
        dt: f64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let x0 = self.check_state(&x0)?;
        let goal = self.check_state(&goal)?;
        let steps = simulate_fixed(&self.inner, &params(gains)?, &goal, &x0, duration, dt).map_err(err)?;
        to_py(py, &steps)
    }

    /// Adaptive closed loop scored by direct validation (or by `ensemble`).
    /// Returns `(events, steps)`.
    #[pyo3(signature = (x0, gains, goal, duration, seed = 0, ensemble = None))]
    #[allow(clippy::too_many_arguments)]
    fn adapt<'py>(
        &self,
        py: Python<'py>,
        x0: Vec<f64>,
        gains: Vec<f64>,
        goal: Vec<f64>,
        duration: f64,
        seed: u64,
        ensemble: Option<PyRef<'_, PyEnsemble>>,
    ) -> PyResult<(Bound<'py, PyAny>, Bound<'py, PyAny>)> {
        let x0 = self.check_state(&x0)?;
        let goal = self.check_state(&goal)?;
        let cfg = AdaptationConfig {
            seed,
            ..AdaptationConfig::default()
        };
        let k = params(gains)?;
        let log = match &ensemble {
            Some(e) => adapt_run(&self.inner, &k, &EnsembleScorer { model: &e.inner }, &goal, &x0, duration, &cfg),
            None => adapt_run(&self.inner, &k, &OracleScorer, &goal, &x0, duration, &cfg),
        }
        .map_err(err)?;
        Ok((to_py(py, &log.events)?, to_py(py, &log.steps)?))
    }
}

impl PySafetyLoop {
    fn check_state(&self, v: &[f64]) -> PyResult<StateVec> {
        let n = self.inner.model.state_dim();
        if v.len() != n {
            return Err(PyValueError::new_err(format!("expected {n} state entries, got {}", v.len())));
        }
        Ok(state(v))
    }
}

/// A trained ensemble loaded from its JSON file.
#[pyclass(name = "Ensemble", module = "pyadaptcbf")]
struct PyEnsemble {
    inner: EnsembleModel,
}

#[pymethods]
impl PyEnsemble {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: EnsembleModel::load(&path).map_err(err)?,
        })
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.inner.feature_dim()
    }

    /// Raw (unnormalized) features in, per-target moments out.
    fn predict<'py>(&self, py: Python<'py>, features: Vec<f64>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.predict(&features).map_err(err)?)
    }

    /// Features for a candidate: state minus goal, then the gains.
    #[staticmethod]
    fn features(x: Vec<f64>, goal: Vec<f64>, gains: Vec<f64>) -> PyResult<Vec<f64>> {
        if x.len() != goal.len() {
            return Err(PyValueError::new_err("state and goal lengths differ"));
        }
        Ok(candidate_features(&state(&x), &state(&goal), &params(gains)?))
    }
}

/// A TOML scenario with the command-line stages as methods.
#[pyclass(name = "Scenario", module = "pyadaptcbf")]
struct PyScenario {
    inner: Scenario,
}

#[pymethods]
impl PyScenario {
    #[staticmethod]
    #[pyo3(signature = (path, seed = None))]
    fn load(path: PathBuf, seed: Option<u64>) -> PyResult<Self> {
        let scn = ScenarioConfig::load(&path).and_then(ScenarioConfig::resolve).map_err(config_err)?;
        Ok(Self {
            inner: match seed {
                Some(s) => scn.with_seed(s),
                None => scn,
            },
        })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let scn = ScenarioConfig::parse(text).and_then(ScenarioConfig::resolve).map_err(config_err)?;
        Ok(Self { inner: scn })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed()
    }

    fn simulate<'py>(&self, py: Python<'py>, out: PathBuf) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &harness::run_simulate(&self.inner, &out).map_err(cli_err)?)
    }

    /// Returns the number of rows written.
    fn generate_data(&self, out: PathBuf) -> PyResult<usize> {
        Ok(harness::run_generate_data(&self.inner, &out).map_err(cli_err)?.rows.len())
    }

    fn train<'py>(&self, py: Python<'py>, dataset: PathBuf, out: PathBuf) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &harness::run_train(&self.inner, &dataset, &out).map_err(cli_err)?)
    }

    /// `model = None` scores candidates with direct validation.
    #[pyo3(signature = (out, model = None))]
    fn adapt<'py>(&self, py: Python<'py>, out: PathBuf, model: Option<PathBuf>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &harness::run_adapt(&self.inner, model.as_deref(), &out).map_err(cli_err)?)
    }

    #[pyo3(signature = (state = None, gains = None))]
    fn validate_param<'py>(
        &self,
        py: Python<'py>,
        state: Option<Vec<f64>>,
        gains: Option<Vec<f64>>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let report =
            harness::run_validate_param(&self.inner, state.as_deref(), gains.as_deref()).map_err(cli_err)?;
        to_py(py, &report)
    }
}

#[pymodule]
pub fn pyadaptcbf(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySafetyLoop>()?;
    m.add_class::<PyEnsemble>()?;
    m.add_class::<PyScenario>()?;
    Ok(())
}
