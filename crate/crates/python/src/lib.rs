//! Python bindings for the `asyncmis` correction math and simulator.

use asyncmis::experiment::{self, ThresholdBlock};
use asyncmis::policy::{self, TaskConfig};
use asyncmis::sim::compute_advantages as core_advantages;
use asyncmis::sim::AdvantageMode;
use asyncmis::{ewma, proxy, ratio};
use asyncmis::{MisConfig, ProxyForm, SimConfig, SyntheticTask, TokenSample, Variant};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde_json::Value;

create_exception!(asyncmis, AsyncMisError, PyException);

fn to_py_err(e: asyncmis::Error) -> PyErr {
    if e.is_config_error() {
        PyValueError::new_err(e.to_string())
    } else {
        AsyncMisError::new_err(e.to_string())
    }
}

fn json_to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                i.into_pyobject(py)?.into_any()
            } else if let Some(u) = n.as_u64() {
                u.into_pyobject(py)?.into_any()
            } else {
                n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any()
            }
        }
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(xs) => {
            let items = xs.iter().map(|x| json_to_py(py, x)).collect::<PyResult<Vec<_>>>()?;
            PyList::new(py, items)?.into_any()
        }
        Value::Object(map) => {
            let d = PyDict::new(py);
            for (k, x) in map {
                d.set_item(k, json_to_py(py, x)?)?;
            }
            d.into_any()
        }
    })
}

fn serialize<'py, T: serde::Serialize>(py: Python<'py>, x: &T) -> PyResult<Bound<'py, PyAny>> {
    let v = serde_json::to_value(x).map_err(|e| AsyncMisError::new_err(e.to_string()))?;
    json_to_py(py, &v)
}

fn parse_form(form: &str) -> PyResult<ProxyForm> {
    match form {
        "arithmetic" | "linear" => Ok(ProxyForm::Arithmetic),
        "log_linear" | "loglinear" => Ok(ProxyForm::LogLinear),
        _ => Err(PyValueError::new_err(format!("unknown proxy form `{form}`"))),
    }
}

/// Tabular softmax policy parameters, row-major `[num_contexts, vocab_size]`.
#[pyclass(name = "PolicyParams", module = "asyncmis", skip_from_py_object)]
#[derive(Clone)]
struct PyPolicyParams {
    inner: policy::PolicyParams,
}

#[pymethods]
impl PyPolicyParams {
    #[new]
    #[pyo3(signature = (num_contexts, vocab_size, weights=None))]
    fn new(num_contexts: usize, vocab_size: usize, weights: Option<Vec<f64>>) -> PyResult<Self> {
        let inner = match weights {
            Some(w) => policy::PolicyParams::from_weights(num_contexts, vocab_size, w).map_err(to_py_err)?,
            None => policy::PolicyParams::zeros(num_contexts, vocab_size),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn random(num_contexts: usize, vocab_size: usize, scale: f64, seed: u64) -> Self {
        Self {
            inner: policy::PolicyParams::random(num_contexts, vocab_size, scale, seed),
        }
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        self.inner.shape()
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.weights().to_vec()
    }

    fn log_probs(&self, context: usize) -> PyResult<Vec<f64>> {
        policy::log_probs_train(&self.inner, context).map_err(to_py_err)
    }

    fn logprob(&self, context: usize, token: usize) -> PyResult<f64> {
        policy::logprob_train(&self.inner, context, token).map_err(to_py_err)
    }

    fn grad_logprob(&self, context: usize, token: usize) -> PyResult<Vec<f64>> {
        policy::grad_logprob(&self.inner, context, token).map_err(to_py_err)
    }

    fn __repr__(&self) -> String {
        let (c, v) = self.inner.shape();
        format!("PolicyParams(num_contexts={c}, vocab_size={v})")
    }
}

/// EWMA proximal reference over parameter snapshots.
#[pyclass(name = "EwmaState", module = "asyncmis")]
struct PyEwmaState {
    inner: ewma::EwmaState,
}

#[pymethods]
impl PyEwmaState {
    #[new]
    #[pyo3(signature = (theta0, beta=0.75, reset_threshold=0.9))]
    fn new(theta0: &PyPolicyParams, beta: f64, reset_threshold: f64) -> PyResult<Self> {
        let inner = ewma::EwmaState::new(&theta0.inner, beta, reset_threshold).map_err(to_py_err)?;
        Ok(Self { inner })
    }

    fn update(&mut self, theta: &PyPolicyParams) -> PyResult<()> {
        self.inner.update(&theta.inner).map_err(to_py_err)
    }

    /// Returns whether the reference was reset to `theta`.
    fn maybe_reset(&mut self, rho: f64, theta: &PyPolicyParams) -> PyResult<bool> {
        self.inner.maybe_reset(rho, &theta.inner).map_err(to_py_err)
    }

    #[getter]
    fn theta_prox(&self) -> PyPolicyParams {
        PyPolicyParams {
            inner: self.inner.theta_prox().clone(),
        }
    }

    #[getter]
    fn cum_weight(&self) -> f64 {
        self.inner.cum_weight()
    }

    #[getter]
    fn beta(&self) -> f64 {
        self.inner.beta()
    }

    #[getter]
    fn step(&self) -> u64 {
        self.inner.step()
    }

    #[getter]
    fn reset_count(&self) -> u64 {
        self.inner.reset_count()
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(to_py_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ewma::EwmaState::load(path).map_err(to_py_err)?,
        })
    }
}

/// Returns `(r_total, r_s, r_d)`.
#[pyfunction]
fn ratio_decompose(logp_cur: f64, logp_old_train: f64, logp_old_infer: f64) -> PyResult<(f64, f64, f64)> {
    let t = ratio::ratio_decompose(logp_cur, logp_old_train, logp_old_infer).map_err(to_py_err)?;
    Ok((t.r_total, t.r_s, t.r_d))
}

#[pyfunction]
fn ppo_clip_surrogate(r: f64, advantage: f64, clip_low: f64, clip_high: f64) -> PyResult<f64> {
    ratio::ppo_clip_surrogate(r, advantage, clip_low, clip_high).map_err(to_py_err)
}

#[pyfunction]
fn ppo_active_mask(r: f64, advantage: f64, clip_low: f64, clip_high: f64) -> PyResult<bool> {
    ratio::ppo_active_mask(r, advantage, clip_low, clip_high).map_err(to_py_err)
}

/// Names of the eight correction variants.
#[pyfunction]
fn variants() -> Vec<&'static str> {
    Variant::ALL.iter().map(|v| v.name()).collect()
}

/// Evaluates one token; `mis_config` is a TOML table matching `MisConfig`.
#[pyfunction]
#[pyo3(signature = (mis_config, logp_cur, logp_infer_old, advantage, logp_train_old=None, logp_prox=None, rollout_version=0))]
#[allow(clippy::too_many_arguments)]
fn mis_weight<'py>(
    py: Python<'py>,
    mis_config: &str,
    logp_cur: f64,
    logp_infer_old: f64,
    advantage: f64,
    logp_train_old: Option<f64>,
    logp_prox: Option<f64>,
    rollout_version: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg: MisConfig = toml::from_str(mis_config).map_err(|e| PyValueError::new_err(e.to_string()))?;
    cfg.validate().map_err(to_py_err)?;
    let sample = TokenSample {
        context: 0,
        token: 0,
        rollout_version,
        logp_infer_old,
        logp_train_old,
        advantage,
        position: 0,
    };
    let out = ratio::mis_weight(&sample, logp_cur, logp_prox, &cfg).map_err(to_py_err)?;
    let d = PyDict::new(py);
    d.set_item("active", out.active)?;
    d.set_item("weight", out.weight)?;
    d.set_item("r1", out.r1)?;
    d.set_item("r2", out.r2)?;
    d.set_item("clip_active", out.clip_active)?;
    d.set_item("mask_active", out.mask_active)?;
    Ok(d)
}

#[pyfunction]
fn alpha_from_gap(n: u64) -> PyResult<f64> {
    proxy::alpha_from_gap(n).map_err(to_py_err)
}

#[pyfunction]
fn linear_prox(p_old_infer: f64, p_cur: f64, alpha: f64) -> PyResult<f64> {
    proxy::linear_prox(p_old_infer, p_cur, alpha).map_err(to_py_err)
}

#[pyfunction]
fn loglinear_prox(logp_old_infer: f64, logp_cur: f64, alpha: f64) -> PyResult<f64> {
    proxy::loglinear_prox(logp_old_infer, logp_cur, alpha).map_err(to_py_err)
}

/// Bounds on the total ratio equivalent to the decomposed mask and clip.
///
/// `mask` and `clip` are ratio intervals such as `(0.8, 1.2)`.
#[pyfunction]
fn effective_bounds<'py>(
    py: Python<'py>,
    form: &str,
    mask: (f64, f64),
    clip: (f64, f64),
    alpha: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let b = proxy::effective_bounds(parse_form(form)?, mask, clip.0, clip.1, alpha).map_err(to_py_err)?;
    serialize(py, &b)
}

#[pyfunction]
fn ewma_center_of_mass(beta: f64) -> PyResult<f64> {
    ewma::ewma_center_of_mass(beta).map_err(to_py_err)
}

#[pyfunction]
fn staleness_decay(window: f64) -> PyResult<f64> {
    ewma::staleness_decay(window).map_err(to_py_err)
}

#[pyfunction]
#[pyo3(signature = (rewards, group_size, normalize=true))]
fn compute_advantages(rewards: Vec<f64>, group_size: usize, normalize: bool) -> PyResult<Vec<f64>> {
    let mode = if normalize {
        AdvantageMode::GroupNormalized
    } else {
        AdvantageMode::MeanCentered
    };
    core_advantages(&rewards, group_size, mode).map_err(to_py_err)
}

/// Effective-bound table rows; `blocks` is a list of `((mask_lo, mask_hi), (clip_lo, clip_hi))`.
#[pyfunction]
#[pyo3(signature = (blocks=None, gaps=vec![1, 2, 3]))]
fn table4<'py>(
    py: Python<'py>,
    blocks: Option<Vec<((f64, f64), (f64, f64))>>,
    gaps: Vec<u64>,
) -> PyResult<Bound<'py, PyAny>> {
    let blocks: Vec<ThresholdBlock> = match blocks {
        Some(bs) => bs.into_iter().map(|(mask, clip)| ThresholdBlock { mask, clip }).collect(),
        None => experiment::DEFAULT_BLOCKS.to_vec(),
    };
    let rows = experiment::table4(&blocks, &gaps).map_err(to_py_err)?;
    serialize(py, &rows)
}

/// Default simulator configuration as TOML.
#[pyfunction]
fn default_sim_config() -> PyResult<String> {
    toml::to_string(&SimConfig::default()).map_err(|e| AsyncMisError::new_err(e.to_string()))
}

/// Runs the simulator and returns `{"metrics": [...], "summary": {...}}`.
///
/// `config` and `task` are TOML documents; an omitted task uses the default.
#[pyfunction]
#[pyo3(signature = (config="", task=None))]
fn run_simulation<'py>(py: Python<'py>, config: &str, task: Option<&str>) -> PyResult<Bound<'py, PyDict>> {
    let cfg: SimConfig = toml::from_str(config).map_err(|e| PyValueError::new_err(e.to_string()))?;
    cfg.validate().map_err(to_py_err)?;
    let task = match task {
        Some(t) => SyntheticTask::from_toml_str(t),
        None => SyntheticTask::new(TaskConfig::default()),
    }
    .map_err(to_py_err)?;
    let out = py
        .detach(|| asyncmis::run_simulation(&cfg, &task))
        .map_err(to_py_err)?;
    let d = PyDict::new(py);
    d.set_item("metrics", serialize(py, &out.metrics)?)?;
    d.set_item("summary", serialize(py, &out.summary)?)?;
    d.set_item(
        "final_params",
        PyPolicyParams {
            inner: out.final_params.params.clone(),
        },
    )?;
    Ok(d)
}

#[pymodule]
#[pyo3(name = "asyncmis")]
fn asyncmis_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("AsyncMisError", m.py().get_type::<AsyncMisError>())?;
    m.add("REL_TOL", ratio::REL_TOL)?;
    m.add_class::<PyPolicyParams>()?;
    m.add_class::<PyEwmaState>()?;
    m.add_function(wrap_pyfunction!(ratio_decompose, m)?)?;
    m.add_function(wrap_pyfunction!(ppo_clip_surrogate, m)?)?;
    m.add_function(wrap_pyfunction!(ppo_active_mask, m)?)?;
    m.add_function(wrap_pyfunction!(variants, m)?)?;
    m.add_function(wrap_pyfunction!(mis_weight, m)?)?;
    m.add_function(wrap_pyfunction!(alpha_from_gap, m)?)?;
    m.add_function(wrap_pyfunction!(linear_prox, m)?)?;
    m.add_function(wrap_pyfunction!(loglinear_prox, m)?)?;
    m.add_function(wrap_pyfunction!(effective_bounds, m)?)?;
    m.add_function(wrap_pyfunction!(ewma_center_of_mass, m)?)?;
    m.add_function(wrap_pyfunction!(staleness_decay, m)?)?;
    m.add_function(wrap_pyfunction!(compute_advantages, m)?)?;
    m.add_function(wrap_pyfunction!(table4, m)?)?;
    m.add_function(wrap_pyfunction!(default_sim_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_simulation, m)?)?;
    Ok(())
}
