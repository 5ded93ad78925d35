//! Python bindings for the core simulation, training and evaluation API.

use longfair::baselines::{fit_baseline, BaselineKind, BaselineSpec};
use longfair::datagen::{generate_synthetic, GenConfig};
use longfair::evaluate::deploy_and_measure;
use longfair::intervene::{effect, Mode};
use longfair::objective::{surrogate, LossWeights};
use longfair::scm::lending_scm;
use longfair::sensitivity::w1_samples_1d;
use longfair::trainer::{rrm_fit, RrmConfig};
use longfair::{DecisionModel, PanelDataset, TimeLaggedScm};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: longfair::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "DecisionModel", module = "longfair_py", from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: DecisionModel,
}

#[pymethods]
impl PyModel {
    #[new]
    fn new(weights: Vec<f64>) -> PyResult<Self> {
        Ok(Self { inner: DecisionModel::new(weights).map_err(err)? })
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.weights.clone()
    }

    fn score(&self, x: Vec<f64>, s: u8) -> PyResult<f64> {
        self.inner.score(&x, s).map_err(err)
    }

    fn decision_prob(&self, x: Vec<f64>, s: u8) -> PyResult<f64> {
        self.inner.decision_prob(&x, s).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("DecisionModel({:?})", self.inner.weights)
    }
}

#[pyclass(name = "Scm", module = "longfair_py", from_py_object)]
#[derive(Clone)]
struct PyScm {
    inner: TimeLaggedScm,
}

#[pymethods]
impl PyScm {
    /// Lending model with Gaussian group inits at -1 and +1.
    #[staticmethod]
    #[pyo3(signature = (truth_weights, horizon, eps=0.5, b0=0.2, b1=1.0))]
    fn lending(truth_weights: Vec<f64>, horizon: usize, eps: f64, b0: f64, b1: f64) -> PyResult<Self> {
        let truth = DecisionModel::new(truth_weights).map_err(err)?;
        let inner = lending_scm(truth.feature_dim(), horizon, eps, b0, b1, truth);
        inner.ensure_valid().map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.horizon
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.inner.feature_dim
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }
}

#[pyclass(name = "Panel", module = "longfair_py", from_py_object)]
#[derive(Clone)]
struct PyPanel {
    inner: PanelDataset,
}

#[pymethods]
impl PyPanel {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn s(&self) -> Vec<u8> {
        self.inner.s.clone()
    }

    #[getter]
    fn x(&self) -> Vec<Vec<Vec<f64>>> {
        self.inner.x.clone()
    }

    #[getter]
    fn y(&self) -> Vec<Vec<i8>> {
        self.inner.y.clone()
    }

    fn label_base_rates(&self) -> Vec<f64> {
        self.inner.label_base_rates()
    }
}

/// Simulates a panel from `scm` with the ground-truth model deployed.
#[pyfunction]
fn generate(scm: &PyScm, n: usize, seed: u64) -> PyResult<PyPanel> {
    let (eps, b0, b1) = match scm.inner.transition {
        longfair::Transition::Feedback { eps, b0, b1 } => (eps, b0, b1),
        _ => return Err(PyValueError::new_err("generate needs the lending transition")),
    };
    let cfg = GenConfig { n_individuals: n, steps: scm.inner.horizon, eps_update: eps, b0, b1, group_means: None, group_covs: None, seed };
    Ok(PyPanel { inner: generate_synthetic(&scm.inner, &cfg).map_err(err)? })
}

/// Long-term effect at the horizon, or short-term effect at step `t`.
#[pyfunction]
#[pyo3(signature = (scm, model, n, seed, t=None))]
fn fairness_effect(scm: &PyScm, model: &PyModel, n: usize, seed: u64, t: Option<usize>) -> PyResult<f64> {
    let mode = t.map_or(Mode::LongTerm, Mode::ShortTerm);
    effect(&scm.inner, &model.inner, mode, n, seed).map_err(err)
}

/// Repeated risk minimization; returns the model and the per-iteration deltas.
#[pyfunction]
#[pyo3(signature = (scm, panel, seed=0, mc_samples=2000, max_outer_iters=50, lambdas=(0.35, 0.45, 0.2)))]
fn train_rrm(
    scm: &PyScm,
    panel: &PyPanel,
    seed: u64,
    mc_samples: usize,
    max_outer_iters: usize,
    lambdas: (f64, f64, f64),
) -> PyResult<(PyModel, Vec<f64>)> {
    let weights = LossWeights { lambda_u: lambdas.0, lambda_l: lambdas.1, lambda_s: lambdas.2, ..LossWeights::default() };
    let cfg = RrmConfig { mc_samples, max_outer_iters, seed, ..RrmConfig::default() };
    let (m, trace) = rrm_fit(&scm.inner, &panel.inner, &weights, &cfg).map_err(err)?;
    Ok((PyModel { inner: m }, trace.deltas()))
}

/// Fits `"LR"`, `"FMDP"` or `"FMEO"` on the pooled panel.
#[pyfunction]
fn train_baseline(panel: &PyPanel, kind: &str) -> PyResult<PyModel> {
    let kind = match kind.to_ascii_uppercase().as_str() {
        "LR" => BaselineKind::Lr,
        "FMDP" => BaselineKind::Fmdp,
        "FMEO" => BaselineKind::Fmeo,
        other => return Err(PyValueError::new_err(format!("unknown baseline {other}"))),
    };
    Ok(PyModel { inner: fit_baseline(&panel.inner, &BaselineSpec::new(kind)).map_err(err)? })
}

/// Per-step accuracy and fairness effects as a dict of lists.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, scm: &PyScm, model: &PyModel, n: usize, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let r = deploy_and_measure(&scm.inner, &model.inner, "model", n, seed).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("accuracy", r.accuracy)?;
    d.set_item("short_term", r.short_term)?;
    d.set_item("long_term", r.long_term)?;
    Ok(d)
}

#[pyfunction]
fn logistic_surrogate(z: f64) -> f64 {
    surrogate(z)
}

#[pyfunction]
fn wasserstein_1d(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(PyValueError::new_err("samples must be nonempty"));
    }
    Ok(w1_samples_1d(&a, &b))
}

#[pymodule]
fn longfair_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyScm>()?;
    m.add_class::<PyPanel>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(fairness_effect, m)?)?;
    m.add_function(wrap_pyfunction!(train_rrm, m)?)?;
    m.add_function(wrap_pyfunction!(train_baseline, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(logistic_surrogate, m)?)?;
    m.add_function(wrap_pyfunction!(wasserstein_1d, m)?)?;
    Ok(())
}
