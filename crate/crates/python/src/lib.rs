//! Python bindings: MDPs, regularizers, solvers, scheme runs and bound checks.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use regmdp::analysis::BoundKind;
use regmdp::bellman::{optimal_value, policy_value, EvalContext};
use regmdp::experiment::{check_trace, run_experiment, ExperimentConfig, SavedTrace};
use regmdp::extensions::{gradient_check, irl_round_trip, random_logits, temporal_consistency_residual};
use regmdp::mdp::{generate_garnet, parse_mdp, serialize_mdp, GarnetParams, Policy};
use regmdp::regularizer::{simplex_project, PolicyRegularizer, RegularizerKind, SimplexRegularizer};
use regmdp::schemes::{run_scheme, SchemeConfig};
use regmdp::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(msg) => PyIOError::new_err(msg),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn policy_from_rows(rows: Vec<Vec<f64>>) -> PyResult<Policy> {
    Policy::try_from(rows).map_err(py_err)
}

#[pyclass(name = "TabularMdp", module = "regmdp", frozen)]
struct PyMdp {
    inner: regmdp::mdp::TabularMdp,
}

#[pymethods]
impl PyMdp {
    /// `transitions[s][a][s']`, `rewards[s][a]`.
    #[new]
    fn new(transitions: Vec<Vec<Vec<f64>>>, rewards: Vec<Vec<f64>>, gamma: f64) -> PyResult<Self> {
        let ns = transitions.len();
        let na = rewards.first().map_or(0, Vec::len);
        let flat_p: Vec<f64> = transitions.into_iter().flatten().flatten().collect();
        let flat_r: Vec<f64> = rewards.into_iter().flatten().collect();
        let inner = regmdp::mdp::TabularMdp::new(ns, na, flat_p, flat_r, gamma).map_err(py_err)?;
        Ok(PyMdp { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (n_states, n_actions, branching, reward_sparsity, seed, gamma = 0.9))]
    fn garnet(
        n_states: usize,
        n_actions: usize,
        branching: usize,
        reward_sparsity: f64,
        seed: u64,
        gamma: f64,
    ) -> PyResult<Self> {
        let params = GarnetParams::new(n_states, n_actions, branching, reward_sparsity).gamma(gamma);
        Ok(PyMdp {
            inner: generate_garnet(&params, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyMdp {
            inner: parse_mdp(text).map_err(py_err)?,
        })
    }

    fn to_json(&self) -> String {
        serialize_mdp(&self.inner)
    }

    #[getter]
    fn n_states(&self) -> usize {
        self.inner.n_states()
    }

    #[getter]
    fn n_actions(&self) -> usize {
        self.inner.n_actions()
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.inner.gamma()
    }

    fn __repr__(&self) -> String {
        format!(
            "TabularMdp(n_states={}, n_actions={}, gamma={})",
            self.inner.n_states(),
            self.inner.n_actions(),
            self.inner.gamma()
        )
    }
}

#[pyclass(name = "Regularizer", module = "regmdp", frozen)]
struct PyRegularizer {
    inner: regmdp::regularizer::Regularizer,
}

fn parse_kind(kind: &str) -> PyResult<RegularizerKind> {
    match kind {
        "entropy" | "negative_entropy" => Ok(RegularizerKind::NegativeEntropy),
        "kl_uniform" => Ok(RegularizerKind::KlUniform),
        "tsallis" | "quadratic" => Ok(RegularizerKind::Tsallis),
        other => Err(PyValueError::new_err(format!("unknown regularizer `{other}`"))),
    }
}

#[pymethods]
impl PyRegularizer {
    #[new]
    #[pyo3(signature = (kind = "entropy", scale = 1.0))]
    fn new(kind: &str, scale: f64) -> PyResult<Self> {
        let inner = regmdp::regularizer::Regularizer::new(parse_kind(kind)?, scale).map_err(py_err)?;
        Ok(PyRegularizer { inner })
    }

    #[getter]
    fn scale(&self) -> f64 {
        self.inner.scale
    }

    fn value(&self, p: Vec<f64>) -> PyResult<f64> {
        self.inner.value(&p).map_err(py_err)
    }

    fn conjugate(&self, q: Vec<f64>) -> PyResult<f64> {
        self.inner.conjugate(&q).map_err(py_err)
    }

    fn greedy(&self, q: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.inner.greedy(&q).map_err(py_err)?.into_vec())
    }

    fn gradient(&self, p: Vec<f64>) -> Vec<f64> {
        self.inner.gradient(&p)
    }

    /// `(L, U)` with `L <= Omega <= U` on the simplex of `n_actions` actions.
    fn bounds(&self, n_actions: usize) -> (f64, f64) {
        self.inner.bounds(n_actions)
    }

    fn __repr__(&self) -> String {
        format!("Regularizer({:?}, scale={})", self.inner.kind, self.inner.scale)
    }
}

/// Regularized optimal value and policy.
#[pyfunction]
#[pyo3(signature = (mdp, reg, tol = 1e-10))]
fn solve(mdp: &PyMdp, reg: &PyRegularizer, tol: f64) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
    let ctx = EvalContext::new(&mdp.inner, reg.inner).map_err(py_err)?;
    let (v, pi) = optimal_value(&ctx, tol).map_err(py_err)?;
    Ok((v.0, pi.into()))
}

/// Exact regularized value of a policy given as rows.
#[pyfunction]
fn evaluate(mdp: &PyMdp, reg: &PyRegularizer, policy: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    let pi = policy_from_rows(policy)?;
    let ctx = EvalContext::new(&mdp.inner, reg.inner).map_err(py_err)?;
    Ok(policy_value(&ctx, &pi).map_err(py_err)?.0)
}

#[pyfunction]
fn consistency_residual(mdp: &PyMdp, reg: &PyRegularizer, v: Vec<f64>, policy: Vec<Vec<f64>>) -> PyResult<f64> {
    let pi = policy_from_rows(policy)?;
    temporal_consistency_residual(&mdp.inner, &PolicyRegularizer::Fixed(reg.inner), &v, &pi).map_err(py_err)
}

#[pyfunction]
fn project_simplex(z: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(simplex_project(&z).map_err(py_err)?.into_vec())
}

/// Runs a scheme from its JSON config; returns the saved trace as JSON.
#[pyfunction]
fn run(mdp: &PyMdp, config_json: &str) -> PyResult<String> {
    let cfg: SchemeConfig = serde_json_from_str(config_json)?;
    let trace = run_scheme(&mdp.inner, &cfg).map_err(py_err)?;
    let kinds = BoundKind::defaults(cfg.scheme, cfg.error.is_exact());
    Ok(SavedTrace::new(&mdp.inner, kinds, trace).to_json())
}

fn serde_json_from_str<T: for<'de> serde::Deserialize<'de>>(text: &str) -> PyResult<T> {
    serde_json::from_str(text).map_err(|e| py_err(e.into()))
}

/// Re-evaluates the bound reports of a saved trace; returns `(passed, report_json)`.
#[pyfunction]
fn check_bounds(trace_json: &str) -> PyResult<(bool, String)> {
    let saved = SavedTrace::from_json(trace_json).map_err(py_err)?;
    let mdp = saved.mdp().map_err(py_err)?;
    let check = check_trace(&mdp, &saved.trace, &saved.bounds).map_err(py_err)?;
    Ok((check.passed(), check.to_json()))
}

/// Runs an experiment config (JSON text) into `out`; true iff every bound holds.
#[pyfunction]
#[pyo3(signature = (config_json, out, jobs = 1))]
fn run_experiment_json(py: Python<'_>, config_json: &str, out: PathBuf, jobs: usize) -> PyResult<bool> {
    let cfg = ExperimentConfig::from_json(config_json).map_err(py_err)?;
    let outcome = py.detach(|| run_experiment(&cfg, &out, jobs)).map_err(py_err)?;
    Ok(outcome.passed())
}

/// Largest relative error between the policy gradient and finite differences at random logits.
#[pyfunction]
#[pyo3(signature = (mdp, reg, theta_seed = 0, step = 1e-5))]
fn gradcheck(mdp: &PyMdp, reg: &PyRegularizer, theta_seed: u64, step: f64) -> PyResult<f64> {
    let m = &mdp.inner;
    let theta = random_logits(m.n_states(), m.n_actions(), theta_seed);
    let nu = vec![1.0 / m.n_states() as f64; m.n_states()];
    Ok(gradient_check(m, &reg.inner, &theta, &nu, step).map_err(py_err)?.max_relative_error)
}

/// Recovered reward and the round-trip policy distance.
#[pyfunction]
#[pyo3(signature = (mdp, reg, tol = 1e-12))]
fn irl(mdp: &PyMdp, reg: &PyRegularizer, tol: f64) -> PyResult<(Vec<f64>, f64)> {
    let trip = irl_round_trip(&mdp.inner, &reg.inner, tol).map_err(py_err)?;
    Ok((trip.recovered.reward, trip.max_tv))
}

#[pymodule(name = "regmdp")]
fn regmdp_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMdp>()?;
    m.add_class::<PyRegularizer>()?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(consistency_residual, m)?)?;
    m.add_function(wrap_pyfunction!(project_simplex, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(check_bounds, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment_json, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(irl, m)?)?;
    Ok(())
}
