//! Python bindings: barrier functions, the dual and shaping rules,
//! environments, training runs, checkpoint evaluation and the bound bench.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use csaclb_core::algos::{rs_shape, saclag_beta_update, RsConfig, SacLagState};
use csaclb_core::barrier::{self, BarrierConfig};
use csaclb_core::envs::{self as core_envs, EnvKind};
use csaclb_core::harness::{self, Checkpoint};
use csaclb_core::optbench::{run_bench, ProblemSelection};
use csaclb_core::rng::{substream, Rng, Stream};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn config(mu: f64, cost_limit: f64) -> PyResult<BarrierConfig> {
    BarrierConfig::new(mu, cost_limit).map_err(value_err)
}

#[pyfunction]
fn smoothed_log_barrier(x: f64, mu: f64) -> f64 {
    barrier::smoothed_log_barrier(x, mu)
}

#[pyfunction]
#[pyo3(signature = (x, mu, cost_limit = 0.0))]
fn shifted_barrier(x: f64, mu: f64, cost_limit: f64) -> PyResult<f64> {
    Ok(config(mu, cost_limit)?.value(x))
}

#[pyfunction]
#[pyo3(signature = (x, mu, cost_limit = 0.0))]
fn shifted_barrier_grad(x: f64, mu: f64, cost_limit: f64) -> PyResult<f64> {
    Ok(config(mu, cost_limit)?.grad(x))
}

#[pyfunction]
fn performance_bound(mu: f64, m: usize) -> PyResult<f64> {
    barrier::performance_bound(mu, m).map_err(value_err)
}

/// One projected multiplier step; returns the new multiplier.
#[pyfunction]
fn beta_update(beta: f64, lr: f64, mean_qc: f64, cost_limit: f64) -> f64 {
    saclag_beta_update(SacLagState { beta, beta_lr: lr }, mean_qc, cost_limit).beta
}

#[pyfunction]
#[pyo3(signature = (reward, cost, done, penalty = -30.0))]
fn shape_reward(reward: f64, cost: f64, done: bool, penalty: f64) -> (f64, bool) {
    rs_shape(reward, cost, done, &RsConfig { penalty })
}

/// Run the bound bench; one dict per (problem, mu) cell.
#[pyfunction]
#[pyo3(signature = (mus, problem = "all"))]
fn bench_bound<'py>(py: Python<'py>, mus: Vec<f64>, problem: &str) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let sel: ProblemSelection = problem.parse().map_err(value_err)?;
    let rows = run_bench(&sel.problems(), &mus).map_err(value_err)?;
    rows.into_iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("problem", r.problem)?;
            d.set_item("mu", r.mu)?;
            d.set_item("m", r.m)?;
            d.set_item("x_tilde", r.x_tilde)?;
            d.set_item("gap", r.gap)?;
            d.set_item("bound", r.bound)?;
            d.set_item("kkt_residual", r.kkt_residual)?;
            d.set_item("ok", r.ok)?;
            Ok(d)
        })
        .collect()
}

/// Train from a JSON config; returns `(log_csv, checkpoint_json)`.
#[pyfunction]
fn train(py: Python<'_>, config_json: &str) -> PyResult<(String, String)> {
    let cfg = harness::parse_config(config_json).map_err(value_err)?;
    let run = py.detach(|| harness::train(&cfg)).map_err(value_err)?;
    Ok((run.csv(), run.checkpoint().to_json()))
}

/// Evaluate a checkpoint; returns a dict of return and cost statistics.
#[pyfunction]
#[pyo3(signature = (checkpoint_json, env, episodes, seed = 0))]
fn evaluate<'py>(
    py: Python<'py>,
    checkpoint_json: &str,
    env: &str,
    episodes: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let ck = Checkpoint::from_json(checkpoint_json).map_err(value_err)?;
    let kind: EnvKind = env.parse().map_err(value_err)?;
    let s = harness::evaluate_checkpoint(&ck, kind, episodes.max(1), seed).map_err(value_err)?;
    let d = PyDict::new(py);
    d.set_item("return_mean", s.return_mean)?;
    d.set_item("return_std", s.return_std)?;
    d.set_item("cost_mean", s.cost_mean)?;
    d.set_item("cost_std", s.cost_std)?;
    Ok(d)
}

/// A control task acting in normalised units `(-1, 1)^k`.
#[pyclass(unsendable)]
struct Env {
    inner: Box<dyn core_envs::Env>,
    rng: Rng,
}

#[pymethods]
impl Env {
    #[new]
    #[pyo3(signature = (name, seed = 0))]
    fn new(name: &str, seed: u64) -> PyResult<Self> {
        let kind: EnvKind = name.parse().map_err(value_err)?;
        Ok(Self {
            inner: kind.make(),
            rng: substream(seed, Stream::EnvInit),
        })
    }

    #[getter]
    fn obs_dim(&self) -> usize {
        self.inner.obs_dim()
    }

    #[getter]
    fn act_dim(&self) -> usize {
        self.inner.act_dim()
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.horizon()
    }

    fn reset(&mut self) -> Vec<f64> {
        self.inner.reset(&mut self.rng)
    }

    /// Returns `(obs, reward, cost, done)`.
    fn step(&mut self, action: Vec<f64>) -> PyResult<(Vec<f64>, f64, f64, bool)> {
        let r = self.inner.step(&action).map_err(value_err)?;
        Ok((r.obs, r.reward, r.cost, r.done))
    }
}

#[pymodule]
fn csaclb(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(smoothed_log_barrier, m)?)?;
    m.add_function(wrap_pyfunction!(shifted_barrier, m)?)?;
    m.add_function(wrap_pyfunction!(shifted_barrier_grad, m)?)?;
    m.add_function(wrap_pyfunction!(performance_bound, m)?)?;
    m.add_function(wrap_pyfunction!(beta_update, m)?)?;
    m.add_function(wrap_pyfunction!(shape_reward, m)?)?;
    m.add_function(wrap_pyfunction!(bench_bound, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_class::<Env>()?;
    Ok(())
}
