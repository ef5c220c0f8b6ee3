//! Python bindings: the Laplace memory, the timing environments, and
//! train/eval entry points over experiment configs.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use cogrnn::checkpoint::Checkpoint;
use cogrnn::env::{EnvSpec, TaskSpec};
use cogrnn::experiment::{output_root, run_dir, run_seed, ExperimentConfig};
use cogrnn::laplace::{self, MemoryConfig};
use cogrnn::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config { .. }
        | Error::MemoryConfig(_)
        | Error::EnvSpec(_)
        | Error::TrainConfig(_)
        | Error::Checkpoint(_)
        | Error::Shape { .. }
        | Error::NonFinite(_)
        | Error::InvalidAction { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Laplace-domain memory with a stateful input stream.
#[pyclass(name = "MemoryEngine")]
struct PyMemory {
    engine: laplace::MemoryEngine,
    state: laplace::LaplaceState,
}

#[pymethods]
impl PyMemory {
    #[new]
    #[pyo3(signature = (taustar_min, taustar_max, n_taus, k, input_dim = 1))]
    fn new(taustar_min: f64, taustar_max: f64, n_taus: usize, k: usize, input_dim: usize) -> PyResult<Self> {
        let engine = laplace::build_memory(MemoryConfig {
            taustar_min,
            taustar_max,
            n_taus,
            k,
            input_dim,
            ..MemoryConfig::default()
        })
        .map_err(py_err)?;
        let state = engine.zero_state();
        Ok(Self { engine, state })
    }

    #[getter]
    fn taustars(&self) -> Vec<f64> {
        self.engine.taustars().to_vec()
    }

    #[getter]
    fn n_s(&self) -> usize {
        self.engine.n_s()
    }

    fn reset(&mut self) {
        self.state.reset();
    }

    /// Feed one input vector and return f-tilde, one row per input dimension.
    fn step(&mut self, input: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        self.state.advance(&self.engine, &input).map_err(py_err)?;
        laplace::read_tilde(&self.state, &self.engine).map_err(py_err)
    }

    /// Feed a scalar sequence from a fresh state; returns f-tilde after every step.
    fn run(&mut self, inputs: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        self.state.reset();
        inputs
            .iter()
            .map(|&x| Ok(self.step(vec![x])?.swap_remove(0)))
            .collect()
    }

    /// Laplace state F, one row of n_s values per input dimension.
    fn laplace_state(&self) -> Vec<Vec<f64>> {
        (0..self.state.input_dim()).map(|d| self.state.row(d).to_vec()).collect()
    }
}

/// Closed-form impulse response of a unit with preferred delay `taustar`.
#[pyfunction]
fn impulse_response(taustar: f64, k: usize, t: f64) -> PyResult<f64> {
    laplace::impulse_response_analytic(taustar, k, t).map_err(py_err)
}

/// Gym-style timing task.
#[pyclass(name = "Env")]
struct PyEnv {
    env: cogrnn::env::Env,
}

#[pymethods]
impl PyEnv {
    #[new]
    #[pyo3(signature = (task = "interval_timing", scale = 1.0, seed = 0))]
    fn new(task: &str, scale: f64, seed: u64) -> PyResult<Self> {
        let spec = EnvSpec::new(TaskSpec::from_name(task).map_err(py_err)?, scale, seed);
        Ok(Self {
            env: cogrnn::env::make_env(spec).map_err(py_err)?,
        })
    }

    #[getter]
    fn obs_dim(&self) -> usize {
        self.env.obs_dim()
    }

    #[getter]
    fn n_actions(&self) -> usize {
        self.env.n_actions()
    }

    /// Start a trial; returns (observation, info as JSON).
    fn reset(&mut self) -> PyResult<(Vec<f64>, String)> {
        let r = self.env.reset();
        let info = serde_json::to_string(&r.info).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        Ok((r.observation, info))
    }

    /// Returns (observation, reward, done).
    fn step(&mut self, action: usize) -> PyResult<(Vec<f64>, f64, bool)> {
        let r = self.env.step(action).map_err(py_err)?;
        Ok((r.observation, r.reward, r.done))
    }

    /// Observations of the whole current trial under an all-hold policy.
    fn schedule(&self) -> Vec<Vec<f64>> {
        self.env.schedule_observations()
    }
}

/// Train one seed of a config file; returns the run summary as JSON.
#[pyfunction]
#[pyo3(signature = (config, seed = 0, overrides = Vec::new(), out_dir = None))]
fn train(py: Python<'_>, config: PathBuf, seed: u64, overrides: Vec<String>, out_dir: Option<PathBuf>) -> PyResult<String> {
    let cfg = ExperimentConfig::load(&config, &overrides).map_err(py_err)?;
    let root = out_dir.unwrap_or_else(|| output_root(&cfg));
    let stem = config.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "exp".into());
    let dir = run_dir(&root, &stem, &cfg, seed);
    let summary = py
        .detach(|| run_seed(&cfg, seed, &dir, &mut |_| {}))
        .map_err(py_err)?
        .0;
    serde_json::to_string(&summary).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Greedy accuracy of a checkpointed agent at each scale.
#[pyfunction]
#[pyo3(signature = (checkpoint, scales, n_trials = 500, seed = 12345))]
fn evaluate(py: Python<'_>, checkpoint: PathBuf, scales: Vec<f64>, n_trials: usize, seed: u64) -> PyResult<Vec<(f64, f64)>> {
    let ck = Checkpoint::load(&checkpoint).map_err(py_err)?;
    let agent = ck.agent().map_err(py_err)?;
    let base = EnvSpec {
        seed,
        ..ck.config.env.clone()
    };
    let rows = py
        .detach(|| cogrnn::analysis::cross_scale_eval(&agent, &base, &scales, n_trials))
        .map_err(py_err)?;
    Ok(rows.into_iter().map(|r| (r.scale, r.accuracy)).collect())
}

#[pymodule]
fn cogrnn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMemory>()?;
    m.add_class::<PyEnv>()?;
    m.add_function(wrap_pyfunction!(impulse_response, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
