//! Python bindings: power flow, the volt-var environment, agents, attacks,
//! training and evaluation.

use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use voltgrid::attacks::{perturb, AttackConfig, AttackKind};
use voltgrid::env::{ActionVector, EpisodeConfig, Scenario, VoltVarEnv};
use voltgrid::eval::{evaluate, EvalConfig, EvalMetrics};
use voltgrid::experiment::ExperimentConfig;
use voltgrid::feeder::Feeder;
use voltgrid::grid::{solve_power_flow, Controls, Injections};
use voltgrid::qnet::{greedy_heads, QNetwork};
use voltgrid::trainer::{initial_network, stream_rng, streams, train};

fn to_py(e: voltgrid::Error) -> PyErr {
    match e {
        voltgrid::Error::Io(_) | voltgrid::Error::Diverged { .. } | voltgrid::Error::NonFinite(_) => {
            PyRuntimeError::new_err(e.to_string())
        }
        other => PyValueError::new_err(other.to_string()),
    }
}

fn scenario(feeder: &str) -> PyResult<Arc<Scenario>> {
    let config = ExperimentConfig {
        feeder: feeder.into(),
        ..Default::default()
    };
    config.scenario().map_err(to_py)
}

/// Solves the feeder at `load_scale` × base load with nominal controls.
#[pyfunction]
#[pyo3(signature = (feeder = "builtin:13bus", load_scale = 1.0))]
fn power_flow<'py>(py: Python<'py>, feeder: &str, load_scale: f64) -> PyResult<Bound<'py, PyDict>> {
    let feeder = Feeder::load(feeder).map_err(to_py)?;
    let net = &feeder.network;
    let sol = solve_power_flow(net, &Injections::from_loads(net, load_scale), &Controls::nominal(net))
        .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("converged", sol.converged)?;
    d.set_item("iterations", sol.iterations)?;
    d.set_item("v_mag", sol.v_mag)?;
    d.set_item("v_ang", sol.v_ang)?;
    d.set_item("p_loss_mw", sol.p_loss)?;
    d.set_item("max_mismatch", sol.max_mismatch)?;
    Ok(d)
}

/// Q-network agent.
#[pyclass]
struct Agent {
    net: QNetwork,
}

#[pymethods]
impl Agent {
    /// Untrained network with the desk-scale architecture for `feeder`.
    #[staticmethod]
    #[pyo3(signature = (feeder = "builtin:5bus", seed = 0))]
    fn fresh(feeder: &str, seed: u64) -> PyResult<Self> {
        let sc = scenario(feeder)?;
        let config = voltgrid::trainer::TrainConfig {
            seed,
            ..Default::default()
        };
        Ok(Self {
            net: initial_network(&config, &sc),
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            net: QNetwork::load(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.net.save(path).map_err(to_py)
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    #[getter]
    fn head_sizes(&self) -> Vec<usize> {
        self.net.head_sizes()
    }

    fn q_values(&self, state: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        self.net.forward(&state).map_err(to_py)
    }

    fn greedy(&self, state: Vec<f64>) -> PyResult<Vec<usize>> {
        greedy_heads(&self.net, &state).map_err(to_py)
    }
}

/// One volt-var episode at a time on a single profile.
#[pyclass]
struct Env {
    env: VoltVarEnv,
}

#[pymethods]
impl Env {
    #[new]
    #[pyo3(signature = (feeder = "builtin:5bus"))]
    fn new(feeder: &str) -> PyResult<Self> {
        Ok(Self {
            env: VoltVarEnv::new(scenario(feeder)?),
        })
    }

    #[getter]
    fn state_len(&self) -> usize {
        self.env.layout().len()
    }

    #[getter]
    fn head_sizes(&self) -> Vec<usize> {
        self.env.scenario().head_sizes()
    }

    /// True on the state entries an attack may perturb.
    #[getter]
    fn voltage_mask(&self) -> Vec<bool> {
        self.env.layout().voltage_mask()
    }

    /// Neutral action: taps and inverters centered, capacitors off, battery idle.
    fn neutral_action(&self) -> Vec<usize> {
        ActionVector::neutral(&self.env.scenario().feeder.devices).to_heads()
    }

    #[pyo3(signature = (profile = 0, seed = 0))]
    fn reset(&mut self, profile: usize, seed: u64) -> PyResult<Vec<f64>> {
        Ok(self.env.reset(&EpisodeConfig::new(profile, seed)).map_err(to_py)?.0)
    }

    /// Returns `(state, reward, done, info)`.
    fn step<'py>(
        &mut self,
        py: Python<'py>,
        action: Vec<usize>,
    ) -> PyResult<(Vec<f64>, f64, bool, Bound<'py, PyDict>)> {
        let action = ActionVector::from_heads(&action, &self.env.scenario().feeder.devices).map_err(to_py)?;
        let out = self.env.step(&action).map_err(to_py)?;
        let info = PyDict::new(py);
        info.set_item("t", out.info.t)?;
        info.set_item("converged", out.info.converged)?;
        info.set_item("violations", out.info.violations)?;
        info.set_item("v_mag", out.info.v_mag)?;
        info.set_item("p_loss_mw", out.info.p_loss_mw)?;
        info.set_item("switches", out.info.switches)?;
        info.set_item("f_volt", out.reward.f_volt)?;
        info.set_item("f_ctrl", out.reward.f_ctrl)?;
        info.set_item("f_power", out.reward.f_power)?;
        Ok((out.state.0, out.reward.total, out.done, info))
    }
}

fn parse_kind(kind: &str) -> PyResult<AttackKind> {
    kind.parse().map_err(to_py)
}

/// Perturbs the voltage entries of `state` against `agent`.
#[pyfunction]
#[pyo3(signature = (agent, state, kind = "pgd", feeder = "builtin:5bus", delta = 0.1, alpha = 0.0125, steps = 20, random_start = true, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn attack<'py>(
    py: Python<'py>,
    agent: &Agent,
    state: Vec<f64>,
    kind: &str,
    feeder: &str,
    delta: f64,
    alpha: f64,
    steps: usize,
    random_start: bool,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let sc = scenario(feeder)?;
    let config = AttackConfig {
        delta,
        alpha,
        steps,
        random_start,
        ..Default::default()
    }
    .with_scope(sc.layout().voltage_mask());
    let out = perturb(parse_kind(kind)?, &agent.net, &state, &config, &mut stream_rng(seed, streams::ATTACK_NOISE)).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("s_adv", out.s_adv.0)?;
    d.set_item("eta", out.eta)?;
    d.set_item("linf", out.meta.linf)?;
    d.set_item("at_max", out.meta.at_max_count)?;
    d.set_item("perturbed", out.meta.perturbed_count)?;
    Ok(d)
}

fn metrics_dict<'py>(py: Python<'py>, m: &EvalMetrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("mean_reward", m.mean_reward)?;
    d.set_item("q_value_reduction", m.q_value_reduction)?;
    d.set_item("total_voltage_violations", m.total_voltage_violations)?;
    d.set_item("violations_per_timestep", m.violations_per_timestep)?;
    d.set_item("pct_at_max_delta", m.pct_at_max_delta)?;
    d.set_item("switches_per_timestep", m.switches_per_timestep)?;
    d.set_item("episodes", m.episodes)?;
    Ok(d)
}

/// Greedy rollouts on the test profiles, optionally under attack.
#[pyfunction]
#[pyo3(signature = (agent, attack = "none", feeder = "builtin:5bus", episodes = 50, seed = 0, workers = 1))]
fn evaluate_agent<'py>(
    py: Python<'py>,
    agent: &Agent,
    attack: &str,
    feeder: &str,
    episodes: usize,
    seed: u64,
    workers: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let sc = scenario(feeder)?;
    let config = EvalConfig {
        episodes,
        seed,
        attack_kind: parse_kind(attack)?,
        workers,
        ..Default::default()
    };
    let net = agent.net.clone();
    let report = py.detach(|| evaluate(&net, &sc, &config)).map_err(to_py)?;
    metrics_dict(py, &report.metrics)
}

/// Trains from an experiment config (JSON text); returns the agent and the
/// training curve as CSV text.
#[pyfunction]
#[pyo3(signature = (config_json = "{}"))]
fn train_agent(py: Python<'_>, config_json: &str) -> PyResult<(Agent, String)> {
    let config = ExperimentConfig::from_json(config_json).map_err(to_py)?;
    let sc = config.scenario().map_err(to_py)?;
    let out = py.detach(|| train(&config.train, sc)).map_err(to_py)?;
    Ok((Agent { net: out.net }, out.log.to_csv()))
}

#[pymodule]
fn voltgrid_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(power_flow, m)?)?;
    m.add_function(wrap_pyfunction!(attack, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_agent, m)?)?;
    m.add_function(wrap_pyfunction!(train_agent, m)?)?;
    m.add_class::<Agent>()?;
    m.add_class::<Env>()?;
    Ok(())
}
