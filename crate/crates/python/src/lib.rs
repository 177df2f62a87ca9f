//! Python bindings: graphs, agents, networks, steady states, simulation,
//! estimators and the scenario runner.

use std::path::PathBuf;

use nalgebra::DVector;
use passnet::cli::{parse_config, parse_scenario, run_command, Command, Overrides, Scenario, CASE_STUDY};
use passnet::relations::{gradient_at, SolverOptions};
use passnet::simulation::{closed_loop_experiment, integrate_network, stable_dt, SimParams};
use passnet::synthesis::{
    algorithm1_from_pairs, algorithm3_iterate, compute_m, estimate_mi_chain, MMode, SteadyStatePair, SteadyStateSource,
};
use passnet::systems::{ControlAffineAgent, LtiAgent, StaticController};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

create_exception!(passnet, PassnetError, PyException);

fn py_err(e: passnet::Error) -> PyErr {
    PassnetError::new_err(format!("{}: {e}", e.kind()))
}

fn vec(v: Vec<f64>) -> DVector<f64> {
    DVector::from_vec(v)
}

fn pairs(raw: Vec<(f64, f64)>) -> Vec<SteadyStatePair> {
    raw.into_iter().map(|(u, y)| SteadyStatePair::new(u, y)).collect()
}

/// Undirected graph on vertices `0..n`.
#[pyclass(name = "Graph", frozen, from_py_object)]
#[derive(Clone)]
struct PyGraph(passnet::UndirectedGraph);

#[pymethods]
impl PyGraph {
    #[new]
    fn new(n: usize, edges: Vec<(usize, usize)>) -> PyResult<Self> {
        passnet::UndirectedGraph::new(n, edges).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn path(n: usize) -> PyResult<Self> {
        passnet::UndirectedGraph::path(n).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn cycle(n: usize) -> PyResult<Self> {
        passnet::UndirectedGraph::cycle(n).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn complete(n: usize) -> PyResult<Self> {
        passnet::UndirectedGraph::complete(n).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn star(n: usize) -> PyResult<Self> {
        passnet::UndirectedGraph::star(n).map(Self).map_err(py_err)
    }

    #[getter]
    fn num_vertices(&self) -> usize {
        self.0.num_vertices()
    }

    #[getter]
    fn num_edges(&self) -> usize {
        self.0.num_edges()
    }

    fn edges(&self) -> Vec<(usize, usize)> {
        self.0.edges().to_vec()
    }

    /// Incidence matrix as a list of rows.
    fn incidence(&self) -> Vec<Vec<f64>> {
        let e = self.0.incidence_matrix();
        e.matrix().row_iter().map(|r| r.iter().copied().collect()).collect()
    }

    /// `E^T y`.
    fn relative(&self, y: Vec<f64>) -> Vec<f64> {
        self.0.incidence_matrix().relative(&vec(y)).as_slice().to_vec()
    }

    fn __repr__(&self) -> String {
        format!("Graph(n={}, edges={:?})", self.0.num_vertices(), self.0.edges())
    }
}

/// Scalar agent model.
#[pyclass(name = "Agent", frozen, from_py_object)]
#[derive(Clone)]
struct PyAgent(passnet::systems::Agent);

#[pymethods]
impl PyAgent {
    #[staticmethod]
    fn integrator() -> Self {
        Self(passnet::systems::Agent::integrator())
    }

    /// `x' = -c_d |x| x + u + w`, `y = x`.
    #[staticmethod]
    #[pyo3(signature = (c_d, w = 0.0))]
    fn vehicle(c_d: f64, w: f64) -> Self {
        Self(passnet::systems::Agent::vehicle(c_d, w))
    }

    /// `x' = -a x + b u`, `y = c x`.
    #[staticmethod]
    #[pyo3(signature = (a = 1.0, b = 1.0, c = 1.0))]
    fn lti(a: f64, b: f64, c: f64) -> PyResult<Self> {
        LtiAgent::new(a, b, c).map(|l| Self(l.into())).map_err(py_err)
    }

    /// `x' = -f(x) + u`, `y = h(x)` with ascending polynomial coefficients.
    #[staticmethod]
    #[pyo3(signature = (f, h = vec![0.0, 1.0]))]
    fn polynomial(f: Vec<f64>, h: Vec<f64>) -> Self {
        Self(ControlAffineAgent::polynomial(f, h).into())
    }

    fn dynamics(&self, x: f64, u: f64) -> f64 {
        self.0.dynamics(x, u)
    }

    fn output(&self, x: f64) -> f64 {
        self.0.output(x)
    }

    /// Constant input holding the output at `h(sigma)`.
    fn steady_input(&self, sigma: f64) -> f64 {
        self.0.steady_input(sigma)
    }

    /// Closed-loop experiment under `u = -beta (y - y_ref)`; returns
    /// `(u_ss, y_ss, converged)`.
    #[pyo3(signature = (beta, y_ref, dt = 1e-3, t_max = 5000.0))]
    fn experiment(&self, beta: f64, y_ref: f64, dt: f64, t_max: f64) -> PyResult<(f64, f64, bool)> {
        let params = SimParams { dt, t_max, ..SimParams::experiment() };
        let r = closed_loop_experiment(&self.0, 0, beta, y_ref, &params).map_err(py_err)?;
        Ok((r.u_ss, r.y_ss, r.converged))
    }
}

/// Agents on a graph with proportional edge controllers `mu = gain (zeta - zeta*)`.
#[pyclass(name = "Network", frozen)]
struct PyNetwork {
    net: passnet::simulation::Network,
    zeta_star: DVector<f64>,
}

#[pymethods]
impl PyNetwork {
    #[new]
    #[pyo3(signature = (graph, agents, zeta_star = None, gain = 1.0))]
    fn new(graph: PyGraph, agents: Vec<PyAgent>, zeta_star: Option<Vec<f64>>, gain: f64) -> PyResult<Self> {
        let m = graph.0.num_edges();
        let zs = zeta_star.map(vec).unwrap_or_else(|| DVector::zeros(m));
        graph.0.incidence_matrix().validate_formation(&zs).map_err(py_err)?;
        let controllers = zs.iter().map(|z| StaticController::Proportional { target: *z, gain }).collect();
        let agents = agents.into_iter().map(|a| a.0).collect();
        let net = passnet::simulation::Network::with_static(graph.0, agents, controllers).map_err(py_err)?;
        Ok(Self { net, zeta_star: zs })
    }

    #[getter]
    fn zeta_star(&self) -> Vec<f64> {
        self.zeta_star.as_slice().to_vec()
    }

    /// Steady-state outputs for edge gains `gains`.
    fn steady_state(&self, gains: Vec<f64>) -> PyResult<Vec<f64>> {
        let p = self.net.steady_state_problem(&vec(gains)).map_err(py_err)?;
        let y = p.solve(&SolverOptions::default()).map_err(py_err)?;
        Ok(y.as_slice().to_vec())
    }

    /// `(distance, gradient, direction)` of `F(a) = |E^T y(a) - zeta*|^2`.
    fn gradient(&self, gains: Vec<f64>) -> PyResult<(f64, Vec<f64>, Vec<f64>)> {
        let p = self.net.steady_state_problem(&vec(gains)).map_err(py_err)?;
        let y = p.solve(&SolverOptions::default()).map_err(py_err)?;
        let r = gradient_at(&p, &y, &self.zeta_star).map_err(py_err)?;
        Ok((r.distance, r.gradient.as_slice().to_vec(), r.direction.as_slice().to_vec()))
    }

    /// RK4 trajectory; returns `(times, outputs)` with one output row per sample.
    #[pyo3(signature = (gains, x0 = None, dt = 1e-3, t_max = 10.0, stride = 10))]
    fn simulate(
        &self,
        gains: Vec<f64>,
        x0: Option<Vec<f64>>,
        dt: f64,
        t_max: f64,
        stride: usize,
    ) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
        let gains = vec(gains);
        let x0 = x0.map(vec).unwrap_or_else(|| DVector::zeros(self.net.num_agents()));
        let params = SimParams { dt: stable_dt(&self.net, &gains, dt), t_max, stride, ..SimParams::network() };
        let traj = integrate_network(&self.net, &gains, &x0, None, &params).map_err(py_err)?;
        Ok((traj.times(), traj.samples.into_iter().map(|s| s.y).collect()))
    }

    /// Gain iteration from `a0`; returns `(gains, distances, halted)`.
    #[pyo3(signature = (epsilon, h = 2.0, a0 = 0.1, max_iter = 200))]
    fn iterate(&self, epsilon: f64, h: f64, a0: f64, max_iter: usize) -> PyResult<(Vec<f64>, Vec<f64>, bool)> {
        let a0 = DVector::from_element(self.net.num_edges(), a0);
        let (a, log) =
            algorithm3_iterate(&self.net, &self.zeta_star, epsilon, h, &a0, max_iter, SteadyStateSource::Oracle)
                .map_err(py_err)?;
        let dist = log.records.iter().map(|r| r.distance).collect();
        Ok((a.as_slice().to_vec(), dist, log.halted))
    }
}

/// Corner bound from three `(u, y)` pairs.
#[pyfunction]
fn three_experiment_bound(pairs_in: Vec<(f64, f64)>, y_star: f64) -> PyResult<f64> {
    let p = pairs(pairs_in);
    let arr: [SteadyStatePair; 3] =
        p.try_into().map_err(|_| PassnetError::new_err("invalid_argument: exactly three pairs are needed"))?;
    algorithm1_from_pairs(arr, y_star).map(|e| e.m_hat).map_err(py_err)
}

/// Chain bound from any number of `(u, y)` pairs.
#[pyfunction]
fn chain_bound(pairs_in: Vec<(f64, f64)>, y_star: f64) -> PyResult<f64> {
    estimate_mi_chain(&pairs(pairs_in), y_star).map_err(py_err)
}

/// `M` for proportional controllers; `mode` is `"euclidean"` or `"per-edge"`.
#[pyfunction]
#[pyo3(signature = (graph, zeta_star, epsilon, mode = "euclidean", gain = 1.0))]
fn big_m(graph: PyGraph, zeta_star: Vec<f64>, epsilon: f64, mode: &str, gain: f64) -> PyResult<f64> {
    let mode: MMode = mode.parse().map_err(py_err)?;
    let zs = vec(zeta_star);
    let ctrl: Vec<StaticController> = zs.iter().map(|z| StaticController::Proportional { target: *z, gain }).collect();
    compute_m(&ctrl, &zs, epsilon, &graph.0.incidence_matrix(), mode).map_err(py_err)
}

/// Runs a CLI subcommand; returns `(passed, summary_json)`.
#[pyfunction]
#[pyo3(signature = (command, out_dir, scenario = None, seed = None))]
fn run_scenario(
    command: &str,
    out_dir: PathBuf,
    scenario: Option<PathBuf>,
    seed: Option<u64>,
) -> PyResult<(bool, String)> {
    let cmd = match command {
        "simulate" => Command::Simulate,
        "experiment" => Command::Experiment,
        "estimate-m" => Command::EstimateM,
        "synthesize" => Command::Synthesize,
        "iterate" => Command::Iterate,
        "ramp" => Command::Ramp,
        "case-study" => Command::CaseStudy,
        "verify" => Command::Verify,
        other => return Err(PassnetError::new_err(format!("invalid_argument: unknown command `{other}`"))),
    };
    let ov = Overrides { seed, ..Default::default() };
    let sc = match scenario {
        Some(p) => parse_scenario(&p, &ov),
        None => parse_config(CASE_STUDY).and_then(|c| Scenario::from_config(c, &ov)),
    }
    .map_err(py_err)?;
    let out = run_command(cmd, &sc, &out_dir).map_err(py_err)?;
    Ok((out.passed, out.summary.to_string()))
}

#[pymodule]
#[pyo3(name = "passnet")]
fn passnet_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PassnetError", m.py().get_type::<PassnetError>())?;
    m.add_class::<PyGraph>()?;
    m.add_class::<PyAgent>()?;
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(three_experiment_bound, m)?)?;
    m.add_function(wrap_pyfunction!(chain_bound, m)?)?;
    m.add_function(wrap_pyfunction!(big_m, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    Ok(())
}
