//! Fixed-step RK4 simulation of the diffusively coupled closed loop and the
//! single-agent feedback experiment.

use std::collections::VecDeque;

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{IncidenceMatrix, UndirectedGraph};
use crate::relations::{MonotoneRelation, SteadyStateProblem};
use crate::systems::{Agent, EdgeController, StaticController, DEFAULT_DOMAIN, DEFAULT_GRID};

const BLOW_UP: f64 = 1e12;

/// Agents on the vertices of a graph, one controller per edge.
#[derive(Debug, Clone)]
pub struct Network {
    graph: UndirectedGraph,
    incidence: IncidenceMatrix,
    agents: Vec<Agent>,
    controllers: Vec<EdgeController>,
    /// Slot in the controller-state vector for each integrator edge.
    eta_slot: Vec<Option<usize>>,
}

impl Network {
    pub fn new(graph: UndirectedGraph, agents: Vec<Agent>, controllers: Vec<EdgeController>) -> Result<Self> {
        if agents.len() != graph.num_vertices() {
            return Err(Error::DimensionMismatch { expected: graph.num_vertices(), got: agents.len() });
        }
        if controllers.len() != graph.num_edges() {
            return Err(Error::DimensionMismatch { expected: graph.num_edges(), got: controllers.len() });
        }
        for c in controllers.iter().filter_map(|c| c.as_static()) {
            c.validate()?;
        }
        let mut next = 0;
        let eta_slot = controllers
            .iter()
            .map(|c| match c {
                EdgeController::Integrator => {
                    next += 1;
                    Some(next - 1)
                }
                EdgeController::Static(_) => None,
            })
            .collect();
        let incidence = graph.incidence_matrix();
        Ok(Self { graph, incidence, agents, controllers, eta_slot })
    }

    /// Same agents with static controllers on every edge.
    pub fn with_static(graph: UndirectedGraph, agents: Vec<Agent>, controllers: Vec<StaticController>) -> Result<Self> {
        Self::new(graph, agents, controllers.into_iter().map(EdgeController::Static).collect())
    }

    pub fn graph(&self) -> &UndirectedGraph {
        &self.graph
    }

    pub fn incidence(&self) -> &IncidenceMatrix {
        &self.incidence
    }

    pub fn agents(&self) -> &[Agent] {
        &self.agents
    }

    pub fn controllers(&self) -> &[EdgeController] {
        &self.controllers
    }

    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn num_edges(&self) -> usize {
        self.controllers.len()
    }

    pub fn num_controller_states(&self) -> usize {
        self.eta_slot.iter().flatten().count()
    }

    pub fn static_controllers(&self) -> Result<Vec<StaticController>> {
        self.controllers
            .iter()
            .map(|c| {
                c.as_static()
                    .copied()
                    .ok_or_else(|| Error::InvalidArgument("steady-state oracle needs static controllers".into()))
            })
            .collect()
    }

    /// Agent relations sampled on the default state domain.
    pub fn relations(&self) -> Result<Vec<MonotoneRelation>> {
        self.agents.iter().map(|a| MonotoneRelation::from_agent(a, DEFAULT_DOMAIN, DEFAULT_GRID)).collect()
    }

    pub fn steady_state_problem(&self, gains: &DVector<f64>) -> Result<SteadyStateProblem> {
        SteadyStateProblem::new(self.incidence.clone(), gains.clone(), self.relations()?, self.static_controllers()?)
    }

    /// Copy with controller targets replaced.
    pub fn with_targets(&self, zeta_star: &DVector<f64>) -> Result<Self> {
        if zeta_star.len() != self.num_edges() {
            return Err(Error::DimensionMismatch { expected: self.num_edges(), got: zeta_star.len() });
        }
        let controllers = self
            .controllers
            .iter()
            .zip(zeta_star.iter())
            .map(|(c, z)| match c {
                EdgeController::Static(s) => EdgeController::Static(s.with_target(*z)),
                EdgeController::Integrator => EdgeController::Integrator,
            })
            .collect();
        Self::new(self.graph.clone(), self.agents.clone(), controllers)
    }

    fn check_gains(&self, gains: &DVector<f64>) -> Result<()> {
        if gains.len() != self.num_edges() {
            return Err(Error::DimensionMismatch { expected: self.num_edges(), got: gains.len() });
        }
        if let Some((e, v)) = gains.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
            return Err(Error::InvalidArgument(format!("gain a[{e}] = {v} is not positive")));
        }
        Ok(())
    }
}

/// Largest step not exceeding `dt`, of the form `dt / k`, for which the
/// coupling term stays well inside the RK4 stability region. Uses
/// `2 * max degree` as a bound on the Laplacian spectrum and the controller
/// slopes at their targets.
pub fn stable_dt(net: &Network, gains: &DVector<f64>, dt: f64) -> f64 {
    let mut degree = vec![0usize; net.num_agents()];
    for &(i, j) in net.graph().edges() {
        degree[i] += 1;
        degree[j] += 1;
    }
    let lambda = 2.0 * degree.iter().copied().max().unwrap_or(0) as f64;
    let slope = net
        .controllers()
        .iter()
        .zip(gains.iter())
        .filter_map(|(c, a)| c.as_static().map(|s| a * s.derivative(s.target())))
        .fold(0.0, f64::max);
    let rate = lambda * slope;
    if rate * dt <= 1.0 {
        dt
    } else {
        dt / (rate * dt).ceil()
    }
}

/// Time, agent states and controller states.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub t: f64,
    pub x: DVector<f64>,
    pub eta: DVector<f64>,
}

/// One recorded instant; the wiring signals are recomputed from the state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sample {
    pub t: f64,
    pub x: Vec<f64>,
    pub eta: Vec<f64>,
    pub xdot: Vec<f64>,
    pub u: Vec<f64>,
    pub y: Vec<f64>,
    pub zeta: Vec<f64>,
    pub mu: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Trajectory {
    pub samples: Vec<Sample>,
}

impl Trajectory {
    pub fn last(&self) -> Option<&Sample> {
        self.samples.last()
    }

    pub fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.t).collect()
    }

    pub fn final_state(&self) -> Option<NetworkState> {
        self.last().map(|s| NetworkState {
            t: s.t,
            x: DVector::from_vec(s.x.clone()),
            eta: DVector::from_vec(s.eta.clone()),
        })
    }
}

/// Step size, horizon, recording stride and convergence test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimParams {
    pub dt: f64,
    pub t_max: f64,
    pub stride: usize,
    pub window: f64,
    pub tol: f64,
}

impl SimParams {
    pub fn network() -> Self {
        Self { dt: 1e-3, t_max: 200.0, stride: 10, window: 1.0, tol: 1e-4 }
    }

    pub fn experiment() -> Self {
        Self { dt: 1e-3, t_max: 5000.0, stride: 10, window: 1.0, tol: 1e-6 }
    }

    fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !(self.t_max >= 0.0) || self.stride == 0 {
            return Err(Error::InvalidArgument(format!(
                "need dt > 0, t_max >= 0 and stride >= 1 (dt={}, t_max={}, stride={})",
                self.dt, self.t_max, self.stride
            )));
        }
        Ok(())
    }
}

impl Default for SimParams {
    fn default() -> Self {
        Self::network()
    }
}

struct Engine<'a> {
    net: &'a Network,
    gains: &'a [f64],
    n: usize,
    y: Vec<f64>,
    u: Vec<f64>,
}

impl<'a> Engine<'a> {
    fn new(net: &'a Network, gains: &'a [f64]) -> Self {
        let n = net.num_agents();
        Self { net, gains, n, y: vec![0.0; n], u: vec![0.0; n] }
    }

    /// Fills `self.y`, `self.u` and the derivative of the stacked state.
    fn rhs(&mut self, z: &[f64], dz: &mut [f64]) {
        let n = self.n;
        for (yi, (agent, zi)) in self.y.iter_mut().zip(self.net.agents.iter().zip(z)) {
            *yi = agent.output(*zi);
        }
        self.u.fill(0.0);
        for (e, &(i, j)) in self.net.graph.edges().iter().enumerate() {
            let zeta = self.y[i] - self.y[j];
            let mu = match (&self.net.controllers[e], self.net.eta_slot[e]) {
                (EdgeController::Static(c), _) => c.output(zeta),
                (EdgeController::Integrator, Some(k)) => {
                    dz[n + k] = zeta;
                    z[n + k]
                }
                (EdgeController::Integrator, None) => unreachable!(),
            };
            let flow = self.gains[e] * mu;
            self.u[i] -= flow;
            self.u[j] += flow;
        }
        for i in 0..n {
            dz[i] = self.net.agents[i].dynamics(z[i], self.u[i]);
        }
    }

    fn sample(&mut self, t: f64, z: &[f64], dz: &mut [f64]) -> Sample {
        self.rhs(z, dz);
        let n = self.n;
        let edges = self.net.graph.edges();
        let zeta: Vec<f64> = edges.iter().map(|&(i, j)| self.y[i] - self.y[j]).collect();
        let mu: Vec<f64> = self
            .net
            .controllers
            .iter()
            .enumerate()
            .map(|(e, c)| match (c, self.net.eta_slot[e]) {
                (EdgeController::Static(c), _) => c.output(zeta[e]),
                (_, Some(k)) => z[n + k],
                _ => unreachable!(),
            })
            .collect();
        Sample {
            t,
            x: z[..n].to_vec(),
            eta: z[n..].to_vec(),
            xdot: dz[..n].to_vec(),
            u: self.u.clone(),
            y: self.y.clone(),
            zeta,
            mu,
        }
    }
}

/// Generic RK4 driver; `observe` sees every `stride`-th sample (including
/// `t = 0`) and returns `true` to stop. Returns the final time.
fn drive<F>(
    dim: usize,
    z0: Vec<f64>,
    params: &SimParams,
    mut rhs: impl FnMut(&[f64], &mut [f64]),
    mut record: impl FnMut(f64, &[f64]) -> F,
    mut observe: impl FnMut(F) -> bool,
) -> Result<f64> {
    params.validate()?;
    let steps = (params.t_max / params.dt).round() as u64;
    let mut z = z0;
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) =
        (vec![0.0; dim], vec![0.0; dim], vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]);
    let dt = params.dt;
    if observe(record(0.0, &z)) {
        return Ok(0.0);
    }
    for step in 1..=steps {
        rhs(&z, &mut k1);
        for i in 0..dim {
            tmp[i] = z[i] + 0.5 * dt * k1[i];
        }
        rhs(&tmp, &mut k2);
        for i in 0..dim {
            tmp[i] = z[i] + 0.5 * dt * k2[i];
        }
        rhs(&tmp, &mut k3);
        for i in 0..dim {
            tmp[i] = z[i] + dt * k3[i];
        }
        rhs(&tmp, &mut k4);
        for i in 0..dim {
            z[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        let t = step as f64 * dt;
        if z.iter().any(|v| !v.is_finite() || v.abs() > BLOW_UP) {
            return Err(Error::BlowUp { t });
        }
        if (step % params.stride as u64 == 0 || step == steps) && observe(record(t, &z)) {
            return Ok(t);
        }
    }
    Ok(steps as f64 * dt)
}

fn initial_state(net: &Network, x0: &DVector<f64>, eta0: Option<&DVector<f64>>) -> Result<Vec<f64>> {
    if x0.len() != net.num_agents() {
        return Err(Error::DimensionMismatch { expected: net.num_agents(), got: x0.len() });
    }
    let q = net.num_controller_states();
    let eta = match eta0 {
        Some(e) if e.len() != q => return Err(Error::DimensionMismatch { expected: q, got: e.len() }),
        Some(e) => e.iter().copied().collect(),
        None => vec![0.0; q],
    };
    Ok(x0.iter().copied().chain(eta).collect())
}

/// Streams recorded samples of the closed loop `u = -E diag(a) mu`,
/// `zeta = E^T y` to `observe` until it returns `true` or `t_max` is reached.
pub fn simulate_network<O: FnMut(&Sample) -> bool>(
    net: &Network,
    gains: &DVector<f64>,
    x0: &DVector<f64>,
    eta0: Option<&DVector<f64>>,
    params: &SimParams,
    mut observe: O,
) -> Result<f64> {
    net.check_gains(gains)?;
    let z0 = initial_state(net, x0, eta0)?;
    let dim = z0.len();
    let a: Vec<f64> = gains.iter().copied().collect();
    let engine = std::cell::RefCell::new(Engine::new(net, &a));
    let mut scratch = vec![0.0; dim];
    drive(
        dim,
        z0,
        params,
        |z, dz| engine.borrow_mut().rhs(z, dz),
        |t, z| engine.borrow_mut().sample(t, z, &mut scratch),
        |s| observe(&s),
    )
}

/// Full recorded trajectory.
pub fn integrate_network(
    net: &Network,
    gains: &DVector<f64>,
    x0: &DVector<f64>,
    eta0: Option<&DVector<f64>>,
    params: &SimParams,
) -> Result<Trajectory> {
    let mut traj = Trajectory::default();
    simulate_network(net, gains, x0, eta0, params, |s| {
        traj.samples.push(s.clone());
        false
    })?;
    Ok(traj)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Convergence {
    Converged { y_ss: Vec<f64>, u_ss: Vec<f64> },
    NotConverged,
}

impl Convergence {
    pub fn is_converged(&self) -> bool {
        matches!(self, Convergence::Converged { .. })
    }
}

/// Streaming convergence test over a trailing time window.
#[derive(Debug, Clone)]
pub struct ConvergenceMonitor {
    window: f64,
    tol: f64,
    buf: VecDeque<(f64, Vec<f64>, Vec<f64>)>,
    xdot_inf: f64,
}

impl ConvergenceMonitor {
    pub fn new(window: f64, tol: f64) -> Self {
        Self { window, tol, buf: VecDeque::new(), xdot_inf: f64::INFINITY }
    }

    /// Adds a sample and reports whether the trailing window has converged.
    pub fn push(&mut self, t: f64, y: &[f64], u: &[f64], xdot: &[f64]) -> bool {
        self.buf.push_back((t, y.to_vec(), u.to_vec()));
        while self.buf.len() > 1 && self.buf[1].0 <= t - self.window {
            self.buf.pop_front();
        }
        self.xdot_inf = xdot.iter().fold(0.0, |m, v| m.max(v.abs()));
        self.is_converged()
    }

    pub fn is_converged(&self) -> bool {
        let (Some(first), Some(last)) = (self.buf.front(), self.buf.back()) else {
            return false;
        };
        if last.0 - first.0 < self.window - 1e-9 || !(self.xdot_inf < self.tol) {
            return false;
        }
        let n = last.1.len();
        (0..n).all(|i| {
            let (lo, hi) = self
                .buf
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s.1[i]), hi.max(s.1[i])));
            hi - lo < self.tol
        })
    }

    /// Window averages of `y` and `u`.
    pub fn averages(&self) -> (Vec<f64>, Vec<f64>) {
        let k = self.buf.len().max(1) as f64;
        let n = self.buf.front().map_or(0, |s| s.1.len());
        let mut y = vec![0.0; n];
        let mut u = vec![0.0; n];
        for s in &self.buf {
            for i in 0..n {
                y[i] += s.1[i] / k;
                u[i] += s.2[i] / k;
            }
        }
        (y, u)
    }

    pub fn result(&self) -> Convergence {
        if self.is_converged() {
            let (y_ss, u_ss) = self.averages();
            Convergence::Converged { y_ss, u_ss }
        } else {
            Convergence::NotConverged
        }
    }
}

/// Converged iff `y` varies less than `tol` over the trailing `window` and
/// `||x'||_inf < tol` at the last sample.
pub fn detect_convergence(traj: &Trajectory, window: f64, tol: f64) -> Convergence {
    let Some(last) = traj.last() else {
        return Convergence::NotConverged;
    };
    let start = last.t - window;
    let mut monitor = ConvergenceMonitor::new(window, tol);
    let first = traj.samples.partition_point(|s| s.t < start);
    let from = first.saturating_sub(if first > 0 && traj.samples[first].t > start { 1 } else { 0 });
    for s in &traj.samples[from..] {
        monitor.push(s.t, &s.y, &s.u, &s.xdot);
    }
    monitor.result()
}

/// Outcome of running the network until its outputs settle.
#[derive(Debug, Clone, PartialEq)]
pub struct SteadyStateRun {
    pub converged: bool,
    pub t_end: f64,
    pub y: DVector<f64>,
    pub u: DVector<f64>,
    pub zeta: DVector<f64>,
    pub state: NetworkState,
}

/// Runs until the convergence test passes or `t_max` elapses.
pub fn simulate_to_steady_state(
    net: &Network,
    gains: &DVector<f64>,
    x0: &DVector<f64>,
    eta0: Option<&DVector<f64>>,
    params: &SimParams,
) -> Result<SteadyStateRun> {
    let mut monitor = ConvergenceMonitor::new(params.window, params.tol);
    let mut last: Option<Sample> = None;
    let t_end = simulate_network(net, gains, x0, eta0, params, |s| {
        let done = monitor.push(s.t, &s.y, &s.u, &s.xdot);
        last = Some(s.clone());
        done
    })?;
    let last = last.expect("at least the initial sample is recorded");
    let converged = monitor.is_converged();
    let (y, u) = if converged { monitor.averages() } else { (last.y.clone(), last.u.clone()) };
    let y = DVector::from_vec(y);
    Ok(SteadyStateRun {
        converged,
        t_end,
        zeta: net.incidence().relative(&y),
        u: DVector::from_vec(u),
        y,
        state: NetworkState { t: last.t, x: DVector::from_vec(last.x), eta: DVector::from_vec(last.eta) },
    })
}

/// Measured steady state of one agent under `u = -beta (y - y_ref)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExperimentRecord {
    pub agent: usize,
    pub beta: f64,
    pub y_ref: f64,
    pub u_ss: f64,
    pub y_ss: f64,
    pub converged: bool,
    pub t_end: f64,
}

/// Single-agent closed-loop experiment started from `x = 0`. A run that does
/// not settle within `t_max` is returned with `converged = false`.
pub fn closed_loop_experiment(
    agent: &Agent,
    agent_id: usize,
    beta: f64,
    y_ref: f64,
    params: &SimParams,
) -> Result<ExperimentRecord> {
    if !(beta > 0.0) || !y_ref.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "experiment needs beta > 0 and finite y_ref (beta={beta}, y_ref={y_ref})"
        )));
    }
    let mut monitor = ConvergenceMonitor::new(params.window, params.tol);
    let input = |x: f64| -beta * (agent.output(x) - y_ref);
    let t_end = drive(
        1,
        vec![0.0],
        params,
        |z, dz| dz[0] = agent.dynamics(z[0], input(z[0])),
        |t, z| (t, z[0]),
        |(t, x)| {
            let u = input(x);
            monitor.push(t, &[agent.output(x)], &[u], &[agent.dynamics(x, u)])
        },
    )?;
    let converged = monitor.is_converged();
    let (y, _) = monitor.averages();
    let y_ss = y[0];
    Ok(ExperimentRecord { agent: agent_id, beta, y_ref, u_ss: -beta * (y_ss - y_ref), y_ss, converged, t_end })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::LtiAgent;

    fn two_lti(alpha: f64) -> (Network, DVector<f64>) {
        let lti = Agent::from(LtiAgent::with_slope(1.0).unwrap());
        let net = Network::with_static(
            UndirectedGraph::path(2).unwrap(),
            vec![lti.clone(), lti],
            vec![StaticController::proportional(1.0)],
        )
        .unwrap();
        (net, DVector::from_element(1, alpha))
    }

    #[test]
    fn open_loop_single_agent() {
        let net =
            Network::new(UndirectedGraph::new(1, vec![]).unwrap(), vec![Agent::vehicle(1.0, 0.0)], vec![]).unwrap();
        let params = SimParams { t_max: 1.0, ..SimParams::network() };
        let traj = integrate_network(&net, &DVector::zeros(0), &DVector::from_element(1, 1.0), None, &params).unwrap();
        // x' = -x^2 from 1 gives x = 1/(1+t)
        let last = traj.last().unwrap();
        assert!((last.x[0] - 0.5).abs() < 1e-10);
        assert!(traj.samples.windows(2).all(|w| w[1].t > w[0].t));
    }

    #[test]
    fn two_lti_reaches_oracle_value() {
        let (net, a) = two_lti(49.5);
        let params = SimParams { t_max: 50.0, ..SimParams::network() };
        let traj = integrate_network(&net, &a, &DVector::zeros(2), None, &params).unwrap();
        let last = traj.last().unwrap();
        assert!((last.zeta[0] - 0.99).abs() < 1e-6);
        for s in &traj.samples {
            assert_eq!(s.zeta[0], s.y[0] - s.y[1]);
            assert_eq!(s.u[0], -a[0] * s.mu[0]);
        }
        let run = simulate_to_steady_state(&net, &a, &DVector::zeros(2), None, &SimParams::network()).unwrap();
        assert!(run.converged);
        assert!((run.zeta[0] - 0.99).abs() < 1e-4);
    }

    #[test]
    fn convergence_detection() {
        let constant = Trajectory {
            samples: (0..=300)
                .map(|k| Sample {
                    t: k as f64 * 0.01,
                    x: vec![2.0],
                    eta: vec![],
                    xdot: vec![0.0],
                    u: vec![0.5],
                    y: vec![2.0],
                    zeta: vec![],
                    mu: vec![],
                })
                .collect(),
        };
        match detect_convergence(&constant, 1.0, 1e-6) {
            Convergence::Converged { y_ss, u_ss } => {
                assert!((y_ss[0] - 2.0).abs() < 1e-12);
                assert!((u_ss[0] - 0.5).abs() < 1e-12);
            }
            Convergence::NotConverged => panic!("constant trajectory must converge"),
        }
        let mut wavy = constant.clone();
        for s in &mut wavy.samples {
            s.y[0] = s.t.sin();
        }
        assert_eq!(detect_convergence(&wavy, 1.0, 1e-6), Convergence::NotConverged);
    }

    #[test]
    fn blow_up_reported() {
        let unstable = Agent::from(crate::systems::ControlAffineAgent {
            f: crate::systems::ScalarFn::Polynomial(vec![0.0, 0.0, -1.0]),
            g: crate::systems::ScalarFn::Constant(1.0),
            h: crate::systems::ScalarFn::Linear(1.0),
            w: 0.0,
        });
        let net = Network::new(UndirectedGraph::new(1, vec![]).unwrap(), vec![unstable], vec![]).unwrap();
        let params = SimParams { t_max: 5.0, ..SimParams::network() };
        let err =
            integrate_network(&net, &DVector::zeros(0), &DVector::from_element(1, 1.0), None, &params).unwrap_err();
        assert_eq!(err.kind(), "blow_up");
    }

    #[test]
    fn lti_experiment() {
        let agent = Agent::from(LtiAgent::with_slope(1.0).unwrap());
        let rec = closed_loop_experiment(&agent, 0, 1.0, 2.0, &SimParams::experiment()).unwrap();
        assert!(rec.converged);
        assert!((rec.y_ss - 1.0).abs() < 1e-6);
        assert!((rec.u_ss - 1.0).abs() < 1e-6);
        assert!((rec.u_ss + rec.beta * (rec.y_ss - rec.y_ref)).abs() < 1e-12);
    }

    #[test]
    fn experiment_at_zero_input_output() {
        let agent = Agent::vehicle(0.7, 1.4);
        let y0 = (1.4f64 / 0.7).sqrt();
        for beta in [0.1, 1.0, 10.0] {
            let rec = closed_loop_experiment(&agent, 3, beta, y0, &SimParams::experiment()).unwrap();
            assert!(rec.converged);
            assert!((rec.y_ss - y0).abs() < 1e-6);
            assert!(rec.u_ss.abs() < 1e-5);
        }
    }

    #[test]
    fn vehicle_small_beta_saturates_input() {
        let rec = closed_loop_experiment(&Agent::vehicle(1.0, 0.0), 0, 0.01, 100.0, &SimParams::experiment()).unwrap();
        assert!(rec.converged);
        assert!((rec.u_ss - 1.0).abs() < 0.02, "{}", rec.u_ss);
    }
}
