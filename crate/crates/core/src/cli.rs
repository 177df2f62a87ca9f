//! Scenario files, CSV output and the subcommand runners behind the
//! `passnet` binary.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::UndirectedGraph;
use crate::relations::{duality_gap, gradient_at, SolverOptions, SteadyStateProblem};
use crate::simulation::{
    closed_loop_experiment, detect_convergence, integrate_network, simulate_to_steady_state, stable_dt, Network,
    SimParams,
};
use crate::synthesis::{
    algorithm3_iterate, estimate_agents, estimate_mi_chain, refined_estimates, slow_ramp, uniform_gain_from_estimates,
    AgentEstimate, Estimator, ExperimentOptions, MMode, SteadyStateSource,
};
use crate::systems::{passivize, Agent, ControlAffineAgent, EdgeController, LtiAgent, StaticController};

/// Bundled vehicle case study.
pub const CASE_STUDY: &str = include_str!("../scenarios/case_study.json");
/// Bundled two-agent LTI toy.
pub const TWO_LTI: &str = include_str!("../scenarios/two_lti.json");

pub const RNG_NAME: &str = "ChaCha8";

/// Scalar broadcast to every entry, or an explicit list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Values {
    Scalar(f64),
    List(Vec<f64>),
}

impl Values {
    fn resolve(&self, len: usize, path: &str) -> Result<DVector<f64>> {
        match self {
            Values::Scalar(v) => Ok(DVector::from_element(len, *v)),
            Values::List(v) if v.len() == len => Ok(DVector::from_vec(v.clone())),
            Values::List(v) => Err(scenario_err(path, format!("expected {len} entries, got {}", v.len()))),
        }
    }
}

/// Fixed value or a distribution sampled with the scenario seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Param {
    Fixed(f64),
    Dist(Dist),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dist {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_uniform: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uniform: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    /// `path`, `cycle`, `complete`, `star` or `explicit`.
    #[serde(default = "explicit")]
    pub family: String,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges: Option<Vec<[usize; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PassivateSpec {
    pub shortage: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    /// `integrator`, `vehicle_drag`, `lti_first_order` or `custom_polynomial`.
    pub model: String,
    #[serde(default = "one")]
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_d: Option<Param>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w: Option<Param>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub passivate: Option<PassivateSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSpec {
    /// `proportional`, `cubic_linear` or `integrator`.
    #[serde(rename = "type", default = "proportional")]
    pub kind: String,
    #[serde(default = "one_f")]
    pub gain: f64,
    #[serde(default = "one_f")]
    pub linear: f64,
    #[serde(default = "one_f")]
    pub cubic: f64,
}

impl Default for ControllerSpec {
    fn default() -> Self {
        Self { kind: proportional(), gain: 1.0, linear: 1.0, cubic: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoalSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zeta_star: Option<Values>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_star: Option<Values>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

impl Default for GoalSpec {
    fn default() -> Self {
        Self { zeta_star: None, y_star: None, epsilon: default_epsilon() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSpec {
    #[serde(default = "net_dt")]
    pub dt: f64,
    #[serde(default = "net_t_max")]
    pub t_max: f64,
    #[serde(default = "stride")]
    pub stride: usize,
    #[serde(default = "one_f")]
    pub window: f64,
    #[serde(default = "net_tol")]
    pub tol: f64,
    #[serde(default = "unit_gains")]
    pub gains: Values,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    /// Initial states drawn uniformly from this interval.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0_uniform: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta0: Option<Vec<f64>>,
}

impl Default for SimSpec {
    fn default() -> Self {
        Self {
            dt: net_dt(),
            t_max: net_t_max(),
            stride: stride(),
            window: 1.0,
            tol: net_tol(),
            gains: unit_gains(),
            x0: None,
            x0_uniform: None,
            eta0: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default = "net_dt")]
    pub dt: f64,
    #[serde(default = "exp_t_max")]
    pub t_max: f64,
    #[serde(default = "stride")]
    pub stride: usize,
    #[serde(default = "one_f")]
    pub window: f64,
    #[serde(default = "exp_tol")]
    pub tol: f64,
    #[serde(default = "beta_small")]
    pub beta_small: f64,
    #[serde(default = "one_f")]
    pub beta_large: f64,
    #[serde(default = "ten")]
    pub ref_offset: f64,
    #[serde(default = "ten")]
    pub beta_refine: f64,
    #[serde(default = "three")]
    pub measurements: usize,
    /// `three-experiment`, `chain`, `lti` or `oracle`.
    #[serde(default = "three_experiment")]
    pub estimator: String,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            dt: net_dt(),
            t_max: exp_t_max(),
            stride: stride(),
            window: 1.0,
            tol: exp_tol(),
            beta_small: beta_small(),
            beta_large: 1.0,
            ref_offset: 10.0,
            beta_refine: 10.0,
            measurements: 3,
            estimator: three_experiment(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisSpec {
    #[serde(default = "two")]
    pub h: f64,
    #[serde(default = "default_a0")]
    pub a0: Values,
    #[serde(default = "max_iter")]
    pub max_iter: usize,
    #[serde(default = "per_edge")]
    pub m_mode: String,
    #[serde(default = "oracle")]
    pub steady_state: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default = "schedule")]
    pub ramp_schedule: Vec<f64>,
    #[serde(default = "table")]
    pub table_measurements: Vec<usize>,
}

impl Default for SynthesisSpec {
    fn default() -> Self {
        Self {
            h: 2.0,
            a0: default_a0(),
            max_iter: max_iter(),
            m_mode: per_edge(),
            steady_state: oracle(),
            alpha: None,
            ramp_schedule: schedule(),
            table_measurements: table(),
        }
    }
}

/// Scenario file contents with every default filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub graph: GraphSpec,
    pub agents: Vec<AgentSpec>,
    #[serde(default)]
    pub controller: ControllerSpec,
    #[serde(default)]
    pub goal: GoalSpec,
    #[serde(default)]
    pub sim: SimSpec,
    #[serde(default)]
    pub experiment: ExperimentSpec,
    #[serde(default)]
    pub synthesis: SynthesisSpec,
}

fn explicit() -> String {
    "explicit".into()
}
fn proportional() -> String {
    "proportional".into()
}
fn three_experiment() -> String {
    "three-experiment".into()
}
fn per_edge() -> String {
    "per-edge".into()
}
fn oracle() -> String {
    "oracle".into()
}
fn one() -> usize {
    1
}
fn three() -> usize {
    3
}
fn stride() -> usize {
    10
}
fn max_iter() -> usize {
    200
}
fn one_f() -> f64 {
    1.0
}
fn two() -> f64 {
    2.0
}
fn ten() -> f64 {
    10.0
}
fn default_epsilon() -> f64 {
    0.2
}
fn net_dt() -> f64 {
    1e-3
}
fn net_t_max() -> f64 {
    200.0
}
fn exp_t_max() -> f64 {
    5000.0
}
fn net_tol() -> f64 {
    1e-4
}
fn exp_tol() -> f64 {
    1e-6
}
fn beta_small() -> f64 {
    0.01
}
fn unit_gains() -> Values {
    Values::Scalar(1.0)
}
fn default_a0() -> Values {
    Values::Scalar(0.1)
}
fn schedule() -> Vec<f64> {
    vec![1.0, 10.0, 100.0, 1000.0]
}
fn table() -> Vec<usize> {
    vec![3, 4, 10, 20]
}

fn scenario_err(path: &str, message: impl Into<String>) -> Error {
    Error::Scenario { path: path.to_string(), message: message.into() }
}

/// Command-line overrides applied on top of the scenario file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub m_mode: Option<String>,
    pub steady_state: Option<String>,
    pub dt: Option<f64>,
    pub t_max: Option<f64>,
    pub h: Option<f64>,
    pub max_iter: Option<usize>,
    pub alpha: Option<f64>,
}

/// A validated, fully resolved scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    /// Per-agent parameters after sampling.
    pub resolved_agents: Vec<AgentSpec>,
    pub network: Network,
    pub zeta_star: DVector<f64>,
    pub y_star: DVector<f64>,
    pub epsilon: f64,
    pub sim: SimParams,
    pub x0: DVector<f64>,
    pub eta0: Option<DVector<f64>>,
    pub gains: DVector<f64>,
    pub experiment: ExperimentOptions,
    pub estimator: Estimator,
    pub m_mode: MMode,
    pub source: SteadyStateSource,
    pub h: f64,
    pub a0: DVector<f64>,
    pub max_iter: usize,
    pub schedule: Vec<f64>,
    pub table_measurements: Vec<usize>,
    pub alpha: Option<f64>,
}

/// Parses scenario JSON, reporting schema violations with their field path.
pub fn parse_config(text: &str) -> Result<ScenarioConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        scenario_err(if path.is_empty() { "." } else { &path }, e.inner().to_string())
    })
}

/// Reads, parses and validates a scenario file.
pub fn parse_scenario(path: &Path, overrides: &Overrides) -> Result<Scenario> {
    let text = fs::read_to_string(path).map_err(|e| scenario_err(&path.display().to_string(), e.to_string()))?;
    Scenario::from_config(parse_config(&text)?, overrides)
}

fn positive(v: f64, path: &str) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(scenario_err(path, format!("must be positive and finite, got {v}")))
    }
}

fn draw(param: &Param, rng: &mut ChaCha8Rng, path: &str) -> Result<f64> {
    match param {
        Param::Fixed(v) if v.is_finite() => Ok(*v),
        Param::Fixed(v) => Err(scenario_err(path, format!("non-finite value {v}"))),
        Param::Dist(Dist { log_uniform: Some([lo, hi]), uniform: None }) => {
            if !(*lo > 0.0 && hi >= lo) {
                return Err(scenario_err(path, "log_uniform needs 0 < lo <= hi"));
            }
            Ok(if hi > lo { rng.random_range(lo.ln()..hi.ln()).exp() } else { *lo })
        }
        Param::Dist(Dist { uniform: Some([lo, hi]), log_uniform: None }) => {
            if !(hi >= lo) || !lo.is_finite() || !hi.is_finite() {
                return Err(scenario_err(path, "uniform needs finite lo <= hi"));
            }
            Ok(if hi > lo { rng.random_range(*lo..*hi) } else { *lo })
        }
        Param::Dist(_) => Err(scenario_err(path, "give exactly one of `log_uniform` or `uniform`")),
    }
}

impl Scenario {
    pub fn from_config(mut config: ScenarioConfig, ov: &Overrides) -> Result<Self> {
        if let Some(s) = ov.seed {
            config.seed = s;
        }
        if let Some(m) = &ov.m_mode {
            config.synthesis.m_mode = m.clone();
        }
        if let Some(s) = &ov.steady_state {
            config.synthesis.steady_state = s.clone();
        }
        if let Some(dt) = ov.dt {
            config.sim.dt = dt;
            config.experiment.dt = dt;
        }
        if let Some(t) = ov.t_max {
            config.sim.t_max = t;
        }
        if let Some(h) = ov.h {
            config.synthesis.h = h;
        }
        if let Some(k) = ov.max_iter {
            config.synthesis.max_iter = k;
        }
        if let Some(a) = ov.alpha {
            config.synthesis.alpha = Some(a);
        }

        let g = &config.graph;
        let graph = match g.family.as_str() {
            "path" => UndirectedGraph::path(g.n),
            "cycle" => UndirectedGraph::cycle(g.n),
            "complete" => UndirectedGraph::complete(g.n),
            "star" => UndirectedGraph::star(g.n),
            "explicit" => {
                let edges =
                    g.edges.as_ref().ok_or_else(|| scenario_err("graph.edges", "explicit graphs need an edge list"))?;
                UndirectedGraph::new(g.n, edges.iter().map(|e| (e[0], e[1])).collect())
            }
            other => return Err(scenario_err("graph.family", format!("unknown graph family `{other}`"))),
        }
        .map_err(|e| scenario_err("graph", e.to_string()))?;

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut agents = Vec::new();
        let mut resolved = Vec::new();
        for (k, spec) in config.agents.iter_mut().enumerate() {
            let path = format!("agents[{k}]");
            if spec.count == 0 {
                return Err(scenario_err(&format!("{path}.count"), "must be at least 1"));
            }
            match spec.model.as_str() {
                "vehicle_drag" => {
                    spec.c_d.get_or_insert(Param::Dist(Dist { log_uniform: Some([0.1, 10.0]), uniform: None }));
                    spec.w.get_or_insert(Param::Dist(Dist { log_uniform: None, uniform: Some([-2.0, 2.0]) }));
                }
                "lti_first_order" => {
                    spec.a.get_or_insert(1.0);
                    spec.b.get_or_insert(1.0);
                    spec.c.get_or_insert(1.0);
                }
                "custom_polynomial" => {
                    spec.h.get_or_insert(vec![0.0, 1.0]);
                    if spec.f.is_none() {
                        return Err(scenario_err(&format!("{path}.f"), "polynomial agents need drift coefficients"));
                    }
                }
                "integrator" => {}
                other => return Err(scenario_err(&format!("{path}.model"), format!("unknown agent model `{other}`"))),
            }
            for _ in 0..spec.count {
                let mut one = AgentSpec { count: 1, ..spec.clone() };
                let agent: Agent = match spec.model.as_str() {
                    "vehicle_drag" => {
                        let c_d = draw(spec.c_d.as_ref().unwrap(), &mut rng, &format!("{path}.c_d"))?;
                        let w = draw(spec.w.as_ref().unwrap(), &mut rng, &format!("{path}.w"))?;
                        if c_d < 0.0 {
                            return Err(scenario_err(&format!("{path}.c_d"), "drag must be nonnegative"));
                        }
                        one.c_d = Some(Param::Fixed(c_d));
                        one.w = Some(Param::Fixed(w));
                        Agent::vehicle(c_d, w)
                    }
                    "lti_first_order" => LtiAgent::new(spec.a.unwrap(), spec.b.unwrap(), spec.c.unwrap())
                        .map_err(|e| scenario_err(&path, e.to_string()))?
                        .into(),
                    "custom_polynomial" => {
                        let mut a = ControlAffineAgent::polynomial(spec.f.clone().unwrap(), spec.h.clone().unwrap());
                        if let Some(w) = &spec.w {
                            let w = draw(w, &mut rng, &format!("{path}.w"))?;
                            one.w = Some(Param::Fixed(w));
                            a.w = w;
                        }
                        a.into()
                    }
                    _ => Agent::integrator(),
                };
                let agent = match &spec.passivate {
                    Some(p) => passivize(agent, p.shortage, p.margin)
                        .map_err(|e| scenario_err(&format!("{path}.passivate"), e.to_string()))?
                        .into(),
                    None => agent,
                };
                agents.push(agent);
                resolved.push(one);
            }
        }
        if agents.len() != graph.num_vertices() {
            return Err(scenario_err(
                "agents",
                format!("{} agents for a graph with {} vertices", agents.len(), graph.num_vertices()),
            ));
        }

        let inc = graph.incidence_matrix();
        let (n, m) = (graph.num_vertices(), graph.num_edges());
        let goal = &config.goal;
        let epsilon = positive(goal.epsilon, "goal.epsilon")?;
        let y_given = goal.y_star.as_ref().map(|v| v.resolve(n, "goal.y_star")).transpose()?;
        let zeta_star = match (&goal.zeta_star, &y_given) {
            (Some(z), _) => z.resolve(m, "goal.zeta_star")?,
            (None, Some(y)) => inc.relative(y),
            (None, None) => DVector::zeros(m),
        };
        inc.validate_formation(&zeta_star).map_err(|e| scenario_err("goal.zeta_star", e.to_string()))?;
        let y_star = match y_given {
            Some(y) => {
                let err = (inc.relative(&y) - &zeta_star).amax();
                if err > 1e-8 {
                    return Err(scenario_err("goal.y_star", format!("E^T y* differs from zeta* by {err:.3e}")));
                }
                y
            }
            None => inc.min_norm_preimage(&zeta_star)?,
        };

        let c = &config.controller;
        let controllers: Vec<EdgeController> = match c.kind.as_str() {
            "proportional" => {
                positive(c.gain, "controller.gain")?;
                zeta_star.iter().map(|z| StaticController::Proportional { target: *z, gain: c.gain }.into()).collect()
            }
            "cubic_linear" => {
                positive(c.linear, "controller.linear")?;
                if !(c.cubic >= 0.0) {
                    return Err(scenario_err("controller.cubic", "must be nonnegative"));
                }
                zeta_star
                    .iter()
                    .map(|z| StaticController::CubicLinear { target: *z, linear: c.linear, cubic: c.cubic }.into())
                    .collect()
            }
            "integrator" => vec![EdgeController::Integrator; m],
            other => return Err(scenario_err("controller.type", format!("unknown controller `{other}`"))),
        };
        let network = Network::new(graph, agents, controllers)?;

        let s = &config.sim;
        let sim = SimParams {
            dt: positive(s.dt, "sim.dt")?,
            t_max: positive(s.t_max, "sim.t_max")?,
            stride: if s.stride > 0 { s.stride } else { return Err(scenario_err("sim.stride", "must be at least 1")) },
            window: positive(s.window, "sim.window")?,
            tol: positive(s.tol, "sim.tol")?,
        };
        let gains = s.gains.resolve(m, "sim.gains")?;
        for (e, a) in gains.iter().enumerate() {
            positive(*a, &format!("sim.gains[{e}]"))?;
        }
        let x0 = match (&s.x0, &s.x0_uniform) {
            (Some(_), Some(_)) => return Err(scenario_err("sim.x0", "give either x0 or x0_uniform")),
            (Some(x), None) => Values::List(x.clone()).resolve(n, "sim.x0")?,
            (None, Some(range)) => {
                let p = Param::Dist(Dist { log_uniform: None, uniform: Some(*range) });
                let mut v = Vec::with_capacity(n);
                for _ in 0..n {
                    v.push(draw(&p, &mut rng, "sim.x0_uniform")?);
                }
                DVector::from_vec(v)
            }
            (None, None) => DVector::zeros(n),
        };
        let eta0 = s
            .eta0
            .as_ref()
            .map(|e| Values::List(e.clone()).resolve(network.num_controller_states(), "sim.eta0"))
            .transpose()?;

        let e = &config.experiment;
        let experiment = ExperimentOptions {
            beta_small: positive(e.beta_small, "experiment.beta_small")?,
            beta_large: positive(e.beta_large, "experiment.beta_large")?,
            ref_offset: positive(e.ref_offset, "experiment.ref_offset")?,
            beta_refine: positive(e.beta_refine, "experiment.beta_refine")?,
            sim: SimParams {
                dt: positive(e.dt, "experiment.dt")?,
                t_max: positive(e.t_max, "experiment.t_max")?,
                stride: e.stride.max(1),
                window: positive(e.window, "experiment.window")?,
                tol: positive(e.tol, "experiment.tol")?,
            },
        };
        let estimator = match e.estimator.as_str() {
            "three-experiment" => Estimator::ThreeExperiment,
            "chain" => Estimator::Chain { measurements: e.measurements, seed: config.seed },
            "lti" => Estimator::Lti,
            "oracle" => Estimator::Oracle,
            other => return Err(scenario_err("experiment.estimator", format!("unknown estimator `{other}`"))),
        };

        let syn = &config.synthesis;
        let m_mode: MMode = syn.m_mode.parse().map_err(|e: Error| scenario_err("synthesis.m_mode", e.to_string()))?;
        let source = match syn.steady_state.as_str() {
            "oracle" => SteadyStateSource::Oracle,
            "simulate" => SteadyStateSource::Simulate(sim),
            other => return Err(scenario_err("synthesis.steady_state", format!("unknown source `{other}`"))),
        };
        let a0 = syn.a0.resolve(m, "synthesis.a0")?;
        for (k, a) in a0.iter().enumerate() {
            positive(*a, &format!("synthesis.a0[{k}]"))?;
        }
        if syn.ramp_schedule.is_empty() || syn.ramp_schedule.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(scenario_err("synthesis.ramp_schedule", "must be nonempty and strictly increasing"));
        }
        if let Some(a) = syn.alpha {
            positive(a, "synthesis.alpha")?;
        }
        Ok(Self {
            h: positive(syn.h, "synthesis.h")?,
            max_iter: syn.max_iter,
            schedule: syn.ramp_schedule.clone(),
            table_measurements: syn.table_measurements.clone(),
            alpha: syn.alpha,
            config,
            resolved_agents: resolved,
            network,
            zeta_star,
            y_star,
            epsilon,
            sim,
            x0,
            eta0,
            gains,
            experiment,
            estimator,
            m_mode,
            source,
            a0,
        })
    }

    /// Effective configuration: the scenario with defaults and overrides
    /// applied, plus the sampled agents and targets.
    pub fn effective_config(&self) -> serde_json::Value {
        json!({
            "scenario": self.config,
            "resolved": {
                "agents": self.resolved_agents,
                "zeta_star": self.zeta_star.as_slice(),
                "y_star": self.y_star.as_slice(),
            }
        })
    }

    /// SHA-256 of the serialized effective configuration.
    pub fn config_hash(&self) -> String {
        let text = serde_json::to_string(&self.effective_config()).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    fn uniform_or_configured_gains(&self) -> DVector<f64> {
        match self.alpha {
            Some(a) => DVector::from_element(self.network.num_edges(), a),
            None => self.gains.clone(),
        }
    }
}

/// `%g`-style formatting with 12 significant digits.
pub fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{:.11e}", v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if (-4..12).contains(&exp) {
        trim(&format!("{:.*}", (11 - exp) as usize, v))
    } else {
        format!("{}e{}{:02}", trim(mantissa), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

/// Writes CSV files that start with a `# config_sha256=... seed=... rng=...` row.
pub struct CsvOut<'a> {
    dir: &'a Path,
    comment: String,
}

impl<'a> CsvOut<'a> {
    pub fn new(dir: &'a Path, scenario: &Scenario) -> Self {
        Self {
            dir,
            comment: format!("# config_sha256={} seed={} rng={}", scenario.config_hash(), scenario.seed(), RNG_NAME),
        }
    }

    pub fn write(&self, name: &str, columns: &[String], rows: &[Vec<String>]) -> Result<()> {
        let mut file = fs::File::create(self.dir.join(name))?;
        writeln!(file, "{}", self.comment)?;
        let mut w = csv::Writer::from_writer(file);
        let csv_err = |e: csv::Error| Error::Io(e.to_string());
        w.write_record(columns).map_err(csv_err)?;
        for row in rows {
            w.write_record(row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn cols(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

fn indexed(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}_{i}")).collect()
}

fn nums(values: impl IntoIterator<Item = f64>) -> Vec<String> {
    values.into_iter().map(fmt_num).collect()
}

/// Subcommands of the binary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Experiment,
    EstimateM,
    Synthesize,
    Iterate,
    Ramp,
    CaseStudy,
    Verify,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Experiment => "experiment",
            Command::EstimateM => "estimate-m",
            Command::Synthesize => "synthesize",
            Command::Iterate => "iterate",
            Command::Ramp => "ramp",
            Command::CaseStudy => "case-study",
            Command::Verify => "verify",
        }
    }
}

/// Result of a subcommand: whether its goal or verification passed, plus a
/// JSON summary (also written to `summary.json`).
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub passed: bool,
    pub summary: serde_json::Value,
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Scenario { .. }
        | Error::InvalidArgument(_)
        | Error::InvalidGraph(_)
        | Error::DimensionMismatch { .. }
        | Error::NotInEdgeSpace { .. }
        | Error::NonMonotone(_)
        | Error::Io(_) => 2,
        Error::ScheduleExhausted { .. } => 1,
        _ => 3,
    }
}

/// Machine-readable error document.
pub fn error_json(err: &Error) -> serde_json::Value {
    let mut v = json!({
        "error": err.kind(),
        "message": err.to_string(),
        "exit_code": exit_code(err),
    });
    if let Error::Scenario { path, .. } = err {
        v["path"] = json!(path);
    }
    v
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("json serializes");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Runs one subcommand and writes its files into `out`.
pub fn run_command(cmd: Command, scenario: &Scenario, out: &Path) -> Result<RunOutcome> {
    fs::create_dir_all(out)?;
    write_json(&out.join("effective_config.json"), &scenario.effective_config())?;
    let csv = CsvOut::new(out, scenario);
    let outcome = match cmd {
        Command::Simulate => run_simulate(scenario, &csv)?,
        Command::Experiment => run_experiment(scenario, &csv)?,
        Command::EstimateM => run_estimate(scenario, &csv)?,
        Command::Synthesize => run_synthesize(scenario, &csv)?,
        Command::Iterate => run_iterate(scenario, &csv)?,
        Command::Ramp => run_ramp(scenario, &csv)?,
        Command::CaseStudy => run_case_study(scenario, &csv)?,
        Command::Verify => run_verify(scenario, &csv)?,
    };
    let mut summary = outcome.summary.clone();
    summary["command"] = json!(cmd.name());
    summary["passed"] = json!(outcome.passed);
    summary["seed"] = json!(scenario.seed());
    summary["config_sha256"] = json!(scenario.config_hash());
    write_json(&out.join("summary.json"), &summary)?;
    Ok(RunOutcome { passed: outcome.passed, summary })
}

fn write_trajectory(csv: &CsvOut, net: &Network, traj: &crate::simulation::Trajectory) -> Result<()> {
    let (n, m) = (net.num_agents(), net.num_edges());
    let mut columns = cols(&["t"]);
    columns.extend(indexed("x", n));
    columns.extend(indexed("y", n));
    columns.extend(indexed("zeta", m));
    let rows: Vec<Vec<String>> = traj
        .samples
        .iter()
        .map(|s| {
            nums(
                std::iter::once(s.t)
                    .chain(s.x.iter().copied())
                    .chain(s.y.iter().copied())
                    .chain(s.zeta.iter().copied()),
            )
        })
        .collect();
    csv.write("trajectory.csv", &columns, &rows)
}

fn run_simulate(sc: &Scenario, csv: &CsvOut) -> Result<RunOutcome> {
    let gains = sc.uniform_or_configured_gains();
    let params = SimParams { dt: stable_dt(&sc.network, &gains, sc.sim.dt), ..sc.sim };
    let traj = integrate_network(&sc.network, &gains, &sc.x0, sc.eta0.as_ref(), &params)?;
    write_trajectory(csv, &sc.network, &traj)?;
    let last = traj.last().expect("initial sample recorded");
    let distance = (DVector::from_vec(last.zeta.clone()) - &sc.zeta_star).norm();
    let converged = detect_convergence(&traj, sc.sim.window, sc.sim.tol).is_converged();
    Ok(RunOutcome {
        passed: true,
        summary: json!({
            "dt": params.dt,
            "t_end": last.t,
            "converged": converged,
            "final_distance": distance,
            "within_epsilon": distance <= sc.epsilon,
        }),
    })
}

fn write_experiments(csv: &CsvOut, rows: &[AgentEstimate]) -> Result<()> {
    let columns = cols(&["agent", "beta", "y_ref", "u_ss", "y_ss", "converged", "t_end"]);
    let mut out = Vec::new();
    for a in rows {
        for r in &a.records {
            let mut row = vec![r.agent.to_string()];
            row.extend(nums([r.beta, r.y_ref, r.u_ss, r.y_ss]));
            row.push(r.converged.to_string());
            row.push(fmt_num(r.t_end));
            out.push(row);
        }
    }
    csv.write("experiments.csv", &columns, &out)
}

fn write_estimates(csv: &CsvOut, rows: &[AgentEstimate]) -> Result<()> {
    let columns = cols(&["agent", "m_hat", "y0_lo", "y0_hi", "u_star_lo", "u_star_hi"]);
    let nan = (f64::NAN, f64::NAN);
    let out: Vec<Vec<String>> = rows
        .iter()
        .map(|a| {
            let (y0, us) = (a.y0_bracket.unwrap_or(nan), a.u_star_bracket.unwrap_or(nan));
            let mut row = vec![a.agent.to_string()];
            row.extend(nums([a.m_hat, y0.0, y0.1, us.0, us.1]));
            row
        })
        .collect();
    csv.write("estimate.csv", &columns, &out)
}

fn run_experiment(sc: &Scenario, csv: &CsvOut) -> Result<RunOutcome> {
    let estimator = if sc.config.experiment.measurements > 3 {
        Estimator::Chain { measurements: sc.config.experiment.measurements, seed: sc.seed() }
    } else {
        Estimator::ThreeExperiment
    };
    let rows = estimate_agents(sc.network.agents(), &sc.y_star, estimator, &sc.experiment)?;
    write_experiments(csv, &rows)?;
    let count: usize = rows.iter().map(|r| r.records.len()).sum();
    Ok(RunOutcome { passed: true, summary: json!({ "experiments": count }) })
}

fn run_estimate(sc: &Scenario, csv: &CsvOut) -> Result<RunOutcome> {
    let rows = estimate_agents(sc.network.agents(), &sc.y_star, sc.estimator, &sc.experiment)?;
    write_experiments(csv, &rows)?;
    write_estimates(csv, &rows)?;
    let m_hat: f64 = rows.iter().map(|r| r.m_hat).sum();
    Ok(RunOutcome { passed: true, summary: json!({ "m_hat": m_hat, "estimator": sc.estimator }) })
}

/// Synthesis in both `M` modes and a closed-loop check with the selected one.
fn synthesize_and_check(sc: &Scenario, csv: &CsvOut, rows: Vec<AgentEstimate>) -> Result<(bool, serde_json::Value)> {
    let mut table = Vec::new();
    let mut chosen = None;
    for mode in [MMode::PerEdge, MMode::Euclidean] {
        let res = uniform_gain_from_estimates(&sc.network, rows.clone(), sc.epsilon, mode)?;
        table.push(vec![
            fmt_num(res.report.m_hat),
            fmt_num(res.report.big_m),
            fmt_num(res.alpha),
            mode.as_str().to_string(),
        ]);
        if mode == sc.m_mode {
            chosen = Some(res);
        }
    }
    csv.write("synthesis.csv", &cols(&["m_hat", "M", "alpha", "mode"]), &table)?;
    let chosen = chosen.expect("selected mode evaluated");
    let gains = DVector::from_vec(chosen.gains.clone());
    let params = SimParams { dt: stable_dt(&sc.network, &gains, sc.sim.dt), ..sc.sim };
    let run = simulate_to_steady_state(&sc.network, &gains, &sc.x0, sc.eta0.as_ref(), &params)?;
    let distance = (&run.zeta - &sc.zeta_star).norm();
    let passed = run.converged && distance <= sc.epsilon;
    Ok((
        passed,
        json!({
            "m_hat": chosen.report.m_hat,
            "M": chosen.report.big_m,
            "alpha": chosen.alpha,
            "mode": sc.m_mode.as_str(),
            "closed_loop": {
                "dt": params.dt,
                "converged": run.converged,
                "t_end": run.t_end,
                "distance": distance,
                "epsilon": sc.epsilon,
            }
        }),
    ))
}

fn run_synthesize(sc: &Scenario, csv: &CsvOut) -> Result<RunOutcome> {
    let rows = estimate_agents(sc.network.agents(), &sc.y_star, sc.estimator, &sc.experiment)?;
    write_experiments(csv, &rows)?;
    write_estimates(csv, &rows)?;
    let (passed, summary) = synthesize_and_check(sc, csv, rows)?;
    Ok(RunOutcome { passed, summary })
}

fn iterate_and_write(sc: &Scenario, csv: &CsvOut) -> Result<(bool, serde_json::Value)> {
    let (a, log) = algorithm3_iterate(&sc.network, &sc.zeta_star, sc.epsilon, sc.h, &sc.a0, sc.max_iter, sc.source)?;
    let m = sc.network.num_edges();
    let mut columns = cols(&["j", "a_norm", "F", "eps"]);
    columns.extend(indexed("a", m));
    let rows: Vec<Vec<String>> = log
        .records
        .iter()
        .map(|r| {
            let mut row = vec![r.j.to_string()];
            row.extend(nums([r.a_norm, r.f_value, r.distance]));
            row.extend(nums(r.gains.iter().copied()));
            row
        })
        .collect();
    csv.write("iterations.csv", &columns, &rows)?;
    let last = log.records.last().expect("at least one iterate");
    Ok((
        log.halted,
        json!({
            "halted": log.halted,
            "iterations": last.j,
            "final_distance": last.distance,
            "final_a_norm": a.norm(),
        }),
    ))
}

fn run_iterate(sc: &Scenario, csv: &CsvOut) -> Result<RunOutcome> {
    let (passed, summary) = iterate_and_write(sc, csv)?;
    Ok(RunOutcome { passed, summary })
}

fn run_ramp(sc: &Scenario, csv: &CsvOut) -> Result<RunOutcome> {
    let top = sc.schedule.last().copied().unwrap_or(1.0);
    let params = SimParams {
        dt: stable_dt(&sc.network, &DVector::from_element(sc.network.num_edges(), top), sc.sim.dt),
        ..sc.sim
    };
    let res = slow_ramp(&sc.network, &sc.zeta_star, sc.epsilon, &sc.schedule, &params)?;
    let rows: Vec<Vec<String>> =
        res.tried.iter().map(|(a, d, c)| vec![fmt_num(*a), fmt_num(*d), c.to_string()]).collect();
    csv.write("ramp.csv", &cols(&["alpha", "distance", "converged"]), &rows)?;
    Ok(RunOutcome { passed: true, summary: json!({ "alpha": res.alpha, "distance": res.distance }) })
}

fn run_case_study(sc: &Scenario, csv: &CsvOut) -> Result<RunOutcome> {
    let counts = if sc.table_measurements.is_empty() { vec![3] } else { sc.table_measurements.clone() };
    let table = refined_estimates(sc.network.agents(), &sc.y_star, &counts, &sc.experiment, sc.seed())?;
    let base = table
        .rows
        .iter()
        .find(|r| r.measurements <= 3)
        .map(|r| r.agents.clone())
        .unwrap_or_else(|| table.rows[0].agents.clone());
    write_experiments(csv, &table.agents)?;
    write_estimates(csv, &base)?;

    let relations = sc.network.relations()?;
    let true_m: f64 = relations.iter().zip(sc.y_star.iter()).map(|(r, y)| r.kstar(*y)).sum();
    let mut rows = Vec::new();
    let mut alphas = Vec::new();
    for r in &table.rows {
        let pe = uniform_gain_from_estimates(&sc.network, r.agents.clone(), sc.epsilon, MMode::PerEdge)?;
        let eu = uniform_gain_from_estimates(&sc.network, r.agents.clone(), sc.epsilon, MMode::Euclidean)?;
        rows.push(vec![
            r.measurements.to_string(),
            fmt_num(pe.report.m_hat),
            fmt_num(pe.alpha),
            fmt_num(eu.alpha),
            fmt_num((pe.report.m_hat - true_m) / true_m),
        ]);
        alphas.push(pe.alpha);
    }
    csv.write(
        "table.csv",
        &cols(&["measurements", "m_hat", "alpha_per_edge", "alpha_euclidean", "relative_error"]),
        &rows,
    )?;

    let (goal_met, synthesis) = synthesize_and_check(sc, csv, base)?;
    let (halted, iteration) = iterate_and_write(sc, csv)?;
    Ok(RunOutcome {
        passed: goal_met && halted,
        summary: json!({
            "true_m": true_m,
            "table_alpha_per_edge": alphas,
            "synthesis": synthesis,
            "iteration": iteration,
        }),
    })
}

struct Check {
    name: &'static str,
    value: f64,
    tolerance: f64,
    passed: bool,
}

fn check(name: &'static str, value: f64, tolerance: f64) -> Check {
    Check { name, value, tolerance, passed: value <= tolerance }
}

fn distance_squared(p: &SteadyStateProblem, zeta_star: &DVector<f64>) -> Result<f64> {
    let y = p.solve(&SolverOptions { tol: 1e-13, max_iter: 500 })?;
    Ok((p.incidence.relative(&y) - zeta_star).norm_squared())
}

fn run_verify(sc: &Scenario, csv: &CsvOut) -> Result<RunOutcome> {
    let gains = sc.uniform_or_configured_gains();
    let problem = sc.network.steady_state_problem(&gains)?;
    let y = problem.solve(&SolverOptions::default())?;
    let mut checks = vec![check("stationarity_residual", problem.residual(&y), 1e-8)];

    let params = SimParams { dt: stable_dt(&sc.network, &gains, sc.sim.dt), tol: sc.sim.tol.min(1e-6), ..sc.sim };
    let run = simulate_to_steady_state(&sc.network, &gains, &sc.x0, sc.eta0.as_ref(), &params)?;
    let (mut ys, mut yo) = (run.y.clone(), y.clone());
    if problem.agents.iter().all(|r| r.is_null()) {
        ys.add_scalar_mut(-run.y.mean());
        yo.add_scalar_mut(-y.mean());
    }
    let gap = if run.converged { (ys - yo).amax() } else { f64::INFINITY };
    checks.push(check("oracle_vs_simulation", gap, 1e-3));

    let zeta = problem.incidence.relative(&y);
    let mu = problem.controller_outputs(&zeta);
    let u = -problem.incidence.apply(&gains.component_mul(&mu));
    checks.push(check("duality_gap", duality_gap(&problem, &y, &zeta, &u, &mu)?.abs(), 1e-6));

    let mut fenchel: f64 = 0.0;
    for (rel, yi) in problem.agents.iter().zip(y.iter()) {
        for k in -5..=5 {
            let v = yi + 0.5 * k as f64;
            let ui = rel.inverse(v);
            let r = rel.potential(ui) + rel.kstar(v) - ui * v;
            fenchel = fenchel.max(if r.is_nan() { f64::INFINITY } else { r.abs() });
        }
    }
    checks.push(check("fenchel_residual", fenchel, 1e-5));

    match gradient_at(&problem, &y, &sc.zeta_star) {
        Ok(report) => {
            let mut fd = DVector::zeros(gains.len());
            for e in 0..gains.len() {
                let step = 1e-4 * gains[e];
                let mut plus = gains.clone();
                let mut minus = gains.clone();
                plus[e] += step;
                minus[e] -= step;
                let fp = distance_squared(&problem.with_gains(plus)?, &sc.zeta_star)?;
                let fm = distance_squared(&problem.with_gains(minus)?, &sc.zeta_star)?;
                fd[e] = (fp - fm) / (2.0 * step);
            }
            let scale = fd.norm().max(1e-12);
            let rel = if report.distance < 1e-8 { 0.0 } else { (&report.gradient - &fd).norm() / scale };
            checks.push(check("gradient_vs_finite_difference", rel, 1e-4));
            checks.push(check("descent_inner_product", report.direction.dot(&report.gradient), 0.0));
        }
        Err(Error::SingularSensitivity { .. }) => {}
        Err(e) => return Err(e),
    }

    let mut rel_err: f64 = 0.0;
    for (i, (agent, rel)) in sc.network.agents().iter().zip(&problem.agents).enumerate() {
        let y_ref = sc.y_star[i] + 1.0;
        let rec = closed_loop_experiment(agent, i, 1.0, y_ref, &sc.experiment.sim)?;
        let err = if rec.converged {
            (rel.inverse(rec.y_ss) - rec.u_ss).abs() / rec.u_ss.abs().max(1.0)
        } else {
            f64::INFINITY
        };
        rel_err = rel_err.max(err);
    }
    checks.push(check("experiment_on_relation", rel_err, 1e-4));

    let pairs: Vec<_> = (0..=4).map(|k| crate::synthesis::SteadyStatePair::new(k as f64, k as f64)).collect();
    let chain = estimate_mi_chain(&pairs, 4.0)?;
    checks.push(check("chain_bound_sanity", (chain - 10.0).abs(), 1e-12));

    let rows: Vec<Vec<String>> = checks
        .iter()
        .map(|c| vec![c.name.to_string(), fmt_num(c.value), fmt_num(c.tolerance), c.passed.to_string()])
        .collect();
    csv.write("verify.csv", &cols(&["check", "value", "tolerance", "passed"]), &rows)?;
    let passed = checks.iter().all(|c| c.passed);
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
    Ok(RunOutcome { passed, summary: json!({ "checks": checks.len(), "failed": failed }) })
}
