//! Data-driven gain synthesis: bounds on each agent's `m_i` from measured
//! steady-state pairs, the uniform-gain procedure, the iterative multi-gain
//! scheme and the slow ramp.

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::IncidenceMatrix;
use crate::relations::{direction_at, MonotoneRelation, SolverOptions};
use crate::simulation::{closed_loop_experiment, simulate_to_steady_state, ExperimentRecord, Network, SimParams};
use crate::systems::{Agent, StaticController};

/// Measured or exact steady-state input-output pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SteadyStatePair {
    pub u: f64,
    pub y: f64,
}

impl SteadyStatePair {
    pub fn new(u: f64, y: f64) -> Self {
        Self { u, y }
    }
}

impl From<&ExperimentRecord> for SteadyStatePair {
    fn from(r: &ExperimentRecord) -> Self {
        Self { u: r.u_ss, y: r.y_ss }
    }
}

/// Positive edge gains.
pub type GainVector = DVector<f64>;

fn check_finite(pairs: &[SteadyStatePair]) -> Result<()> {
    if pairs.iter().any(|p| !p.u.is_finite() || !p.y.is_finite()) {
        return Err(Error::InconsistentMeasurements("non-finite pair".into()));
    }
    Ok(())
}

/// `u* (y* - y0)` from the pair at the target and a zero-input pair.
pub fn estimate_mi_two_point(pair_star: SteadyStatePair, pair_zero: SteadyStatePair) -> Result<f64> {
    check_finite(&[pair_star, pair_zero])?;
    if pair_zero.u.abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("zero-input pair has u = {}", pair_zero.u)));
    }
    Ok(pair_star.u * (pair_star.y - pair_zero.y))
}

/// Rejects pairs that no nondecreasing relation can pass through.
fn check_consistent(pairs: &[SteadyStatePair]) -> Result<()> {
    for (i, p) in pairs.iter().enumerate() {
        for q in &pairs[i + 1..] {
            if (p.u < q.u && p.y > q.y) || (p.u > q.u && p.y < q.y) {
                return Err(Error::InconsistentMeasurements(format!(
                    "pairs ({}, {}) and ({}, {}) violate monotonicity",
                    p.u, p.y, q.u, q.y
                )));
            }
        }
    }
    Ok(())
}

/// Chain bound in a frame where `y* >= y0`; `None` when the pairs do not
/// bracket both ends there.
fn chain_upper(sorted: &[SteadyStatePair], y_star: f64) -> Option<f64> {
    let bottom = sorted.iter().rposition(|p| p.u <= 0.0)?;
    let top = sorted.iter().position(|p| p.y >= y_star)?;
    if top <= bottom {
        return None;
    }
    let mut bound = 0.0;
    for k in bottom + 1..top {
        bound += sorted[k].u * (sorted[k].y - sorted[k - 1].y);
    }
    Some(bound + sorted[top].u * (y_star - sorted[top - 1].y))
}

/// Upper bound on `m_i = K*(y*) - K*(y0)` from any set of measured pairs.
///
/// The pairs are sorted by output. The last pair with `u <= 0` lower-bounds
/// `y0`, the first pair with `y >= y*` upper-bounds `u*`, and every pair in
/// between adds one step of an upper Riemann sum of `k^{-1}`. When `y*` lies
/// below `y0` the same sum is taken in the reflected frame `(-u, -y)`. If no
/// pair tells which side of `y0` the target is on, both frames are evaluated
/// and the larger bound is returned.
pub fn estimate_mi_chain(pairs: &[SteadyStatePair], y_star: f64) -> Result<f64> {
    check_finite(pairs)?;
    if !y_star.is_finite() {
        return Err(Error::InvalidArgument("non-finite y*".into()));
    }
    check_consistent(pairs)?;
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| a.y.total_cmp(&b.y).then(a.u.total_cmp(&b.u)));
    let mut reflected: Vec<SteadyStatePair> = sorted.iter().rev().map(|p| SteadyStatePair::new(-p.u, -p.y)).collect();
    reflected.sort_by(|a, b| a.y.total_cmp(&b.y).then(a.u.total_cmp(&b.u)));
    let direct = chain_upper(&sorted, y_star);
    let mirrored = chain_upper(&reflected, -y_star);
    // A pair with u >= 0 at or below y* puts y0 below y*, and vice versa.
    let y0_below = pairs.iter().any(|p| p.u >= 0.0 && p.y <= y_star);
    let y0_above = pairs.iter().any(|p| p.u <= 0.0 && p.y >= y_star);
    let bound = if y0_below {
        direct
    } else if y0_above {
        mirrored
    } else {
        direct.zip(mirrored).map(|(d, r)| d.max(r))
    };
    bound
        .ok_or_else(|| Error::InconsistentMeasurements("pairs do not bracket both the zero-input output and y*".into()))
}

/// Brackets and bound produced from the three experiment pairs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThreePointEstimate {
    pub m_hat: f64,
    pub y0_bracket: (f64, f64),
    pub u_star_bracket: (f64, f64),
}

/// Bracket logic on the three measured pairs: sorts inputs and outputs,
/// brackets `y0` and `u*`, and returns the worst corner of `u (y* - y)`.
pub fn algorithm1_from_pairs(pairs: [SteadyStatePair; 3], y_star: f64) -> Result<ThreePointEstimate> {
    check_finite(&pairs)?;
    check_consistent(&pairs)?;
    let mut us: Vec<f64> = pairs.iter().map(|p| p.u).collect();
    let mut ys: Vec<f64> = pairs.iter().map(|p| p.y).collect();
    us.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let y0_bracket = if us[1] > 0.0 { (ys[0], ys[1]) } else { (ys[1], ys[2]) };
    let u_star_bracket = if ys[1] > y_star { (us[0], us[1]) } else { (us[1], us[2]) };
    if y0_bracket.1 < y0_bracket.0 || u_star_bracket.1 < u_star_bracket.0 {
        return Err(Error::InconsistentMeasurements("bracket inverted".into()));
    }
    let mut m_hat = f64::NEG_INFINITY;
    for w in [u_star_bracket.0, u_star_bracket.1] {
        for v in [y0_bracket.0, y0_bracket.1] {
            m_hat = m_hat.max(w * (y_star - v));
        }
    }
    Ok(ThreePointEstimate { m_hat, y0_bracket, u_star_bracket })
}

/// Experiment settings for the three-experiment estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExperimentOptions {
    /// Small feedback gain; the first two references are `+-1/beta_small`.
    pub beta_small: f64,
    /// Gain of the third experiment.
    pub beta_large: f64,
    /// Third reference is `y* +- ref_offset * max(1, |y*|)`.
    pub ref_offset: f64,
    /// Gain of the refining experiments.
    pub beta_refine: f64,
    pub sim: SimParams,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        Self { beta_small: 0.01, beta_large: 1.0, ref_offset: 10.0, beta_refine: 10.0, sim: SimParams::experiment() }
    }
}

fn run_experiment(agent: &Agent, id: usize, beta: f64, y_ref: f64, sim: &SimParams) -> Result<ExperimentRecord> {
    let rec = closed_loop_experiment(agent, id, beta, y_ref, sim)?;
    if !rec.converged {
        return Err(Error::ExperimentNotConverged { t_max: sim.t_max });
    }
    Ok(rec)
}

/// Three-experiment estimate for one agent.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgentExperiments {
    pub estimate: ThreePointEstimate,
    pub records: Vec<ExperimentRecord>,
}

/// Runs the two small-gain experiments and the third one on the side of
/// `y*` they leave uncovered, then bounds `m_i`.
pub fn algorithm1_estimate_mi(
    agent: &Agent,
    agent_id: usize,
    y_star: f64,
    opts: &ExperimentOptions,
) -> Result<AgentExperiments> {
    if !(opts.beta_small > 0.0) || !(opts.beta_large > 0.0) {
        return Err(Error::InvalidArgument("experiment gains must be positive".into()));
    }
    let r = 1.0 / opts.beta_small;
    let plus = run_experiment(agent, agent_id, opts.beta_small, r, &opts.sim)?;
    let minus = run_experiment(agent, agent_id, opts.beta_small, -r, &opts.sim)?;
    let offset = opts.ref_offset * y_star.abs().max(1.0);
    let third_ref = if plus.y_ss < y_star { y_star + offset } else { y_star - offset };
    let third = run_experiment(agent, agent_id, opts.beta_large, third_ref, &opts.sim)?;
    let records = vec![plus, minus, third];
    let estimate = algorithm1_from_pairs([(&records[1]).into(), (&records[0]).into(), (&records[2]).into()], y_star)?;
    Ok(AgentExperiments { estimate, records })
}

/// Exact `m_i = y*^2 u / (2 y)` for a first-order LTI agent from one pair.
pub fn estimate_mi_lti(pair: SteadyStatePair, y_star: f64) -> Result<f64> {
    check_finite(&[pair])?;
    if y_star == 0.0 || (pair.u == 0.0 && pair.y == 0.0) {
        return Ok(0.0);
    }
    if pair.y == 0.0 || pair.u == 0.0 {
        return Err(Error::LtiHypothesis(format!(
            "pair ({}, {}) does not determine a finite positive slope",
            pair.u, pair.y
        )));
    }
    Ok(y_star * y_star * pair.u / (2.0 * pair.y))
}

/// How `M` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MMode {
    /// Minimum of `Gamma` over the `epsilon`-sphere around `zeta*` in `Im(E^T)`.
    Euclidean,
    /// Sum over edges of the minimum of `Gamma_e` at `zeta*_e +- epsilon`.
    PerEdge,
}

impl MMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            MMode::Euclidean => "euclidean",
            MMode::PerEdge => "per-edge",
        }
    }
}

impl std::str::FromStr for MMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(MMode::Euclidean),
            "per-edge" | "per_edge" => Ok(MMode::PerEdge),
            other => Err(Error::InvalidArgument(format!("unknown M mode `{other}`"))),
        }
    }
}

fn total_potential(controllers: &[StaticController], zeta: &DVector<f64>) -> f64 {
    controllers.iter().zip(zeta.iter()).map(|(c, z)| c.potential(*z)).sum()
}

/// `M` for the given controllers, target and tolerance.
pub fn compute_m(
    controllers: &[StaticController],
    zeta_star: &DVector<f64>,
    epsilon: f64,
    incidence: &IncidenceMatrix,
    mode: MMode,
) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    if controllers.len() != zeta_star.len() || zeta_star.len() != incidence.num_edges() {
        return Err(Error::DimensionMismatch { expected: incidence.num_edges(), got: zeta_star.len() });
    }
    incidence.validate_formation(zeta_star)?;
    if incidence.rank() == 0 {
        return Err(Error::InvalidGraph("no edge directions: the epsilon-sphere in Im(E^T) is empty".into()));
    }
    match mode {
        MMode::PerEdge => Ok(controllers
            .iter()
            .zip(zeta_star.iter())
            .map(|(c, z)| c.potential(z + epsilon).min(c.potential(z - epsilon)) - c.potential(*z))
            .sum()),
        MMode::Euclidean => Ok(sphere_min(controllers, zeta_star, epsilon, incidence)),
    }
}

/// Multistart projected descent on the unit sphere of `Im(E^T)` coordinates.
fn sphere_min(
    controllers: &[StaticController],
    zeta_star: &DVector<f64>,
    epsilon: f64,
    incidence: &IncidenceMatrix,
) -> f64 {
    let q = incidence.edge_space_basis();
    let r = q.ncols();
    let base = total_potential(controllers, zeta_star);
    let value = |w: &DVector<f64>| total_potential(controllers, &(zeta_star + (q * w) * epsilon)) - base;
    let grad = |w: &DVector<f64>| {
        let zeta = zeta_star + (q * w) * epsilon;
        let g = DVector::from_iterator(zeta.len(), controllers.iter().zip(zeta.iter()).map(|(c, z)| c.output(*z)));
        q.transpose() * g * epsilon
    };
    let mut starts: Vec<DVector<f64>> = Vec::new();
    for k in 0..r.min(16) {
        for sign in [1.0, -1.0] {
            let mut w = DVector::zeros(r);
            w[k] = sign;
            starts.push(w);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..8 {
        let w = DVector::from_fn(r, |_, _| rng.random_range(-1.0..1.0));
        if w.norm() > 1e-6 {
            starts.push(w.normalize());
        }
    }
    let mut best = f64::INFINITY;
    for mut w in starts {
        let mut f = value(&w);
        let mut step = 1.0;
        for _ in 0..5000 {
            let g = grad(&w);
            let tangent = &g - &w * g.dot(&w);
            let gn2 = tangent.norm_squared();
            if gn2.sqrt() <= 1e-13 * (1.0 + f.abs()) {
                break;
            }
            let mut moved = false;
            while step > 1e-16 {
                let cand = (&w - &tangent * step).normalize();
                let fc = value(&cand);
                if fc <= f - 1e-4 * step * gn2 {
                    w = cand;
                    f = fc;
                    moved = true;
                    step *= 2.0;
                    break;
                }
                step *= 0.5;
            }
            if !moved {
                break;
            }
        }
        best = best.min(f);
    }
    best
}

/// True `m_i = K*(y*) - K*(y0)` from a relation.
pub fn true_mi(relation: &MonotoneRelation, y_star: f64) -> f64 {
    relation.kstar(y_star)
}

/// Estimator used by the uniform-gain synthesis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Estimator {
    /// Three experiments per agent and the corner bound.
    ThreeExperiment,
    /// Three experiments plus refining ones up to `measurements` in total,
    /// combined by the chain bound.
    Chain { measurements: usize, seed: u64 },
    /// One experiment per agent, exact for first-order LTI agents.
    Lti,
    /// Exact `m_i` from the agent models.
    Oracle,
}

/// Per-agent row of an estimate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgentEstimate {
    pub agent: usize,
    pub m_hat: f64,
    pub y0_bracket: Option<(f64, f64)>,
    pub u_star_bracket: Option<(f64, f64)>,
    pub records: Vec<ExperimentRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateReport {
    pub agents: Vec<AgentEstimate>,
    pub m_hat: f64,
    pub big_m: f64,
    pub alpha: f64,
    pub mode: MMode,
}

/// Per-agent `m_i` estimates for the chosen estimator.
pub fn estimate_agents(
    agents: &[Agent],
    y_star: &DVector<f64>,
    estimator: Estimator,
    opts: &ExperimentOptions,
) -> Result<Vec<AgentEstimate>> {
    if agents.len() != y_star.len() {
        return Err(Error::DimensionMismatch { expected: agents.len(), got: y_star.len() });
    }
    let mut out = Vec::with_capacity(agents.len());
    for (i, agent) in agents.iter().enumerate() {
        let ys = y_star[i];
        let row = match estimator {
            Estimator::ThreeExperiment => {
                let e = algorithm1_estimate_mi(agent, i, ys, opts)?;
                AgentEstimate {
                    agent: i,
                    m_hat: e.estimate.m_hat,
                    y0_bracket: Some(e.estimate.y0_bracket),
                    u_star_bracket: Some(e.estimate.u_star_bracket),
                    records: e.records,
                }
            }
            Estimator::Chain { measurements, seed } => {
                let (e, records) = chain_experiments(agent, i, ys, measurements, opts, seed)?;
                chain_row(i, ys, &e, records, measurements)?
            }
            Estimator::Lti => {
                let y_ref = ys + opts.ref_offset * ys.abs().max(1.0);
                let rec = run_experiment(agent, i, opts.beta_large, y_ref, &opts.sim)?;
                AgentEstimate {
                    agent: i,
                    m_hat: estimate_mi_lti((&rec).into(), ys)?,
                    y0_bracket: None,
                    u_star_bracket: None,
                    records: vec![rec],
                }
            }
            Estimator::Oracle => {
                let rel =
                    MonotoneRelation::from_agent(agent, crate::systems::DEFAULT_DOMAIN, crate::systems::DEFAULT_GRID)?;
                AgentEstimate {
                    agent: i,
                    m_hat: true_mi(&rel, ys),
                    y0_bracket: None,
                    u_star_bracket: None,
                    records: vec![],
                }
            }
        };
        out.push(row);
    }
    Ok(out)
}

/// Three base experiments plus refining ones up to `total`. Each agent
/// draws its references from its own ChaCha8 stream, so runs with more
/// measurements extend runs with fewer.
fn chain_experiments(
    agent: &Agent,
    i: usize,
    ys: f64,
    total: usize,
    opts: &ExperimentOptions,
    seed: u64,
) -> Result<(ThreePointEstimate, Vec<ExperimentRecord>)> {
    let e = algorithm1_estimate_mi(agent, i, ys, opts)?;
    let mut records = e.records;
    let (lo, hi) = (e.estimate.y0_bracket.0.min(ys), e.estimate.y0_bracket.1.max(ys));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    for _ in records.len()..total {
        let y_ref = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        records.push(run_experiment(agent, i, opts.beta_refine, y_ref, &opts.sim)?);
    }
    Ok((e.estimate, records))
}

fn chain_row(
    i: usize,
    ys: f64,
    e: &ThreePointEstimate,
    records: Vec<ExperimentRecord>,
    measurements: usize,
) -> Result<AgentEstimate> {
    let m_hat = if measurements <= 3 {
        e.m_hat
    } else {
        let pairs: Vec<SteadyStatePair> = records.iter().take(measurements).map(Into::into).collect();
        estimate_mi_chain(&pairs, ys)?
    };
    Ok(AgentEstimate {
        agent: i,
        m_hat,
        y0_bracket: Some(e.y0_bracket),
        u_star_bracket: Some(e.u_star_bracket),
        records: records.into_iter().take(measurements.max(3)).collect(),
    })
}

/// Estimates for one measurement count.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefinementRow {
    pub measurements: usize,
    pub agents: Vec<AgentEstimate>,
}

/// Chain estimates for several measurement counts from one set of
/// experiments.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefinementTable {
    /// Every experiment, at the largest count.
    pub agents: Vec<AgentEstimate>,
    pub rows: Vec<RefinementRow>,
}

/// Runs `max(counts)` experiments per agent once and evaluates the chain
/// bound on each prefix. Counts of three or fewer give the three-experiment
/// bound.
pub fn refined_estimates(
    agents: &[Agent],
    y_star: &DVector<f64>,
    counts: &[usize],
    opts: &ExperimentOptions,
    seed: u64,
) -> Result<RefinementTable> {
    if agents.len() != y_star.len() {
        return Err(Error::DimensionMismatch { expected: agents.len(), got: y_star.len() });
    }
    if counts.is_empty() {
        return Err(Error::InvalidArgument("no measurement counts given".into()));
    }
    let total = counts.iter().copied().max().unwrap_or(3).max(3);
    let runs = agents
        .iter()
        .enumerate()
        .map(|(i, a)| chain_experiments(a, i, y_star[i], total, opts, seed))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(counts.len());
    for &c in counts {
        let agents = runs
            .iter()
            .enumerate()
            .map(|(i, (e, recs))| chain_row(i, y_star[i], e, recs.clone(), c))
            .collect::<Result<Vec<_>>>()?;
        rows.push(RefinementRow { measurements: c, agents });
    }
    let all = runs
        .into_iter()
        .enumerate()
        .map(|(i, (e, recs))| chain_row(i, y_star[i], &e, recs, total))
        .collect::<Result<Vec<_>>>()?;
    Ok(RefinementTable { agents: all, rows })
}

/// Output of the uniform-gain synthesis.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UniformGain {
    pub alpha: f64,
    pub report: EstimateReport,
    pub gains: Vec<f64>,
}

/// Formation target of a network's controllers, checked against `Im(E^T)`.
pub fn formation_target(net: &Network) -> Result<DVector<f64>> {
    let controllers = net.static_controllers()?;
    let zs = DVector::from_iterator(controllers.len(), controllers.iter().map(|c| c.target()));
    net.incidence().validate_formation(&zs)?;
    Ok(zs)
}

/// Default `y*`: the minimum-norm solution of `E^T y = zeta*`.
pub fn default_y_star(net: &Network, zeta_star: &DVector<f64>) -> Result<DVector<f64>> {
    net.incidence().min_norm_preimage(zeta_star)
}

/// `alpha = m_hat / M` for already estimated agents.
pub fn uniform_gain_from_estimates(
    net: &Network,
    agents: Vec<AgentEstimate>,
    epsilon: f64,
    mode: MMode,
) -> Result<UniformGain> {
    let zeta_star = formation_target(net)?;
    let controllers = net.static_controllers()?;
    let big_m = compute_m(&controllers, &zeta_star, epsilon, net.incidence(), mode)?;
    let m_hat: f64 = agents.iter().map(|a| a.m_hat).sum();
    if !(big_m > 0.0) {
        return Err(Error::InvalidArgument(format!("M = {big_m} is not positive")));
    }
    let alpha = m_hat / big_m;
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!("estimated m = {m_hat} gives a nonpositive gain")));
    }
    Ok(UniformGain {
        alpha,
        gains: vec![alpha; net.num_edges()],
        report: EstimateReport { agents, m_hat, big_m, alpha, mode },
    })
}

/// Uniform gain for practical formation control of `net` towards its
/// controllers' common target.
pub fn algorithm2_uniform_gain(
    net: &Network,
    y_star: Option<&DVector<f64>>,
    epsilon: f64,
    estimator: Estimator,
    mode: MMode,
    opts: &ExperimentOptions,
) -> Result<UniformGain> {
    let zeta_star = formation_target(net)?;
    let y_star = match y_star {
        Some(y) => {
            if y.len() != net.num_agents() {
                return Err(Error::DimensionMismatch { expected: net.num_agents(), got: y.len() });
            }
            let err = (net.incidence().relative(y) - &zeta_star).amax();
            if err > 1e-8 {
                return Err(Error::InvalidArgument(format!("E^T y* differs from zeta* by {err:.3e}")));
            }
            y.clone()
        }
        None => default_y_star(net, &zeta_star)?,
    };
    let agents = estimate_agents(net.agents(), &y_star, estimator, opts)?;
    uniform_gain_from_estimates(net, agents, epsilon, mode)
}

/// Where Algorithm-3 steady states come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum SteadyStateSource {
    Oracle,
    Simulate(SimParams),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub j: usize,
    pub gains: Vec<f64>,
    pub a_norm: f64,
    /// `||E^T y(a) - zeta*||^2`
    pub f_value: f64,
    /// `||E^T y(a) - zeta*||`
    pub distance: f64,
    pub direction: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct IterationLog {
    pub records: Vec<IterationRecord>,
    pub halted: bool,
}

/// Iterates `a <- a + h v` until `||E^T y(a) - zeta*|| <= epsilon` or
/// `max_iter` updates have been made.
pub fn algorithm3_iterate(
    net: &Network,
    zeta_star: &DVector<f64>,
    epsilon: f64,
    h: f64,
    a0: &GainVector,
    max_iter: usize,
    source: SteadyStateSource,
) -> Result<(GainVector, IterationLog)> {
    if !(h > 0.0) || !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("need h > 0 and epsilon > 0 (h={h}, epsilon={epsilon})")));
    }
    if zeta_star.len() != net.num_edges() {
        return Err(Error::DimensionMismatch { expected: net.num_edges(), got: zeta_star.len() });
    }
    let controllers = net.static_controllers()?;
    let problem = net.steady_state_problem(a0)?;
    let mut a = a0.clone();
    let mut x = DVector::zeros(net.num_agents());
    let mut log = IterationLog::default();
    for j in 0..=max_iter {
        let y = match source {
            SteadyStateSource::Oracle => problem.with_gains(a.clone())?.solve(&SolverOptions::default())?,
            SteadyStateSource::Simulate(params) => {
                let run = simulate_to_steady_state(net, &a, &x, None, &params)?;
                if !run.converged {
                    return Err(Error::ExperimentNotConverged { t_max: params.t_max });
                }
                x = run.state.x.clone();
                run.y
            }
        };
        let zeta = net.incidence().relative(&y);
        let err = &zeta - zeta_star;
        let distance = err.norm();
        let p = problem.with_gains(a.clone())?;
        debug_assert_eq!(p.controllers.len(), controllers.len());
        let v = direction_at(&p, &zeta, zeta_star);
        log.records.push(IterationRecord {
            j,
            gains: a.iter().copied().collect(),
            a_norm: a.norm(),
            f_value: distance * distance,
            distance,
            direction: v.iter().copied().collect(),
        });
        if distance <= epsilon {
            log.halted = true;
            break;
        }
        if j == max_iter {
            break;
        }
        a += &v * h;
        if let Some((e, val)) = a.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
            return Err(Error::NonPositiveGain { edge: e, value: *val });
        }
    }
    Ok((a, log))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RampResult {
    pub alpha: f64,
    pub distance: f64,
    /// `(alpha, ||zeta_ss - zeta*||, converged)` for every tried gain.
    pub tried: Vec<(f64, f64, bool)>,
}

/// Tries each uniform gain of an increasing schedule and returns the first
/// whose simulated steady state is within `epsilon` of `zeta*`.
pub fn slow_ramp(
    net: &Network,
    zeta_star: &DVector<f64>,
    epsilon: f64,
    schedule: &[f64],
    params: &SimParams,
) -> Result<RampResult> {
    if schedule.is_empty() || schedule.iter().any(|a| !(*a > 0.0)) || schedule.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidArgument("schedule must be positive and strictly increasing".into()));
    }
    if zeta_star.len() != net.num_edges() {
        return Err(Error::DimensionMismatch { expected: net.num_edges(), got: zeta_star.len() });
    }
    let mut x = DVector::zeros(net.num_agents());
    let mut tried = Vec::new();
    let mut last = f64::INFINITY;
    for &alpha in schedule {
        let gains = DVector::from_element(net.num_edges(), alpha);
        let run = simulate_to_steady_state(net, &gains, &x, None, params)?;
        x = run.state.x.clone();
        let distance = (&run.zeta - zeta_star).norm();
        tried.push((alpha, distance, run.converged));
        last = distance;
        if run.converged && distance <= epsilon {
            return Ok(RampResult { alpha, distance, tried });
        }
    }
    Err(Error::ScheduleExhausted { last_distance: last })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::UndirectedGraph;
    use crate::systems::LtiAgent;

    fn p(u: f64, y: f64) -> SteadyStatePair {
        SteadyStatePair::new(u, y)
    }

    #[test]
    fn two_point_examples() {
        let b = estimate_mi_two_point(p(3.4268, 1.5), p(0.0, -3.1294)).unwrap();
        assert!((b - 15.864).abs() < 1e-3);
        assert_eq!(estimate_mi_two_point(p(0.0, 1.5), p(0.0, -3.0)).unwrap(), 0.0);
        let b = estimate_mi_two_point(p(1.0, 1.0), p(0.0, 0.0)).unwrap();
        assert!(b >= 0.5);
    }

    #[test]
    fn chain_reduces_to_two_point() {
        let pairs = [p(0.0, -1.0), p(2.0, 1.5)];
        assert_eq!(estimate_mi_chain(&pairs, 1.5).unwrap(), estimate_mi_two_point(pairs[1], pairs[0]).unwrap());
    }

    #[test]
    fn chain_on_unit_lti() {
        let pairs: Vec<_> = [0.0, 0.25, 0.5, 0.75, 1.0].iter().map(|&y| p(y, y)).collect();
        let b = estimate_mi_chain(&pairs, 1.0).unwrap();
        // hand-evaluated Riemann sum: 0.25 * (0.25 + 0.5 + 0.75 + 1.0)
        assert!((b - 0.625).abs() < 1e-12);
        assert!(b >= 0.5 && (b - 0.5) / 0.5 <= 0.25 + 1e-9);
    }

    #[test]
    fn chain_reflected_frame() {
        // k^{-1}(y) = y, y* = -1: m = 1/2
        let pairs: Vec<_> = [-1.0, -0.5, 0.0].iter().map(|&y| p(y, y)).collect();
        let b = estimate_mi_chain(&pairs, -1.0).unwrap();
        assert!((b - 0.75).abs() < 1e-12);
    }

    #[test]
    fn chain_target_below_zero_input_output() {
        // k^-1(y) = y - 2, so y0 = 2 and m = 0.125 at y* = 1.5.
        let ambiguous = estimate_mi_chain(&[p(-1.0, 1.0), p(1.0, 3.0)], 1.5).unwrap();
        assert!((ambiguous - 1.5).abs() < 1e-12);
        let certified = estimate_mi_chain(&[p(-1.0, 1.0), p(-0.25, 1.75), p(1.0, 3.0)], 1.5).unwrap();
        assert!((certified - 0.5625).abs() < 1e-12);
        assert!(certified >= 0.125);
    }

    #[test]
    fn chain_rejects_inconsistent_pairs() {
        let err = estimate_mi_chain(&[p(1.0, 0.0), p(0.0, 1.0)], 0.5).unwrap_err();
        assert_eq!(err.kind(), "inconsistent_measurements");
        let err = estimate_mi_chain(&[p(1.0, 1.0), p(2.0, 2.0)], 3.0).unwrap_err();
        assert_eq!(err.kind(), "inconsistent_measurements");
    }

    #[test]
    fn algorithm1_published_agent() {
        let e = algorithm1_from_pairs([p(0.9947, 0.5203), p(-0.9687, -3.1294), p(3.4268, 3.5732)], 1.5).unwrap();
        assert!((e.m_hat - 15.864).abs() < 1e-3);
        assert_eq!(e.y0_bracket, (-3.1294, 0.5203));
        assert_eq!(e.u_star_bracket, (0.9947, 3.4268));
    }

    #[test]
    fn algorithm1_synthetic_lti() {
        let e = algorithm1_from_pairs([p(1.0, 1.0), p(-1.0, -1.0), p(2.0, 2.0)], 1.0).unwrap();
        assert_eq!(e.y0_bracket, (-1.0, 1.0));
        assert_eq!(e.u_star_bracket, (1.0, 2.0));
        assert_eq!(e.m_hat, 4.0);
    }

    #[test]
    fn algorithm1_on_simulated_vehicle() {
        let agent = Agent::vehicle(1.3, 0.4);
        let e = algorithm1_estimate_mi(&agent, 0, 1.5, &ExperimentOptions::default()).unwrap();
        let rel = MonotoneRelation::from_agent(&agent, (-50.0, 50.0), 2001).unwrap();
        assert!(e.estimate.m_hat >= true_mi(&rel, 1.5));
        assert_eq!(e.records.len(), 3);
    }

    #[test]
    fn algorithm1_target_at_zero_input_output() {
        let agent = Agent::vehicle(1.0, 1.0);
        let e = algorithm1_estimate_mi(&agent, 0, 1.0, &ExperimentOptions::default()).unwrap();
        let rel = MonotoneRelation::from_agent(&agent, (-50.0, 50.0), 2001).unwrap();
        assert!(true_mi(&rel, 1.0).abs() < 1e-9);
        assert!(e.estimate.m_hat >= 0.0);
    }

    #[test]
    fn lti_estimates() {
        assert!((estimate_mi_lti(p(2.0, 1.0), 1.5).unwrap() - 2.25).abs() < 1e-12);
        assert_eq!(estimate_mi_lti(p(2.0, 1.0), 0.0).unwrap(), 0.0);
        assert_eq!(estimate_mi_lti(p(0.0, 0.0), 1.0).unwrap(), 0.0);
        assert_eq!(estimate_mi_lti(p(0.0, 1.0), 1.0).unwrap_err().kind(), "lti_hypothesis");
    }

    #[test]
    fn lti_simulated_experiment() {
        let agent = Agent::from(LtiAgent::with_slope(3.0).unwrap());
        let est =
            estimate_agents(&[agent], &DVector::from_element(1, 1.2), Estimator::Lti, &ExperimentOptions::default())
                .unwrap();
        let exact = 1.5 * 1.2 * 1.2;
        assert!((est[0].m_hat - exact).abs() / exact < 1e-6);
    }

    #[test]
    fn m_examples() {
        let g = UndirectedGraph::cycle(30).unwrap();
        let inc = g.incidence_matrix();
        let ctrl = vec![StaticController::Proportional { target: 0.0, gain: 2.0 }; 30];
        let zs = DVector::zeros(30);
        let per_edge = compute_m(&ctrl, &zs, 0.2, &inc, MMode::PerEdge).unwrap();
        assert!((per_edge - 1.2).abs() < 1e-12);
        let euclid = compute_m(&ctrl, &zs, 0.2, &inc, MMode::Euclidean).unwrap();
        assert!((euclid - 0.04).abs() < 1e-12);
    }

    #[test]
    fn euclidean_m_nonquadratic() {
        // path on 3 vertices, Im(E^T) is all of R^2
        let g = UndirectedGraph::path(3).unwrap();
        let ctrl = vec![
            StaticController::Proportional { target: 0.0, gain: 1.0 },
            StaticController::Proportional { target: 0.0, gain: 4.0 },
        ];
        let m = compute_m(&ctrl, &DVector::zeros(2), 0.5, &g.incidence_matrix(), MMode::Euclidean).unwrap();
        assert!((m - 0.125).abs() < 1e-9);
        let c = vec![StaticController::CubicLinear { target: 0.3, linear: 1.0, cubic: 2.0 }; 2];
        let m = compute_m(&c, &DVector::from_element(2, 0.3), 0.5, &g.incidence_matrix(), MMode::Euclidean).unwrap();
        assert!(m > 0.0);
    }

    #[test]
    fn m_rejects_bad_input() {
        let g = UndirectedGraph::cycle(3).unwrap();
        let ctrl = vec![StaticController::proportional(1.0); 3];
        let err =
            compute_m(&ctrl, &DVector::from_element(3, 1.0), 0.1, &g.incidence_matrix(), MMode::Euclidean).unwrap_err();
        assert_eq!(err.kind(), "not_in_edge_space");
        let ctrl = vec![StaticController::proportional(0.0); 3];
        assert!(compute_m(&ctrl, &DVector::zeros(3), 0.0, &g.incidence_matrix(), MMode::PerEdge).is_err());
    }

    #[test]
    fn published_alpha_arithmetic() {
        assert!((256.3658f64 / 1.2 - 213.638).abs() < 1e-3);
    }

    fn two_lti_net() -> Network {
        let lti = Agent::from(LtiAgent::with_slope(1.0).unwrap());
        Network::with_static(
            UndirectedGraph::path(2).unwrap(),
            vec![lti.clone(), lti],
            vec![StaticController::proportional(1.0)],
        )
        .unwrap()
    }

    #[test]
    fn two_lti_uniform_gain_pipeline() {
        let net = two_lti_net();
        let y_star = DVector::from_vec(vec![0.5, -0.5]);
        let res = algorithm2_uniform_gain(
            &net,
            Some(&y_star),
            0.1,
            Estimator::Oracle,
            MMode::Euclidean,
            &ExperimentOptions::default(),
        )
        .unwrap();
        // m = 2 * 0.5^2 / 2, M = 0.1^2 / 2
        assert!((res.report.m_hat - 0.25).abs() < 1e-9);
        assert!((res.alpha - 50.0).abs() < 1e-6);
        let run = simulate_to_steady_state(
            &net,
            &DVector::from_vec(res.gains.clone()),
            &DVector::zeros(2),
            None,
            &SimParams::network(),
        )
        .unwrap();
        assert!(run.converged);
        assert!((run.zeta[0] - 1.0).abs() <= 0.1);
    }

    #[test]
    fn proportional_iteration_is_linear_in_j() {
        let net = two_lti_net();
        let zs = DVector::from_element(1, 1.0);
        let (_, log) =
            algorithm3_iterate(&net, &zs, 0.05, 0.5, &DVector::from_element(1, 0.1), 100, SteadyStateSource::Oracle)
                .unwrap();
        assert!(log.halted);
        for r in &log.records {
            assert_eq!(r.gains[0], 0.1 + r.j as f64 * 0.5);
            if r.distance > 0.05 {
                assert_eq!(r.direction, vec![1.0]);
            }
        }
        assert!(log.records.windows(2).all(|w| w[1].distance < w[0].distance));
    }

    #[test]
    fn iteration_stops_immediately_when_goal_met() {
        let net = two_lti_net();
        let zs = DVector::from_element(1, 1.0);
        let a0 = DVector::from_element(1, 1000.0);
        let (a, log) = algorithm3_iterate(&net, &zs, 0.01, 1.0, &a0, 10, SteadyStateSource::Oracle).unwrap();
        assert_eq!(a, a0);
        assert_eq!(log.records.len(), 1);
        assert!(log.halted);
    }

    #[test]
    fn ramp_returns_schedule_head_for_integrators() {
        let net = Network::with_static(
            UndirectedGraph::path(3).unwrap(),
            vec![Agent::integrator(); 3],
            vec![StaticController::proportional(1.0), StaticController::proportional(-0.5)],
        )
        .unwrap();
        let zs = DVector::from_vec(vec![1.0, -0.5]);
        let r = slow_ramp(&net, &zs, 0.01, &[1.0, 10.0], &SimParams::network()).unwrap();
        assert_eq!(r.alpha, 1.0);
    }

    #[test]
    fn ramp_exhaustion() {
        let net = two_lti_net();
        let err =
            slow_ramp(&net, &DVector::from_element(1, 1.0), 1e-3, &[1.0, 2.0], &SimParams::network()).unwrap_err();
        assert_eq!(err.kind(), "schedule_exhausted");
    }
}
