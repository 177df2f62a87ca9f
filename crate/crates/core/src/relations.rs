//! Steady-state relations, their integral functions, the network steady-state
//! solver and the gain-gradient machinery.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::graph::{IncidenceMatrix, UndirectedGraph};
use crate::numerics;
use crate::systems::{Agent, ScalarFn, StaticController};

const QUAD_TOL: f64 = 1e-13;
const BRACKET_LIMIT: f64 = 1e8;

#[derive(Clone)]
enum Repr {
    /// Closed form through the agent's equilibrium parameterization.
    Agent(Agent),
    /// Piecewise-linear interpolation of `(y, u)` samples; `cum[k]` holds the
    /// integral of the interpolant from `y[0]` to `y[k]`.
    Sampled { y: Vec<f64>, u: Vec<f64>, cum: Vec<f64> },
    /// Explicit `k^{-1}`.
    Inverse(ScalarFn),
}

/// Single-valued, continuous, monotone steady-state relation, stored through
/// its inverse `k^{-1}: y -> u`.
#[derive(Clone)]
pub struct MonotoneRelation {
    repr: Repr,
    domain: (f64, f64),
    y0: f64,
    null: bool,
}

impl fmt::Debug for MonotoneRelation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match &self.repr {
            Repr::Agent(_) => "agent",
            Repr::Sampled { .. } => "sampled",
            Repr::Inverse(_) => "inverse",
        };
        f.debug_struct("MonotoneRelation")
            .field("kind", &kind)
            .field("domain", &self.domain)
            .field("y0", &self.y0)
            .field("null", &self.null)
            .finish()
    }
}

fn sample_grid(domain: (f64, f64), n: usize) -> Result<Vec<f64>> {
    if n < 2 || !(domain.1 > domain.0) || !domain.0.is_finite() || !domain.1.is_finite() {
        return Err(Error::InvalidArgument(format!("invalid sampling domain {domain:?} with {n} points")));
    }
    Ok((0..n).map(|k| domain.0 + (domain.1 - domain.0) * k as f64 / (n - 1) as f64).collect())
}

fn check_monotone(y: &[f64], u: &[f64]) -> Result<()> {
    for k in 1..y.len() {
        if !(y[k] > y[k - 1]) {
            return Err(Error::NonMonotone(format!(
                "output samples not increasing at index {k} ({} then {})",
                y[k - 1],
                y[k]
            )));
        }
        let scale = u[k].abs().max(u[k - 1].abs()).max(1.0);
        if u[k] - u[k - 1] < -1e-12 * scale {
            return Err(Error::NonMonotone(format!(
                "input decreases from {} to {} while output rises from {} to {}",
                u[k - 1],
                u[k],
                y[k - 1],
                y[k]
            )));
        }
    }
    Ok(())
}

impl MonotoneRelation {
    fn finish(repr: Repr, domain: (f64, f64), null: bool) -> Self {
        let mut rel = Self { repr, domain, y0: 0.0, null };
        rel.y0 = if null { 0.0f64.clamp(domain.0, domain.1) } else { rel.solve_inverse(0.0).unwrap_or(0.0) };
        rel
    }

    /// Relation of an agent, validated on the sampled state domain.
    pub fn from_agent(agent: &Agent, domain: (f64, f64), grid: usize) -> Result<Self> {
        let sigma = sample_grid(domain, grid)?;
        let u: Vec<f64> = sigma.iter().map(|&s| agent.steady_input(s)).collect();
        let y: Vec<f64> = sigma.iter().map(|&s| agent.output(s)).collect();
        if u.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::NonMonotone("non-finite samples".into()));
        }
        check_monotone(&y, &u)?;
        let null = u.iter().all(|v| *v == 0.0);
        Ok(Self::finish(Repr::Agent(agent.clone()), (y[0], y[y.len() - 1]), null))
    }

    /// Piecewise-linear relation through `(y_k, u_k)` samples, extrapolated
    /// linearly beyond the ends.
    pub fn sampled(y: Vec<f64>, u: Vec<f64>) -> Result<Self> {
        if y.len() != u.len() {
            return Err(Error::DimensionMismatch { expected: y.len(), got: u.len() });
        }
        if y.len() < 2 {
            return Err(Error::InvalidArgument("need at least two samples".into()));
        }
        if u.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::NonMonotone("non-finite samples".into()));
        }
        check_monotone(&y, &u)?;
        let mut cum = vec![0.0; y.len()];
        for k in 1..y.len() {
            cum[k] = cum[k - 1] + 0.5 * (u[k] + u[k - 1]) * (y[k] - y[k - 1]);
        }
        let null = u.iter().all(|v| *v == 0.0);
        let domain = (y[0], y[y.len() - 1]);
        Ok(Self::finish(Repr::Sampled { y, u, cum }, domain, null))
    }

    /// Relation given by an explicit nondecreasing `k^{-1}`, checked on a grid
    /// over `domain`.
    pub fn from_inverse(inverse: ScalarFn, domain: (f64, f64), grid: usize) -> Result<Self> {
        let y = sample_grid(domain, grid)?;
        let u: Vec<f64> = y.iter().map(|&v| inverse.eval(v)).collect();
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonMonotone("non-finite samples".into()));
        }
        check_monotone(&y, &u)?;
        let null = u.iter().all(|v| *v == 0.0);
        Ok(Self::finish(Repr::Inverse(inverse), domain, null))
    }

    /// `k^{-1}(y) = slope * y`.
    pub fn linear(slope: f64) -> Result<Self> {
        if !(slope >= 0.0) {
            return Err(Error::NonMonotone(format!("negative slope {slope}")));
        }
        Self::from_inverse(ScalarFn::Linear(slope), (-50.0, 50.0), 3)
    }

    /// Sampled output domain.
    pub fn domain(&self) -> (f64, f64) {
        self.domain
    }

    /// True when `k^{-1}` vanishes identically (integrator agents).
    pub fn is_null(&self) -> bool {
        self.null
    }

    /// Output at zero input; the anchor `K^*(y0) = 0`.
    pub fn zero_input_output(&self) -> f64 {
        self.y0
    }

    /// `k^{-1}(y)`
    pub fn inverse(&self, y: f64) -> f64 {
        match &self.repr {
            Repr::Agent(agent) => match agent.state_for_output(y) {
                Some(s) => agent.steady_input(s),
                None => f64::NAN,
            },
            Repr::Sampled { y: ys, u, .. } => {
                let k = segment(ys, y);
                u[k] + (u[k + 1] - u[k]) * (y - ys[k]) / (ys[k + 1] - ys[k])
            }
            Repr::Inverse(f) => f.eval(y),
        }
    }

    /// Derivative of `k^{-1}` at `y`.
    pub fn inverse_derivative(&self, y: f64) -> f64 {
        match &self.repr {
            Repr::Agent(agent) => match agent.state_for_output(y) {
                Some(s) => agent.steady_input_derivative(s) / agent.output_derivative(s),
                None => f64::NAN,
            },
            Repr::Sampled { y: ys, u, .. } => {
                let k = segment(ys, y);
                (u[k + 1] - u[k]) / (ys[k + 1] - ys[k])
            }
            Repr::Inverse(f) => f.derivative(y),
        }
    }

    /// `\int_a^b k^{-1}(s) ds`
    pub fn kstar_between(&self, a: f64, b: f64) -> f64 {
        if self.null || a == b {
            return 0.0;
        }
        match &self.repr {
            Repr::Agent(agent) => {
                let (Some(sa), Some(sb)) = (agent.state_for_output(a), agent.state_for_output(b)) else {
                    return f64::NAN;
                };
                let tol = QUAD_TOL * (1.0 + (b - a).abs());
                numerics::integrate(|s| agent.steady_input(s) * agent.output_derivative(s), sa, sb, tol)
            }
            Repr::Sampled { y: ys, u, cum } => {
                let prim = |v: f64| {
                    let k = segment(ys, v);
                    let slope = (u[k + 1] - u[k]) / (ys[k + 1] - ys[k]);
                    let d = v - ys[k];
                    cum[k] + u[k] * d + 0.5 * slope * d * d
                };
                prim(b) - prim(a)
            }
            Repr::Inverse(f) => numerics::integrate(|s| f.eval(s), a, b, QUAD_TOL * (1.0 + (b - a).abs())),
        }
    }

    /// `K^*(y)`, anchored at the zero-input output.
    pub fn kstar(&self, y: f64) -> f64 {
        self.kstar_between(self.y0, y)
    }

    fn solve_inverse(&self, u: f64) -> Option<f64> {
        let f = |y: f64| self.inverse(y);
        let center = if self.y0.is_finite() { self.y0 } else { 0.0 };
        let (lo, hi) = numerics::expand_bracket(&f, u, center, BRACKET_LIMIT)?;
        let a = numerics::bisect_lower(f, u, lo, hi);
        let b = numerics::bisect_upper(f, u, lo, hi);
        Some(if b >= a { 0.5 * (a + b) } else { a })
    }

    /// `k(u)`; `None` when `u` lies outside the range of `k^{-1}`. On flat
    /// pieces the midpoint of the preimage is returned.
    pub fn forward(&self, u: f64) -> Option<f64> {
        if self.null {
            return (u == 0.0).then_some(self.y0);
        }
        self.solve_inverse(u)
    }

    /// `K(u) = u k(u) - K^*(k(u))`; `+inf` off the range of `k^{-1}`.
    pub fn potential(&self, u: f64) -> f64 {
        if self.null {
            return if u.abs() <= 1e-9 { 0.0 } else { f64::INFINITY };
        }
        match self.forward(u) {
            Some(y) => u * y - self.kstar(y),
            None => f64::INFINITY,
        }
    }
}

/// Index `k` of the segment `[ys[k], ys[k+1]]` used for `y` (end segments extrapolate).
fn segment(ys: &[f64], y: f64) -> usize {
    let n = ys.len();
    match ys.partition_point(|v| *v <= y) {
        0 => 0,
        p if p >= n => n - 2,
        p => p - 1,
    }
}

/// Relation of `agent` sampled on a state domain.
pub fn relation_from_agent(
    agent: &Agent,
    domain: (f64, f64),
    grid: usize,
) -> Result<(MonotoneRelation, ConvexIntegralFn)> {
    let rel = MonotoneRelation::from_agent(agent, domain, grid)?;
    Ok((rel.clone(), ConvexIntegralFn::Agent(rel)))
}

/// Integral function of a relation: `K`/`K^*` for agents, `Gamma`/`Gamma^*`
/// for static controllers.
#[derive(Debug, Clone)]
pub enum ConvexIntegralFn {
    Agent(MonotoneRelation),
    Controller(StaticController),
}

impl ConvexIntegralFn {
    pub fn value(&self, x: f64) -> f64 {
        match self {
            ConvexIntegralFn::Agent(r) => r.potential(x),
            ConvexIntegralFn::Controller(c) => c.potential(x),
        }
    }

    pub fn conjugate(&self, y: f64) -> f64 {
        match self {
            ConvexIntegralFn::Agent(r) => r.kstar(y),
            ConvexIntegralFn::Controller(c) => c.conjugate(y),
        }
    }

    /// Gradient of the primal function (the owning relation).
    pub fn subgradient(&self, x: f64) -> Option<f64> {
        match self {
            ConvexIntegralFn::Agent(r) => r.forward(x),
            ConvexIntegralFn::Controller(c) => Some(c.output(x)),
        }
    }
}

/// Numerical conjugate `sup_u { u y - f(u) }` over a sampled domain with
/// golden-section refinement.
pub fn legendre_transform<F: Fn(f64) -> f64>(f: F, domain: (f64, f64), grid: usize, y: f64) -> Result<f64> {
    let us = sample_grid(domain, grid)?;
    let objective = |u: f64| {
        let v = u * y - f(u);
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    };
    let vals: Vec<f64> = us.iter().map(|&u| objective(u)).collect();
    let (best, _) = vals.iter().enumerate().fold(
        (0, f64::NEG_INFINITY),
        |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        },
    );
    if !vals[best].is_finite() {
        return Err(Error::InvalidArgument("function is infinite on the whole domain".into()));
    }
    let n = us.len();
    if best == 0 || best == n - 1 {
        return Err(Error::DomainTooSmall { boundary: us[best] });
    }
    let (_, v) = numerics::golden_max(objective, us[best - 1], us[best + 1], 1e-12);
    Ok(v.max(vals[best]))
}

/// Network steady-state problem with positive edge gains.
#[derive(Debug, Clone)]
pub struct SteadyStateProblem {
    pub incidence: IncidenceMatrix,
    pub gains: DVector<f64>,
    pub agents: Vec<MonotoneRelation>,
    pub controllers: Vec<StaticController>,
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 500 }
    }
}

/// Residual level accepted when the line search stalls.
pub const STEADY_STATE_TOL: f64 = 1e-8;

impl SteadyStateProblem {
    pub fn new(
        incidence: IncidenceMatrix,
        gains: DVector<f64>,
        agents: Vec<MonotoneRelation>,
        controllers: Vec<StaticController>,
    ) -> Result<Self> {
        let (n, m) = (incidence.num_vertices(), incidence.num_edges());
        if agents.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: agents.len() });
        }
        if controllers.len() != m {
            return Err(Error::DimensionMismatch { expected: m, got: controllers.len() });
        }
        let p = Self { incidence, gains, agents, controllers };
        p.check_gains(&p.gains)?;
        for c in &p.controllers {
            c.validate()?;
        }
        Ok(p)
    }

    fn check_gains(&self, gains: &DVector<f64>) -> Result<()> {
        if gains.len() != self.incidence.num_edges() {
            return Err(Error::DimensionMismatch { expected: self.incidence.num_edges(), got: gains.len() });
        }
        if let Some((e, v)) = gains.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
            return Err(Error::InvalidArgument(format!("gain a[{e}] = {v} is not positive")));
        }
        Ok(())
    }

    /// Same problem with gains replaced.
    pub fn with_gains(&self, gains: DVector<f64>) -> Result<Self> {
        self.check_gains(&gains)?;
        Ok(Self { gains, ..self.clone() })
    }

    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn num_edges(&self) -> usize {
        self.controllers.len()
    }

    /// Controller targets as an edge vector.
    pub fn targets(&self) -> DVector<f64> {
        DVector::from_iterator(self.num_edges(), self.controllers.iter().map(|c| c.target()))
    }

    /// `gamma(zeta)` edgewise.
    pub fn controller_outputs(&self, zeta: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(zeta.len(), self.controllers.iter().zip(zeta.iter()).map(|(c, z)| c.output(*z)))
    }

    fn agent_inverse(&self, y: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(y.len(), self.agents.iter().zip(y.iter()).map(|(r, v)| r.inverse(*v)))
    }

    /// `k^{-1}(y) + E diag(a) gamma(E^T y)`
    pub fn stationarity(&self, y: &DVector<f64>) -> DVector<f64> {
        let zeta = self.incidence.relative(y);
        let mu_bar = self.gains.component_mul(&self.controller_outputs(&zeta));
        self.agent_inverse(y) + self.incidence.apply(&mu_bar)
    }

    /// `||k^{-1}(y) + E diag(a) gamma(E^T y)||_inf`
    pub fn residual(&self, y: &DVector<f64>) -> f64 {
        self.stationarity(y).amax()
    }

    fn hessian(&self, y: &DVector<f64>) -> DMatrix<f64> {
        let zeta = self.incidence.relative(y);
        let w = DVector::from_iterator(
            zeta.len(),
            self.controllers.iter().zip(zeta.iter()).zip(self.gains.iter()).map(|((c, z), a)| a * c.derivative(*z)),
        );
        let mut h = self.incidence.weighted_laplacian(&w);
        for (i, r) in self.agents.iter().enumerate() {
            h[(i, i)] += r.inverse_derivative(y[i]);
        }
        h
    }

    fn objective_change(&self, y: &DVector<f64>, y_new: &DVector<f64>) -> f64 {
        let agents: f64 = self.agents.iter().enumerate().map(|(i, r)| r.kstar_between(y[i], y_new[i])).sum();
        let z = self.incidence.relative(y);
        let z_new = self.incidence.relative(y_new);
        let edges: f64 = self
            .controllers
            .iter()
            .enumerate()
            .map(|(e, c)| self.gains[e] * (c.potential(z_new[e]) - c.potential(z[e])))
            .sum();
        agents + edges
    }

    fn all_null(&self) -> bool {
        self.agents.iter().all(|r| r.is_null())
    }

    fn warm_start(&self) -> DVector<f64> {
        let n = self.num_agents();
        let targets = self.targets();
        let base = self.incidence.min_norm_preimage(&targets).unwrap_or_else(|_| DVector::zeros(n));
        if self.all_null() || n == 0 {
            return base;
        }
        let total = |c: f64| -> f64 { self.agents.iter().zip(base.iter()).map(|(r, v)| r.inverse(v + c)).sum() };
        match numerics::expand_bracket(&total, 0.0, 0.0, BRACKET_LIMIT) {
            Some((lo, hi)) => {
                let a = numerics::bisect_lower(total, 0.0, lo, hi);
                let b = numerics::bisect_upper(total, 0.0, lo, hi);
                base.add_scalar(0.5 * (a + b.max(a)))
            }
            None => base,
        }
    }

    /// Minimizes `sum K_i^*(y_i) + sum a_e Gamma_e((E^T y)_e)` by damped
    /// Newton steps with Armijo backtracking. With all `k^{-1} = 0` the
    /// consensus shift is pinned to `mean(y) = 0`.
    pub fn solve(&self, opts: &SolverOptions) -> Result<DVector<f64>> {
        let n = self.num_agents();
        let pin = self.all_null();
        let mut y = self.warm_start();
        if pin && n > 0 {
            let mean = y.mean();
            y.add_scalar_mut(-mean);
        }
        let mut grad = self.stationarity(&y);
        let mut res = grad.amax();
        for _ in 0..opts.max_iter {
            if !res.is_finite() {
                return Err(Error::NonConvergence { iterations: 0, residual: res });
            }
            if res <= opts.tol {
                return Ok(y);
            }
            let mut h = self.hessian(&y);
            if pin {
                h.add_scalar_mut(1.0 / n as f64);
            }
            let dir = newton_direction(h, &grad);
            let slope = grad.dot(&dir);
            let mut t = 1.0;
            let mut accepted = None;
            while t > 1e-14 {
                let y_new = &y + &dir * t;
                let g_new = self.stationarity(&y_new);
                let r_new = g_new.amax();
                if r_new.is_finite() {
                    let delta = self.objective_change(&y, &y_new);
                    if delta <= 1e-4 * t * slope || r_new < (1.0 - 1e-4 * t) * res {
                        accepted = Some((y_new, g_new, r_new));
                        break;
                    }
                }
                t *= 0.5;
            }
            match accepted {
                Some((y_new, g_new, r_new)) => {
                    y = y_new;
                    grad = g_new;
                    res = r_new;
                }
                None => break,
            }
        }
        if res <= STEADY_STATE_TOL.max(opts.tol) {
            if pin && n > 0 {
                let mean = y.mean();
                y.add_scalar_mut(-mean);
            }
            return Ok(y);
        }
        Err(Error::NonConvergence { iterations: opts.max_iter, residual: res })
    }
}

fn newton_direction(h: DMatrix<f64>, grad: &DVector<f64>) -> DVector<f64> {
    if let Some(ch) = h.clone().cholesky() {
        return -ch.solve(grad);
    }
    let scale = h.diagonal().amax().max(1.0);
    let mut lambda = 1e-12 * scale;
    for _ in 0..40 {
        let mut reg = h.clone();
        for i in 0..reg.nrows() {
            reg[(i, i)] += lambda;
        }
        if let Some(ch) = reg.cholesky() {
            return -ch.solve(grad);
        }
        lambda *= 10.0;
    }
    -grad.clone()
}

/// Steady-state output vector of the network.
pub fn solve_network_steady_state(p: &SteadyStateProblem) -> Result<DVector<f64>> {
    p.solve(&SolverOptions::default())
}

fn check_identity(lhs: &DVector<f64>, rhs: &DVector<f64>, what: &str) -> Result<()> {
    if lhs.len() != rhs.len() {
        return Err(Error::DimensionMismatch { expected: rhs.len(), got: lhs.len() });
    }
    let scale = 1.0 + lhs.amax().max(rhs.amax());
    let err = (lhs - rhs).amax();
    if err > 1e-9 * scale {
        return Err(Error::ConstraintViolation(format!("{what} (error {err:.3e})")));
    }
    Ok(())
}

/// Optimal potential problem value `sum K^*(y) + sum a_e Gamma_e(zeta_e)`,
/// requiring `zeta = E^T y`.
pub fn opp_objective(p: &SteadyStateProblem, y: &DVector<f64>, zeta: &DVector<f64>) -> Result<f64> {
    check_identity(zeta, &p.incidence.relative(y), "zeta != E^T y")?;
    let agents: f64 = p.agents.iter().zip(y.iter()).map(|(r, v)| r.kstar(*v)).sum();
    let edges: f64 = p.controllers.iter().enumerate().map(|(e, c)| p.gains[e] * c.potential(zeta[e])).sum();
    Ok(agents + edges)
}

/// Optimal flow problem value `sum K(u) + sum a_e Gamma_e^*(mu_e)`, requiring
/// `u = -E diag(a) mu`.
pub fn ofp_objective(p: &SteadyStateProblem, u: &DVector<f64>, mu: &DVector<f64>) -> Result<f64> {
    let mu_bar = p.gains.component_mul(mu);
    check_identity(u, &(-p.incidence.apply(&mu_bar)), "u != -E diag(a) mu")?;
    let agents: f64 = p.agents.iter().zip(u.iter()).map(|(r, v)| r.potential(*v)).sum();
    let edges: f64 = p.controllers.iter().enumerate().map(|(e, c)| p.gains[e] * c.conjugate(mu[e])).sum();
    Ok(agents + edges)
}

/// `OPP + OFP - (u^T y + (a mu)^T zeta)`; nonnegative, zero exactly at
/// steady states.
pub fn duality_gap(
    p: &SteadyStateProblem,
    y: &DVector<f64>,
    zeta: &DVector<f64>,
    u: &DVector<f64>,
    mu: &DVector<f64>,
) -> Result<f64> {
    let opp = opp_objective(p, y, zeta)?;
    let ofp = ofp_objective(p, u, mu)?;
    let mu_bar = p.gains.component_mul(mu);
    Ok(opp + ofp - (u.dot(y) + mu_bar.dot(zeta)))
}

/// Inverse of `diag(k^{-1}'(y)) + E diag(a gamma'(E^T y)) E^T`.
#[derive(Debug, Clone)]
pub struct SensitivityMatrix {
    pub matrix: DMatrix<f64>,
    /// Smallest eigenvalue of `matrix`.
    pub min_eigenvalue: f64,
}

pub fn sensitivity_matrix(p: &SteadyStateProblem, y: &DVector<f64>) -> Result<SensitivityMatrix> {
    let inner = p.hessian(y);
    let eig = inner.symmetric_eigen();
    let max = eig.eigenvalues.amax();
    let min = eig.eigenvalues.min();
    if !(min > 1e-12 * max.max(1.0)) {
        return Err(Error::SingularSensitivity { min_eigenvalue: min });
    }
    let inv = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|l| 1.0 / l));
    let v = &eig.eigenvectors;
    let matrix = v * DMatrix::from_diagonal(&inv) * v.transpose();
    Ok(SensitivityMatrix { matrix, min_eigenvalue: 1.0 / max })
}

/// Everything one steady-state solve yields for the gain update.
#[derive(Debug, Clone)]
pub struct GradientReport {
    pub y: DVector<f64>,
    pub zeta: DVector<f64>,
    /// `||E^T y - zeta*||`
    pub distance: f64,
    /// Gradient of `F(a) = ||E^T y(a) - zeta*||^2`.
    pub gradient: DVector<f64>,
    pub direction: DVector<f64>,
}

/// `v_e = (f_e - zeta*_e) / gamma_e(f_e)`, zero where `|gamma_e(f_e)| <= 1e-12`.
pub fn direction_at(p: &SteadyStateProblem, zeta: &DVector<f64>, zeta_star: &DVector<f64>) -> DVector<f64> {
    let gamma = p.controller_outputs(zeta);
    DVector::from_iterator(
        zeta.len(),
        (0..zeta.len()).map(|e| if gamma[e].abs() > 1e-12 { (zeta[e] - zeta_star[e]) / gamma[e] } else { 0.0 }),
    )
}

/// Gradient and descent direction at the steady state `y`.
pub fn gradient_at(p: &SteadyStateProblem, y: &DVector<f64>, zeta_star: &DVector<f64>) -> Result<GradientReport> {
    if zeta_star.len() != p.num_edges() {
        return Err(Error::DimensionMismatch { expected: p.num_edges(), got: zeta_star.len() });
    }
    let zeta = p.incidence.relative(y);
    let err = &zeta - zeta_star;
    let x = sensitivity_matrix(p, y)?;
    let gamma = p.controller_outputs(&zeta);
    let inner = x.matrix * p.incidence.apply(&err);
    let gradient = -2.0 * gamma.component_mul(&p.incidence.relative(&inner));
    let direction = direction_at(p, &zeta, zeta_star);
    Ok(GradientReport { y: y.clone(), distance: err.norm(), zeta, gradient, direction })
}

/// Solves for the steady state and evaluates gradient and direction there.
pub fn gradient_report(p: &SteadyStateProblem, zeta_star: &DVector<f64>) -> Result<GradientReport> {
    let y = solve_network_steady_state(p)?;
    gradient_at(p, &y, zeta_star)
}

pub fn grad_f(p: &SteadyStateProblem, zeta_star: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(gradient_report(p, zeta_star)?.gradient)
}

pub fn descent_direction(p: &SteadyStateProblem, zeta_star: &DVector<f64>) -> Result<DVector<f64>> {
    let y = solve_network_steady_state(p)?;
    Ok(direction_at(p, &p.incidence.relative(&y), zeta_star))
}

/// Box `(C1, C2)` containing every `y` with `||E^T y - zeta*|| <= c` and
/// `sum k_i^{-1}(y_i) = 0`.
pub fn feasible_box(
    relations: &[MonotoneRelation],
    graph: &UndirectedGraph,
    zeta_star: &DVector<f64>,
    c: f64,
) -> Result<(f64, f64)> {
    let diam = graph.diameter().ok_or_else(|| Error::InvalidGraph("graph is not connected".into()))?;
    if relations.len() != graph.num_vertices() {
        return Err(Error::DimensionMismatch { expected: graph.num_vertices(), got: relations.len() });
    }
    let omega = (c + zeta_star.norm()) * diam as f64;
    let z = relations.iter().map(|r| r.zero_input_output());
    let zmin = z.clone().fold(f64::INFINITY, f64::min);
    let zmax = z.fold(f64::NEG_INFINITY, f64::max);
    Ok((zmin - omega - 1.0, zmax + omega + 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{ControlAffineAgent, LtiAgent};

    fn two_lti(alpha: f64) -> SteadyStateProblem {
        let g = UndirectedGraph::path(2).unwrap();
        SteadyStateProblem::new(
            g.incidence_matrix(),
            DVector::from_element(1, alpha),
            vec![MonotoneRelation::linear(1.0).unwrap(); 2],
            vec![StaticController::proportional(1.0)],
        )
        .unwrap()
    }

    #[test]
    fn lti_relation_and_potential() {
        let agent = Agent::from(LtiAgent::with_slope(2.0).unwrap());
        let (rel, k) = relation_from_agent(&agent, (-50.0, 50.0), 2001).unwrap();
        assert!((rel.inverse(1.5) - 3.0).abs() < 1e-12);
        assert!((rel.kstar(1.5) - 2.25).abs() < 1e-10);
        assert!((k.conjugate(1.5) - 2.25).abs() < 1e-10);
        assert!((rel.forward(3.0).unwrap() - 1.5).abs() < 1e-9);
    }

    #[test]
    fn integrator_relation_is_null() {
        let (rel, _) = relation_from_agent(&Agent::integrator(), (-50.0, 50.0), 2001).unwrap();
        assert!(rel.is_null());
        for y in [-3.0, 0.0, 7.0] {
            assert_eq!(rel.inverse(y), 0.0);
            assert_eq!(rel.kstar(y), 0.0);
        }
        assert_eq!(rel.potential(0.0), 0.0);
        assert_eq!(rel.potential(0.5), f64::INFINITY);
    }

    #[test]
    fn vehicle_relation_quadrature() {
        let (rel, _) = relation_from_agent(&Agent::vehicle(1.0, 0.0), (-50.0, 50.0), 2001).unwrap();
        assert!((rel.inverse(2.0) - 4.0).abs() < 1e-12);
        // independent oracle: closed-form antiderivative |y|^3/3
        assert!((rel.kstar(2.0) - 8.0 / 3.0).abs() < 1e-6);
        assert!((rel.kstar(-1.0) - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn vehicle_with_force_anchor() {
        let (rel, _) = relation_from_agent(&Agent::vehicle(0.5, 2.0), (-50.0, 50.0), 2001).unwrap();
        assert!((rel.zero_input_output() - 2.0).abs() < 1e-9);
        assert!(rel.kstar(rel.zero_input_output()).abs() < 1e-12);
    }

    #[test]
    fn non_monotone_samples_rejected() {
        let err = MonotoneRelation::sampled(vec![0.0, 1.0, 2.0], vec![0.0, 2.0, 1.0]).unwrap_err();
        assert_eq!(err.kind(), "non_monotone");
        let unstable = Agent::from(ControlAffineAgent {
            f: ScalarFn::Linear(-1.0),
            g: ScalarFn::Constant(1.0),
            h: ScalarFn::Linear(1.0),
            w: 0.0,
        });
        assert!(relation_from_agent(&unstable, (-5.0, 5.0), 101).is_err());
    }

    #[test]
    fn sampled_relation_trapezoid() {
        let ys: Vec<f64> = (0..=40).map(|k| -2.0 + 0.1 * k as f64).collect();
        let us: Vec<f64> = ys.iter().map(|y| 3.0 * y).collect();
        let rel = MonotoneRelation::sampled(ys, us).unwrap();
        assert!((rel.inverse(0.55) - 1.65).abs() < 1e-12);
        assert!((rel.kstar(1.0) - 1.5).abs() < 1e-12);
        assert!((rel.inverse(3.0) - 9.0).abs() < 1e-12);
    }

    #[test]
    fn legendre_examples() {
        let v = legendre_transform(|u| 0.5 * u * u, (-50.0, 50.0), 2001, 3.0).unwrap();
        assert!((v - 4.5).abs() < 1e-9);
        let v = legendre_transform(f64::abs, (-50.0, 50.0), 2001, 0.5).unwrap();
        assert!(v.abs() < 1e-9);
        let err = legendre_transform(f64::abs, (-50.0, 50.0), 2001, 1.5).unwrap_err();
        assert_eq!(err.kind(), "domain_too_small");
    }

    #[test]
    fn vehicle_fenchel_identity() {
        let (rel, k) = relation_from_agent(&Agent::vehicle(1.0, 0.3), (-50.0, 50.0), 2001).unwrap();
        for y in [-2.3, -0.4, 0.7, 1.9] {
            let direct = k.conjugate(y);
            let numerical = legendre_transform(|u| k.value(u), (-30.0, 30.0), 4001, y).unwrap();
            assert!((direct - numerical).abs() < 1e-5, "{direct} vs {numerical}");
            let u = rel.inverse(y);
            assert!((k.value(u) + k.conjugate(y) - u * y).abs() < 1e-5);
        }
    }

    #[test]
    fn two_integrators_reach_target() {
        let g = UndirectedGraph::path(2).unwrap();
        for a in [0.1, 1.0, 37.0] {
            let p = SteadyStateProblem::new(
                g.incidence_matrix(),
                DVector::from_element(1, a),
                vec![MonotoneRelation::linear(0.0).unwrap(); 2],
                vec![StaticController::proportional(1.0)],
            )
            .unwrap();
            let y = solve_network_steady_state(&p).unwrap();
            assert!((y[0] - y[1] - 1.0).abs() < 1e-12);
            assert!(y.mean().abs() < 1e-12);
        }
    }

    #[test]
    fn two_lti_closed_form() {
        for (alpha, zeta) in [(0.5, 0.5), (49.5, 0.99)] {
            let p = two_lti(alpha);
            let y = solve_network_steady_state(&p).unwrap();
            assert!((y[0] - y[1] - zeta).abs() < 1e-10);
            assert!((y[0] + y[1]).abs() < 1e-10);
            assert!(p.residual(&y) < 1e-8);
        }
    }

    #[test]
    fn duality_gap_at_and_off_optimum() {
        let p = two_lti(0.5);
        let y = solve_network_steady_state(&p).unwrap();
        let zeta = p.incidence.relative(&y);
        let mu = p.controller_outputs(&zeta);
        let u = -p.incidence.apply(&p.gains.component_mul(&mu));
        assert!(duality_gap(&p, &y, &zeta, &u, &mu).unwrap().abs() < 1e-6);

        let yp = y.add_scalar(0.1);
        let zp = p.incidence.relative(&yp);
        let mup = DVector::from_element(1, -0.3);
        let up = -p.incidence.apply(&p.gains.component_mul(&mup));
        assert!(duality_gap(&p, &yp, &zp, &up, &mup).unwrap() > 0.0);

        assert_eq!(duality_gap(&p, &y, &zeta.add_scalar(1.0), &u, &mu).unwrap_err().kind(), "constraint_violation");
    }

    #[test]
    fn opp_with_integrators_at_target() {
        let g = UndirectedGraph::path(2).unwrap();
        let p = SteadyStateProblem::new(
            g.incidence_matrix(),
            DVector::from_element(1, 3.0),
            vec![MonotoneRelation::linear(0.0).unwrap(); 2],
            vec![StaticController::proportional(1.0)],
        )
        .unwrap();
        let y = DVector::from_vec(vec![0.5, -0.5]);
        let v = opp_objective(&p, &y, &DVector::from_element(1, 1.0)).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn sensitivity_two_lti() {
        let p = two_lti(1.0);
        let y = DVector::from_vec(vec![0.2, -0.2]);
        let x = sensitivity_matrix(&p, &y).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]) / 3.0;
        assert!((x.matrix - expected).amax() < 1e-12);
        assert!((x.min_eigenvalue - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn sensitivity_singular_for_integrators() {
        let g = UndirectedGraph::cycle(3).unwrap();
        let p = SteadyStateProblem::new(
            g.incidence_matrix(),
            DVector::from_element(3, 1.0),
            vec![MonotoneRelation::linear(0.0).unwrap(); 3],
            vec![StaticController::proportional(0.0); 3],
        )
        .unwrap();
        let err = sensitivity_matrix(&p, &DVector::zeros(3)).unwrap_err();
        assert_eq!(err.kind(), "singular_sensitivity");
    }

    #[test]
    fn proportional_direction_is_ones() {
        let p = two_lti(2.0);
        let zs = p.targets();
        let v = descent_direction(&p, &zs).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-12);
        let r = gradient_report(&p, &zs).unwrap();
        assert!(r.direction.dot(&r.gradient) < 0.0);
    }

    #[test]
    fn at_target_direction_and_gradient_vanish() {
        let g = UndirectedGraph::path(2).unwrap();
        let rel = MonotoneRelation::linear(1.0).unwrap();
        let p = SteadyStateProblem::new(
            g.incidence_matrix(),
            DVector::from_element(1, 1.0),
            vec![rel.clone(), rel],
            vec![StaticController::proportional(0.0)],
        )
        .unwrap();
        let r = gradient_report(&p, &DVector::zeros(1)).unwrap();
        assert_eq!(r.direction[0], 0.0);
        assert!(r.gradient.amax() < 1e-14);
    }

    #[test]
    fn feasible_box_from_zero_input_outputs() {
        let g = UndirectedGraph::path(3).unwrap();
        let rels = vec![MonotoneRelation::linear(1.0).unwrap(); 3];
        let zs = DVector::from_vec(vec![3.0, 4.0]);
        let (c1, c2) = feasible_box(&rels, &g, &zs, 1.0).unwrap();
        assert_eq!((c1, c2), (-13.0, 13.0));
    }
}
