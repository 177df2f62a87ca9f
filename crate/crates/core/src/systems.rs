//! Agent and edge-controller models.
//!
//! Agents are SISO systems. Every family exposes a parameterization of its
//! steady-state relation by the equilibrium state `sigma`, which is what the
//! `relations` module builds on.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics;

/// Default sampling domain for relation extraction and the MEIP check.
pub const DEFAULT_DOMAIN: (f64, f64) = (-50.0, 50.0);
pub const DEFAULT_GRID: usize = 2001;
pub const DEFAULT_DIVERGENCE_THRESHOLD: f64 = 1e3;

/// A scalar function of the state with a known (or numerical) derivative.
#[derive(Clone)]
pub enum ScalarFn {
    Constant(f64),
    /// `c * x`
    Linear(f64),
    /// Coefficients in ascending powers.
    Polynomial(Vec<f64>),
    /// `c * |x| * x`
    SignedSquare(f64),
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for ScalarFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScalarFn::Constant(c) => write!(f, "Constant({c})"),
            ScalarFn::Linear(c) => write!(f, "Linear({c})"),
            ScalarFn::Polynomial(c) => write!(f, "Polynomial({c:?})"),
            ScalarFn::SignedSquare(c) => write!(f, "SignedSquare({c})"),
            ScalarFn::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

impl ScalarFn {
    pub fn custom<F: Fn(f64) -> f64 + Send + Sync + 'static>(f: F) -> Self {
        ScalarFn::Custom(Arc::new(f))
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self {
            ScalarFn::Constant(c) => *c,
            ScalarFn::Linear(c) => c * x,
            ScalarFn::Polynomial(coeffs) => coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c),
            ScalarFn::SignedSquare(c) => c * x.abs() * x,
            ScalarFn::Custom(f) => f(x),
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            ScalarFn::Constant(_) => 0.0,
            ScalarFn::Linear(c) => *c,
            ScalarFn::Polynomial(coeffs) => {
                coeffs.iter().enumerate().skip(1).rev().fold(0.0, |acc, (k, c)| acc * x + k as f64 * c)
            }
            ScalarFn::SignedSquare(c) => 2.0 * c * x.abs(),
            ScalarFn::Custom(f) => numerics::central_diff(|s| f(s), x),
        }
    }
}

/// `x' = -f(x) + g(x) u + w`, `y = h(x)`.
#[derive(Debug, Clone)]
pub struct ControlAffineAgent {
    pub f: ScalarFn,
    pub g: ScalarFn,
    pub h: ScalarFn,
    /// Constant exogenous input (the case-study forces).
    pub w: f64,
}

impl ControlAffineAgent {
    pub fn integrator() -> Self {
        Self { f: ScalarFn::Constant(0.0), g: ScalarFn::Constant(1.0), h: ScalarFn::Linear(1.0), w: 0.0 }
    }

    /// Velocity model with quadratic drag `c_d |x| x` and exogenous force `w`.
    pub fn vehicle(c_d: f64, w: f64) -> Self {
        Self { f: ScalarFn::SignedSquare(c_d), g: ScalarFn::Constant(1.0), h: ScalarFn::Linear(1.0), w }
    }

    /// Polynomial drift and output with unit input gain.
    pub fn polynomial(f: Vec<f64>, h: Vec<f64>) -> Self {
        Self { f: ScalarFn::Polynomial(f), g: ScalarFn::Constant(1.0), h: ScalarFn::Polynomial(h), w: 0.0 }
    }

    /// Steady-state input at equilibrium state `sigma`: `(f(sigma) - w) / g(sigma)`.
    fn ss_input(&self, sigma: f64) -> f64 {
        (self.f.eval(sigma) - self.w) / self.g.eval(sigma)
    }

    fn ss_input_derivative(&self, sigma: f64) -> f64 {
        let g = self.g.eval(sigma);
        let f_eff = self.f.eval(sigma) - self.w;
        (self.f.derivative(sigma) * g - f_eff * self.g.derivative(sigma)) / (g * g)
    }
}

/// Stable first-order LTI agent `x' = -a x + b u`, `y = c x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LtiAgent {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl LtiAgent {
    pub fn new(a: f64, b: f64, c: f64) -> Result<Self> {
        if !(a > 0.0) || !(b * c > 0.0) {
            return Err(Error::InvalidArgument(format!("LTI agent needs a > 0 and b*c > 0 (a={a}, b={b}, c={c})")));
        }
        Ok(Self { a, b, c })
    }

    /// Realization with steady-state relation `u = s y`.
    pub fn with_slope(s: f64) -> Result<Self> {
        Self::new(s, 1.0, 1.0)
    }

    /// Steady-state slope `s` in `k^{-1}(y) = s y`.
    pub fn slope(&self) -> f64 {
        self.a / (self.b * self.c)
    }
}

/// Output-feedback passivation: the inner agent sees `u_ext - nu * y`.
#[derive(Debug, Clone)]
pub struct PassivationWrapper {
    pub inner: Agent,
    pub nu: f64,
    pub shortage: f64,
}

impl PassivationWrapper {
    pub fn new(inner: Agent, nu: f64, shortage: f64) -> Result<Self> {
        if shortage < 0.0 {
            return Err(Error::InvalidArgument(format!("negative shortage {shortage}")));
        }
        if !(nu > shortage) {
            return Err(Error::InvalidArgument(format!("feedback gain nu = {nu} must exceed shortage {shortage}")));
        }
        Ok(Self { inner, nu, shortage })
    }
}

/// Wraps `agent` with `nu = shortage + margin`.
pub fn passivize(agent: Agent, shortage: f64, margin: f64) -> Result<PassivationWrapper> {
    if !(margin > 0.0) {
        return Err(Error::InvalidArgument(format!("margin must be positive, got {margin}")));
    }
    PassivationWrapper::new(agent, shortage + margin, shortage)
}

/// Any supported SISO agent.
#[derive(Debug, Clone)]
pub enum Agent {
    ControlAffine(ControlAffineAgent),
    Lti(LtiAgent),
    Passivated(Box<PassivationWrapper>),
}

impl From<ControlAffineAgent> for Agent {
    fn from(a: ControlAffineAgent) -> Self {
        Agent::ControlAffine(a)
    }
}

impl From<LtiAgent> for Agent {
    fn from(a: LtiAgent) -> Self {
        Agent::Lti(a)
    }
}

impl From<PassivationWrapper> for Agent {
    fn from(a: PassivationWrapper) -> Self {
        Agent::Passivated(Box::new(a))
    }
}

impl Agent {
    pub fn integrator() -> Self {
        ControlAffineAgent::integrator().into()
    }

    pub fn vehicle(c_d: f64, w: f64) -> Self {
        ControlAffineAgent::vehicle(c_d, w).into()
    }

    /// State derivative.
    pub fn dynamics(&self, x: f64, u: f64) -> f64 {
        match self {
            Agent::ControlAffine(a) => -a.f.eval(x) + a.g.eval(x) * u + a.w,
            Agent::Lti(a) => -a.a * x + a.b * u,
            Agent::Passivated(p) => p.inner.dynamics(x, u - p.nu * p.inner.output(x)),
        }
    }

    pub fn output(&self, x: f64) -> f64 {
        match self {
            Agent::ControlAffine(a) => a.h.eval(x),
            Agent::Lti(a) => a.c * x,
            Agent::Passivated(p) => p.inner.output(x),
        }
    }

    pub fn output_derivative(&self, x: f64) -> f64 {
        match self {
            Agent::ControlAffine(a) => a.h.derivative(x),
            Agent::Lti(a) => a.c,
            Agent::Passivated(p) => p.inner.output_derivative(x),
        }
    }

    /// Steady-state input that holds the state at `sigma`.
    pub fn steady_input(&self, sigma: f64) -> f64 {
        match self {
            Agent::ControlAffine(a) => a.ss_input(sigma),
            Agent::Lti(a) => a.a * sigma / a.b,
            Agent::Passivated(p) => p.inner.steady_input(sigma) + p.nu * p.inner.output(sigma),
        }
    }

    pub fn steady_input_derivative(&self, sigma: f64) -> f64 {
        match self {
            Agent::ControlAffine(a) => a.ss_input_derivative(sigma),
            Agent::Lti(a) => a.a / a.b,
            Agent::Passivated(p) => p.inner.steady_input_derivative(sigma) + p.nu * p.inner.output_derivative(sigma),
        }
    }

    /// State whose output equals `y`, when the output map is increasing.
    pub fn state_for_output(&self, y: f64) -> Option<f64> {
        match self {
            Agent::ControlAffine(ControlAffineAgent { h: ScalarFn::Linear(c), .. }) if *c > 0.0 => Some(y / c),
            Agent::Lti(a) => Some(y / a.c),
            Agent::Passivated(p) => p.inner.state_for_output(y),
            _ => {
                let h = |s: f64| self.output(s);
                let (lo, hi) = numerics::expand_bracket(&h, y, 0.0, 1e8)?;
                Some(numerics::bisect_lower(h, y, lo, hi))
            }
        }
    }

    /// Input that `c`-sign-normalizes an LTI realization; `None` for nonlinear agents.
    pub fn as_lti(&self) -> Option<&LtiAgent> {
        match self {
            Agent::Lti(a) => Some(a),
            _ => None,
        }
    }
}

/// Result of a sampled MEIP check. A pass is a numerical certificate on the
/// sampled domain only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MeipVerdict {
    Pass,
    Fail(String),
}

impl MeipVerdict {
    pub fn is_pass(&self) -> bool {
        matches!(self, MeipVerdict::Pass)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MeipCheckOptions {
    pub domain: (f64, f64),
    pub grid: usize,
    pub divergence_threshold: f64,
    pub strict_tol: f64,
}

impl Default for MeipCheckOptions {
    fn default() -> Self {
        Self {
            domain: DEFAULT_DOMAIN,
            grid: DEFAULT_GRID,
            divergence_threshold: DEFAULT_DIVERGENCE_THRESHOLD,
            strict_tol: 1e-12,
        }
    }
}

/// Divergence proxy at both ends of the sampled domain: either the magnitude
/// passes the threshold, or the outer-quarter secant slope keeps at least a
/// tenth of the whole-domain secant slope (rules out saturation).
fn diverges(values: &[f64], sigma: &[f64], threshold: f64) -> bool {
    let n = values.len();
    let q = (n / 4).max(1);
    let full = (values[n - 1] - values[0]) / (sigma[n - 1] - sigma[0]);
    let growing =
        |lo: usize, hi: usize| full > 0.0 && (values[hi] - values[lo]) / (sigma[hi] - sigma[lo]) >= 0.1 * full;
    let left = values[0].abs() >= threshold || growing(0, q);
    let right = values[n - 1].abs() >= threshold || growing(n - 1 - q, n - 1);
    left && right
}

fn grid(domain: (f64, f64), n: usize) -> Vec<f64> {
    (0..n).map(|k| domain.0 + (domain.1 - domain.0) * k as f64 / (n - 1) as f64).collect()
}

fn check_curve(
    sigma: &[f64],
    inputs: &[f64],
    outputs: &[f64],
    opts: &MeipCheckOptions,
    input_label: &str,
) -> MeipVerdict {
    for k in 1..sigma.len() {
        let scale = inputs[k].abs().max(inputs[k - 1].abs()).max(1.0);
        if inputs[k] - inputs[k - 1] < -opts.strict_tol * scale {
            return MeipVerdict::Fail(format!("{input_label} not ascending near x = {}", sigma[k]));
        }
        if outputs[k] - outputs[k - 1] <= opts.strict_tol {
            return MeipVerdict::Fail("h not ascending".into());
        }
    }
    if diverges(inputs, sigma, opts.divergence_threshold) || diverges(outputs, sigma, opts.divergence_threshold) {
        MeipVerdict::Pass
    } else {
        MeipVerdict::Fail("neither f/g nor h appears to diverge".into())
    }
}

/// Sampled check of the control-affine MEIP conditions: `g > 0`, `(f - w)/g`
/// nondecreasing, `h` strictly increasing, and one of them diverging.
pub fn check_meip_control_affine(agent: &ControlAffineAgent, opts: &MeipCheckOptions) -> MeipVerdict {
    if opts.grid < 2 || !(opts.domain.1 > opts.domain.0) {
        return MeipVerdict::Fail("invalid sampling domain".into());
    }
    let sigma = grid(opts.domain, opts.grid);
    let mut inputs = Vec::with_capacity(sigma.len());
    let mut outputs = Vec::with_capacity(sigma.len());
    for &s in &sigma {
        let (f, g, h) = (agent.f.eval(s), agent.g.eval(s), agent.h.eval(s));
        if !f.is_finite() || !g.is_finite() || !h.is_finite() {
            return MeipVerdict::Fail("non-finite".into());
        }
        if g <= 0.0 {
            return MeipVerdict::Fail(format!("g not positive at x = {s}"));
        }
        inputs.push((f - agent.w) / g);
        outputs.push(h);
    }
    check_curve(&sigma, &inputs, &outputs, opts, "f/g")
}

/// MEIP check for any agent through its steady-state curve.
pub fn check_meip(agent: &Agent, opts: &MeipCheckOptions) -> MeipVerdict {
    if let Agent::ControlAffine(a) = agent {
        return check_meip_control_affine(a, opts);
    }
    if opts.grid < 2 || !(opts.domain.1 > opts.domain.0) {
        return MeipVerdict::Fail("invalid sampling domain".into());
    }
    let sigma = grid(opts.domain, opts.grid);
    let inputs: Vec<f64> = sigma.iter().map(|&s| agent.steady_input(s)).collect();
    let outputs: Vec<f64> = sigma.iter().map(|&s| agent.output(s)).collect();
    if inputs.iter().chain(&outputs).any(|v| !v.is_finite()) {
        return MeipVerdict::Fail("non-finite".into());
    }
    check_curve(&sigma, &inputs, &outputs, opts, "steady-state input")
}

/// Static, strictly increasing edge controller `mu = psi(zeta)` with
/// `psi(target) = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StaticController {
    /// `mu = gain * (zeta - target)`
    Proportional { target: f64, gain: f64 },
    /// `mu = linear * d + cubic * d^3` with `d = zeta - target`
    CubicLinear { target: f64, linear: f64, cubic: f64 },
}

impl StaticController {
    pub fn proportional(target: f64) -> Self {
        StaticController::Proportional { target, gain: 1.0 }
    }

    pub fn target(&self) -> f64 {
        match *self {
            StaticController::Proportional { target, .. } => target,
            StaticController::CubicLinear { target, .. } => target,
        }
    }

    pub fn with_target(self, target: f64) -> Self {
        match self {
            StaticController::Proportional { gain, .. } => StaticController::Proportional { target, gain },
            StaticController::CubicLinear { linear, cubic, .. } => {
                StaticController::CubicLinear { target, linear, cubic }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            StaticController::Proportional { gain, target } => gain > 0.0 && target.is_finite(),
            StaticController::CubicLinear { linear, cubic, target } => {
                linear > 0.0 && cubic >= 0.0 && target.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("controller {self:?} is not strictly increasing")))
        }
    }

    /// `gamma(zeta)`
    pub fn output(&self, zeta: f64) -> f64 {
        match *self {
            StaticController::Proportional { target, gain } => gain * (zeta - target),
            StaticController::CubicLinear { target, linear, cubic } => {
                let d = zeta - target;
                linear * d + cubic * d * d * d
            }
        }
    }

    pub fn derivative(&self, zeta: f64) -> f64 {
        match *self {
            StaticController::Proportional { gain, .. } => gain,
            StaticController::CubicLinear { target, linear, cubic } => {
                let d = zeta - target;
                linear + 3.0 * cubic * d * d
            }
        }
    }

    /// Integral function `Gamma`, zero at the target.
    pub fn potential(&self, zeta: f64) -> f64 {
        match *self {
            StaticController::Proportional { target, gain } => {
                let d = zeta - target;
                0.5 * gain * d * d
            }
            StaticController::CubicLinear { target, linear, cubic } => {
                let d2 = (zeta - target).powi(2);
                0.5 * linear * d2 + 0.25 * cubic * d2 * d2
            }
        }
    }

    /// `gamma^{-1}(mu)`
    pub fn inverse(&self, mu: f64) -> f64 {
        match *self {
            StaticController::Proportional { target, gain } => target + mu / gain,
            StaticController::CubicLinear { target, .. } => {
                let f = |z: f64| self.output(z);
                let (lo, hi) = numerics::expand_bracket(&f, mu, target, 1e12).unwrap_or((target, target));
                numerics::bisect_lower(f, mu, lo, hi)
            }
        }
    }

    /// Conjugate `Gamma^*(mu) = zeta mu - Gamma(zeta)` at `zeta = gamma^{-1}(mu)`.
    pub fn conjugate(&self, mu: f64) -> f64 {
        match *self {
            StaticController::Proportional { target, gain } => mu * target + mu * mu / (2.0 * gain),
            StaticController::CubicLinear { .. } => {
                let z = self.inverse(mu);
                z * mu - self.potential(z)
            }
        }
    }
}

/// Edge controller: static map or the integrator `eta' = zeta, mu = eta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EdgeController {
    Static(StaticController),
    Integrator,
}

impl EdgeController {
    pub fn as_static(&self) -> Option<&StaticController> {
        match self {
            EdgeController::Static(c) => Some(c),
            EdgeController::Integrator => None,
        }
    }
}

impl From<StaticController> for EdgeController {
    fn from(c: StaticController) -> Self {
        EdgeController::Static(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dynamics_examples() {
        assert_eq!(Agent::integrator().dynamics(3.0, 2.0), 2.0);
        assert_eq!(Agent::vehicle(1.0, 0.0).dynamics(2.0, 0.0), -4.0);
        assert_eq!(Agent::vehicle(1.0, 2.0).dynamics(0.0, 0.0), 2.0);
        let lti = Agent::from(LtiAgent::with_slope(2.0).unwrap());
        assert_eq!(lti.dynamics(1.0, 2.0), 0.0);
    }

    #[test]
    fn polynomial_derivatives() {
        let p = ScalarFn::Polynomial(vec![1.0, -2.0, 0.0, 3.0]);
        assert_eq!(p.eval(2.0), 1.0 - 4.0 + 24.0);
        assert_eq!(p.derivative(2.0), -2.0 + 36.0);
        let c = ScalarFn::custom(|x| x * x);
        assert!((c.derivative(3.0) - 6.0).abs() < 1e-8);
    }

    #[test]
    fn meip_vehicle_passes() {
        let opts = MeipCheckOptions::default();
        for (c_d, w) in [(1.0, 0.0), (0.1, -2.0), (10.0, 1.7)] {
            assert_eq!(check_meip_control_affine(&ControlAffineAgent::vehicle(c_d, w), &opts), MeipVerdict::Pass);
        }
    }

    #[test]
    fn meip_integrator_passes_through_output_branch() {
        let opts = MeipCheckOptions::default();
        assert!(check_meip_control_affine(&ControlAffineAgent::integrator(), &opts).is_pass());
    }

    #[test]
    fn meip_failures() {
        let opts = MeipCheckOptions::default();
        let mut a = ControlAffineAgent::integrator();
        a.h = ScalarFn::Linear(-1.0);
        assert_eq!(check_meip_control_affine(&a, &opts), MeipVerdict::Fail("h not ascending".into()));

        let mut a = ControlAffineAgent::integrator();
        a.f = ScalarFn::custom(|x| x.atan());
        a.h = ScalarFn::custom(|x| x.tanh());
        assert!(!check_meip_control_affine(&a, &opts).is_pass());

        let mut a = ControlAffineAgent::vehicle(1.0, 0.0);
        a.f = ScalarFn::custom(|x| 1.0 / (x - 0.25));
        assert_eq!(check_meip_control_affine(&a, &opts), MeipVerdict::Fail("non-finite".into()));

        let mut a = ControlAffineAgent::vehicle(1.0, 0.0);
        a.g = ScalarFn::Linear(1.0);
        assert!(!check_meip_control_affine(&a, &opts).is_pass());
    }

    #[test]
    fn passivation_of_unstable_agent() {
        // x' = x + u, y = x has output shortage 1
        let unstable = Agent::from(ControlAffineAgent {
            f: ScalarFn::Linear(-1.0),
            g: ScalarFn::Constant(1.0),
            h: ScalarFn::Linear(1.0),
            w: 0.0,
        });
        assert!(!check_meip(&unstable, &MeipCheckOptions::default()).is_pass());
        let wrapped = Agent::from(passivize(unstable, 1.0, 1.0).unwrap());
        for (x, u) in [(0.5, 0.0), (-2.0, 1.0), (3.0, -4.0)] {
            assert_eq!(wrapped.dynamics(x, u), -x + u);
        }
        for s in [-3.0, 0.0, 2.5] {
            assert_eq!(wrapped.steady_input(s), s);
        }
        assert!(check_meip(&wrapped, &MeipCheckOptions::default()).is_pass());
    }

    #[test]
    fn passivation_shift_and_rejection() {
        let base = Agent::vehicle(1.0, 0.0);
        let wrapped = Agent::from(passivize(base.clone(), 0.0, 0.1).unwrap());
        for s in [-2.0, 0.3, 4.0] {
            assert!((wrapped.steady_input(s) - base.steady_input(s) - 0.1 * s).abs() < 1e-12);
        }
        assert!(check_meip(&wrapped, &MeipCheckOptions::default()).is_pass());
        assert!(PassivationWrapper::new(base.clone(), 0.5, 0.5).is_err());
        assert!(passivize(base.clone(), -0.1, 1.0).is_err());
        assert!(passivize(base, 0.1, 0.0).is_err());
    }

    #[test]
    fn controller_conjugates() {
        let p = StaticController::Proportional { target: 0.5, gain: 2.0 };
        let c = StaticController::CubicLinear { target: -0.3, linear: 1.0, cubic: 0.5 };
        for ctrl in [p, c] {
            for z in [-2.0, -0.3, 0.1, 1.7] {
                let mu = ctrl.output(z);
                assert!((ctrl.inverse(mu) - z).abs() < 1e-9);
                let fenchel = ctrl.potential(z) + ctrl.conjugate(mu) - z * mu;
                assert!(fenchel.abs() < 1e-9, "{fenchel}");
            }
            assert_eq!(ctrl.output(ctrl.target()), 0.0);
            assert_eq!(ctrl.potential(ctrl.target()), 0.0);
        }
    }
}
