//! The inexact primal-dual variants and the exact baselines.
//!
//! Every variant runs through one loop: dual prox at the extrapolated primal
//! point, then a (possibly inexact) primal prox, followed by certificate
//! bookkeeping and the step-size update.

use serde::{Deserialize, Serialize};

use crate::certificates::{self, CertificateAccumulator, DescentCheck, IteratePack, SaddleReference};
use crate::error::{Error, Result};
use crate::grid::{self, RealGrid, Vector};
use crate::operators::{LinearMap, LinearOperatorHandle};
use crate::prox::{ApproxType, DualTerm, InnerSettings, PrimalTerm};

/// Relative slack for the equality and `≤ 1` step conditions.
pub const STEP_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Basic,
    Reduced,
    PrimalAccel,
    DualAccel,
    Smooth,
    ExactPdhg,
    ExactPdhgAccel,
}

impl Variant {
    pub fn is_exact_baseline(self) -> bool {
        matches!(self, Variant::ExactPdhg | Variant::ExactPdhgAccel)
    }

    /// Whether the update rule changes `(τ, σ, θ)` between iterations.
    pub fn is_accelerated(self) -> bool {
        matches!(self, Variant::PrimalAccel | Variant::DualAccel | Variant::ExactPdhgAccel)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepState {
    pub tau: f64,
    pub sigma: f64,
    pub theta: f64,
    pub beta: f64,
    pub variant: Variant,
}

impl StepState {
    pub fn new(variant: Variant, tau: f64, sigma: f64) -> Self {
        Self {
            tau,
            sigma,
            theta: 1.0,
            beta: 0.0,
            variant,
        }
    }
}

fn require_positive(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
    }
    Ok(())
}

/// One step-size update. `gamma` drives the primal rule
/// `θ = 1/√(1+γτ)`, `mu` the dual rule `θ = 1/√(1+2μσ)`.
pub fn update_steps(state: &StepState, gamma: f64, mu: f64) -> Result<StepState> {
    let mut next = *state;
    match state.variant {
        Variant::PrimalAccel | Variant::ExactPdhgAccel => {
            require_positive("primal modulus", gamma)?;
            let theta = 1.0 / (1.0 + gamma * state.tau).sqrt();
            next.theta = theta;
            next.tau = theta * state.tau;
            next.sigma = state.sigma / theta;
        }
        Variant::DualAccel => {
            require_positive("dual modulus", mu)?;
            let theta = 1.0 / (1.0 + 2.0 * mu * state.sigma).sqrt();
            next.theta = theta;
            next.sigma = theta * state.sigma;
            next.tau = state.tau / theta;
        }
        Variant::Basic | Variant::Reduced | Variant::Smooth | Variant::ExactPdhg => {}
    }
    Ok(next)
}

/// Constant steps with `1+γτ = 1+μσ = 1/θ` and `τL_f + τσθ²L² ≤ 1`.
pub fn smooth_step_solve(gamma: f64, mu: f64, l: f64, l_f: f64) -> Result<StepState> {
    require_positive("gamma", gamma)?;
    require_positive("mu", mu)?;
    require_positive("L", l)?;
    if !(l_f >= 0.0 && l_f.is_finite()) {
        return Err(Error::InvalidParameter(format!("L_f must be nonnegative, got {l_f}")));
    }
    let l2 = l * l;
    let r = l_f / gamma;
    let root = (1.0 + 4.0 * l2 / (gamma * mu) + r * r + 2.0 * r).sqrt();
    let num = 1.0 + root - r;
    let tau = num / (2.0 * l_f + 2.0 * l2 / mu);
    let sigma = num / (2.0 * l_f * mu / gamma + 2.0 * l2 / gamma);
    let theta = 1.0 - (root - r - 1.0) / (2.0 * l2 / (gamma * mu));
    let state = StepState {
        tau,
        sigma,
        theta,
        beta: 0.0,
        variant: Variant::Smooth,
    };
    check_smooth_identities(&state, gamma, mu, l, l_f)?;
    Ok(state)
}

fn check_smooth_identities(s: &StepState, gamma: f64, mu: f64, l: f64, l_f: f64) -> Result<()> {
    let inv = 1.0 / s.theta;
    let a = 1.0 + gamma * s.tau;
    let b = 1.0 + mu * s.sigma;
    if (a - inv).abs() > STEP_TOL * inv || (b - inv).abs() > STEP_TOL * inv {
        return Err(Error::StepCondition(format!(
            "smooth steps: 1+γτ = {a}, 1+μσ = {b}, 1/θ = {inv}"
        )));
    }
    let lhs = s.tau * l_f + s.tau * s.sigma * s.theta * s.theta * l * l;
    if lhs > 1.0 + STEP_TOL {
        return Err(Error::StepCondition(format!("smooth steps: τL_f + τσθ²L² = {lhs} > 1")));
    }
    Ok(())
}

/// Parameters the step conditions depend on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepConstants {
    /// Bound on `‖K‖`.
    pub l: f64,
    pub l_f: f64,
    /// Primal acceleration modulus.
    pub gamma: f64,
    /// Dual acceleration modulus as used in `θ = 1/√(1+2μσ)`.
    pub mu_accel: f64,
    /// Dual strong convexity modulus of `h*`.
    pub mu: f64,
}

/// Conditions that involve a single state.
pub fn check_step_state(s: &StepState, c: &StepConstants) -> Result<()> {
    require_positive("tau", s.tau)?;
    require_positive("sigma", s.sigma)?;
    if !(s.theta > 0.0 && s.theta <= 1.0) {
        return Err(Error::StepCondition(format!("theta = {} outside (0, 1]", s.theta)));
    }
    if !c.l.is_finite() {
        return Err(Error::StepCondition("operator norm bound not estimated".into()));
    }
    let l2 = c.l * c.l;
    match s.variant {
        Variant::Basic | Variant::ExactPdhg => {
            let v = s.tau * c.l_f + s.sigma * s.tau * l2 + s.tau * s.beta * c.l;
            if v >= 1.0 {
                return Err(Error::StepCondition(format!("τL_f + στL² + τβL = {v} ≥ 1")));
            }
        }
        Variant::Reduced => {
            if c.l_f != 0.0 {
                return Err(Error::StepCondition("reduced variant requires f = 0".into()));
            }
            let v = s.sigma * s.tau * l2;
            if v >= 1.0 {
                return Err(Error::StepCondition(format!("τσL² = {v} ≥ 1")));
            }
        }
        Variant::PrimalAccel | Variant::ExactPdhgAccel => {
            let v = s.tau * c.l_f + s.tau * s.sigma * l2;
            if v > 1.0 + STEP_TOL {
                return Err(Error::StepCondition(format!("τL_f + τσL² = {v} > 1")));
            }
        }
        Variant::DualAccel => {
            let v = s.tau * s.sigma * s.theta * s.theta * l2;
            if v > 1.0 + STEP_TOL {
                return Err(Error::StepCondition(format!("τσθ²L² = {v} > 1")));
            }
        }
        Variant::Smooth => check_smooth_identities(s, c.gamma, c.mu, c.l, c.l_f)?,
    }
    Ok(())
}

/// Conditions linking consecutive states.
pub fn check_step_transition(prev: &StepState, next: &StepState, c: &StepConstants) -> Result<()> {
    check_step_state(next, c)?;
    let rel = |a: f64, b: f64| (a - b).abs() <= STEP_TOL * b.abs().max(a.abs());
    match prev.variant {
        Variant::PrimalAccel | Variant::ExactPdhgAccel => {
            if !rel(next.theta * next.sigma, prev.sigma) {
                return Err(Error::StepCondition("θ_{n+1}σ_{n+1} ≠ σ_n".into()));
            }
            if (1.0 + c.gamma * prev.tau) * next.tau * next.theta < prev.tau * (1.0 - STEP_TOL) {
                return Err(Error::StepCondition("(1+γτ_n)τ_{n+1}θ_{n+1} < τ_n".into()));
            }
        }
        Variant::DualAccel => {
            if !rel(next.theta * next.tau, prev.tau) {
                return Err(Error::StepCondition("θ_{n+1}τ_{n+1} ≠ τ_n".into()));
            }
            if (1.0 + c.mu * prev.sigma) * next.sigma * next.theta < prev.sigma * (1.0 - STEP_TOL) {
                return Err(Error::StepCondition("(1+μσ_n)σ_{n+1}θ_{n+1} < σ_n".into()));
            }
        }
        _ => {
            if prev != next {
                return Err(Error::StepCondition("constant-step variant changed its steps".into()));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ScheduleKind {
    Zero,
    Polynomial { c: f64, alpha: f64 },
    Geometric { c: f64, q: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleRole {
    PrimalEps,
    DualDelta,
    GradientNorm,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorSchedule {
    pub kind: ScheduleKind,
    pub role: ScheduleRole,
}

impl ErrorSchedule {
    pub fn new(kind: ScheduleKind, role: ScheduleRole) -> Result<Self> {
        match kind {
            ScheduleKind::Zero => {}
            ScheduleKind::Polynomial { c, alpha } => {
                if !(c >= 0.0 && c.is_finite() && alpha > 0.0 && alpha.is_finite()) {
                    return Err(Error::InvalidParameter(format!("polynomial schedule C={c}, α={alpha}")));
                }
            }
            ScheduleKind::Geometric { c, q } => {
                if !(c >= 0.0 && c.is_finite() && q > 0.0 && q < 1.0) {
                    return Err(Error::InvalidParameter(format!("geometric schedule C={c}, q={q}")));
                }
            }
        }
        Ok(Self { kind, role })
    }

    pub fn zero(role: ScheduleRole) -> Self {
        Self {
            kind: ScheduleKind::Zero,
            role,
        }
    }

    pub fn eval(&self, n: usize) -> f64 {
        let n = n as f64;
        match self.kind {
            ScheduleKind::Zero => 0.0,
            ScheduleKind::Polynomial { c, alpha } => c * n.powf(-alpha),
            ScheduleKind::Geometric { c, q } => c * q.powf(n),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self.kind {
            ScheduleKind::Zero => true,
            ScheduleKind::Polynomial { c, .. } | ScheduleKind::Geometric { c, .. } => c == 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedules {
    pub primal_eps: ErrorSchedule,
    pub dual_delta: ErrorSchedule,
    pub gradient_norm: ErrorSchedule,
}

impl Schedules {
    pub fn zero() -> Self {
        Self {
            primal_eps: ErrorSchedule::zero(ScheduleRole::PrimalEps),
            dual_delta: ErrorSchedule::zero(ScheduleRole::DualDelta),
            gradient_norm: ErrorSchedule::zero(ScheduleRole::GradientNorm),
        }
    }

    pub fn with_primal_eps(kind: ScheduleKind) -> Result<Self> {
        Ok(Self {
            primal_eps: ErrorSchedule::new(kind, ScheduleRole::PrimalEps)?,
            ..Self::zero()
        })
    }
}

/// A seeded uniformly random direction scaled to norm `schedule(n)`.
pub fn make_gradient_error(n: usize, schedule: &ErrorSchedule, template: &RealGrid, seed: u64) -> Result<RealGrid> {
    if schedule.role != ScheduleRole::GradientNorm {
        return Err(Error::InvalidParameter("gradient error needs a gradient_norm schedule".into()));
    }
    let target = schedule.eval(n);
    if target == 0.0 {
        return Ok(template.zeros_like());
    }
    let mixed = seed ^ (n as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = grid::seeded_rng(mixed);
    let mut d = grid::random_normal_like(template, &mut rng);
    while grid::norm(&d) == 0.0 {
        d = grid::random_normal_like(template, &mut rng);
    }
    let s = target / grid::norm(&d);
    Ok(grid::scale(s, &d))
}

/// Running weighted mean of primal and dual iterates.
///
/// The mean is updated in place as `M ← M + (w_n/T_n)(x_n − M)`; `T_n` is
/// tracked in log space so that geometric weights cannot overflow the ratio.
#[derive(Clone, Debug)]
pub struct ErgodicAverage<X, Y> {
    x: Option<X>,
    y: Option<Y>,
    log_total: f64,
    count: usize,
}

impl<X: Vector, Y: Vector> Default for ErgodicAverage<X, Y> {
    fn default() -> Self {
        Self::new()
    }
}

impl<X: Vector, Y: Vector> ErgodicAverage<X, Y> {
    pub fn new() -> Self {
        Self {
            x: None,
            y: None,
            log_total: f64::NEG_INFINITY,
            count: 0,
        }
    }

    /// Returns the mixing ratio `w_n/T_n` that was applied.
    pub fn update(&mut self, x: &X, y: &Y, weight: f64) -> Result<f64> {
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(Error::InvalidParameter(format!("ergodic weight must be positive, got {weight}")));
        }
        self.update_log(x, y, weight.ln())
    }

    /// As [`update`](Self::update) with the weight given as `ln w_n`.
    pub fn update_log(&mut self, x: &X, y: &Y, lw: f64) -> Result<f64> {
        if !lw.is_finite() {
            return Err(Error::InvalidParameter(format!("ergodic log-weight must be finite, got {lw}")));
        }
        match (&mut self.x, &mut self.y) {
            (Some(mx), Some(my)) => {
                let ratio = 1.0 / (1.0 + (self.log_total - lw).exp());
                let dx = grid::lincomb(1.0, x, -1.0, mx)?;
                grid::axpy(ratio, &dx, mx)?;
                let dy = grid::lincomb(1.0, y, -1.0, my)?;
                grid::axpy(ratio, &dy, my)?;
                let hi = self.log_total.max(lw);
                self.log_total = hi + ((self.log_total - hi).exp() + (lw - hi).exp()).ln();
                self.count += 1;
                Ok(ratio)
            }
            _ => {
                self.x = Some(x.clone());
                self.y = Some(y.clone());
                self.log_total = lw;
                self.count += 1;
                Ok(1.0)
            }
        }
    }

    pub fn mean_x(&self) -> Option<&X> {
        self.x.as_ref()
    }

    pub fn mean_y(&self) -> Option<&Y> {
        self.y.as_ref()
    }

    /// `T_N = Σ w_n`.
    pub fn total_weight(&self) -> f64 {
        self.log_total.exp()
    }

    pub fn log_total_weight(&self) -> f64 {
        self.log_total
    }

    pub fn count(&self) -> usize {
        self.count
    }
}

/// Ergodic weight of iterate `n` given the step used to produce it.
pub fn ergodic_weight(variant: Variant, n: usize, step_prev: &StepState, step0: &StepState) -> f64 {
    ergodic_log_weight(variant, n, step_prev, step0).exp()
}

/// `ln` of [`ergodic_weight`], finite even where the weight overflows.
pub fn ergodic_log_weight(variant: Variant, n: usize, step_prev: &StepState, step0: &StepState) -> f64 {
    match variant {
        Variant::Basic | Variant::Reduced | Variant::ExactPdhg => 0.0,
        Variant::PrimalAccel | Variant::ExactPdhgAccel => (step_prev.sigma / step0.sigma).ln(),
        Variant::DualAccel => (step_prev.tau / step0.tau).ln(),
        Variant::Smooth => -((n - 1) as f64) * step0.theta.ln(),
    }
}

/// `f(x) = (γ/2)‖x‖²`, gradient `γx`, Lipschitz constant `γ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmoothQuadratic {
    pub gamma: f64,
}

impl SmoothQuadratic {
    pub fn value(&self, x: &RealGrid) -> f64 {
        0.5 * self.gamma * grid::norm_sq(x)
    }

    pub fn gradient(&self, x: &RealGrid) -> RealGrid {
        grid::scale(self.gamma, x)
    }
}

/// `min_x max_y ⟨Kx, y⟩ + f(x) + g(x) − h*(y)`.
pub struct SaddleProblem<K, D> {
    pub op: LinearOperatorHandle<K>,
    pub smooth: Option<SmoothQuadratic>,
    pub primal: PrimalTerm,
    /// Strong convexity modulus of `g`.
    pub primal_modulus: f64,
    pub dual: D,
}

impl<K, D> SaddleProblem<K, D>
where
    K: LinearMap<Domain = RealGrid>,
    D: DualTerm<Space = K::Codomain>,
{
    pub fn l_f(&self) -> f64 {
        self.smooth.map_or(0.0, |s| s.gamma)
    }

    fn f_value(&self, x: &RealGrid) -> f64 {
        self.smooth.map_or(0.0, |s| s.value(x))
    }

    /// `f(x) + g(x) + h(Kx)`.
    pub fn primal_energy(&self, x: &RealGrid) -> Result<f64> {
        let kx = self.op.apply(x)?;
        self.primal_energy_with(x, &kx)
    }

    pub fn primal_energy_with(&self, x: &RealGrid, kx: &K::Codomain) -> Result<f64> {
        Ok(self.f_value(x) + self.primal.value(x) + self.dual.value(kx)?)
    }

    /// `⟨Kx, y⟩ + f(x) + g(x) − h*(y)`.
    pub fn lagrangian(&self, x: &RealGrid, y: &K::Codomain) -> Result<f64> {
        let kx = self.op.apply(x)?;
        self.lagrangian_with(x, &kx, y)
    }

    pub fn lagrangian_with(&self, x: &RealGrid, kx: &K::Codomain, y: &K::Codomain) -> Result<f64> {
        let hs = self.dual.conjugate_value(y)?;
        Ok(grid::inner_product(kx, y)? + self.f_value(x) + self.primal.value(x) - hs)
    }

    pub fn step_constants(&self, accel_mu: f64) -> StepConstants {
        StepConstants {
            l: self.op.norm_bound(),
            l_f: self.l_f(),
            gamma: self.primal_modulus + self.l_f(),
            mu_accel: accel_mu,
            mu: self.dual.modulus(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    WorstCase,
    Practical,
}

impl Mode {
    pub fn inner_settings(self, max_inner: usize) -> InnerSettings {
        match self {
            Mode::WorstCase => InnerSettings {
                max_inner,
                step_scale: 0.25,
                warm_start: false,
            },
            Mode::Practical => InnerSettings {
                max_inner,
                step_scale: 0.99,
                warm_start: true,
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub n_outer: usize,
    pub mode: Mode,
    pub max_inner: usize,
    /// Multiplies the primal schedule to give the inner gap target.
    pub gap_constant: f64,
    /// Lower limit on the inner gap target.
    pub eps_floor: f64,
    pub seed: u64,
    /// Record the per-iteration descent inequality at the reference.
    pub check_descent: bool,
}

impl RunOptions {
    pub fn new(n_outer: usize, mode: Mode, max_inner: usize) -> Self {
        Self {
            n_outer,
            mode,
            max_inner,
            gap_constant: 1.0,
            eps_floor: 1e-14,
            seed: 0,
            check_descent: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub n: usize,
    pub tau: f64,
    pub sigma: f64,
    pub theta: f64,
    pub primal_energy: f64,
    pub ergodic_primal_energy: f64,
    pub lagrangian_gap: Option<f64>,
    pub eps_target: f64,
    pub eps_achieved: f64,
    pub delta_achieved: f64,
    pub grad_error_norm: f64,
    pub inner_iterations: usize,
    pub cumulative_inner_iterations: usize,
    pub inner_converged: bool,
    pub rhs_bound: Option<f64>,
    pub descent: Option<DescentCheck>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub variant: Variant,
    pub seed: u64,
    pub schedules: Schedules,
    pub mode: Mode,
    pub max_inner: usize,
    pub gap_constant: f64,
    pub step0: StepState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub meta: RunMetadata,
    entries: Vec<RunEntry>,
}

impl RunRecord {
    pub fn new(meta: RunMetadata) -> Self {
        Self {
            meta,
            entries: Vec::new(),
        }
    }

    /// Appends the next entry; `n` must continue the sequence from 1.
    pub fn push(&mut self, entry: RunEntry) -> Result<()> {
        if entry.n != self.entries.len() + 1 {
            return Err(Error::InvalidParameter(format!(
                "record entry n = {} after {} entries",
                entry.n,
                self.entries.len()
            )));
        }
        if let Some(last) = self.entries.last() {
            if entry.cumulative_inner_iterations < last.cumulative_inner_iterations {
                return Err(Error::InvalidParameter("cumulative inner iterations decreased".into()));
            }
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[RunEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub struct RunOutput<Y> {
    pub record: RunRecord,
    pub x: RealGrid,
    pub y: Y,
    pub x_ergodic: RealGrid,
    pub y_ergodic: Y,
    pub accumulator: CertificateAccumulator,
    pub final_step: StepState,
}

/// Runs one of the inexact variants.
///
/// Pass `reference` to log Lagrangian gaps, theorem bounds and the descent
/// inequality against a saddle point.
pub fn run_inexact_pd<K, D>(
    problem: &SaddleProblem<K, D>,
    state0: StepState,
    schedules: &Schedules,
    opts: &RunOptions,
    x0: &RealGrid,
    y0: &K::Codomain,
    reference: Option<&SaddleReference<K::Codomain>>,
) -> Result<RunOutput<K::Codomain>>
where
    K: LinearMap<Domain = RealGrid>,
    D: DualTerm<Space = K::Codomain>,
{
    if state0.variant.is_exact_baseline() {
        return Err(Error::InvalidParameter("use run_exact_baseline for exact variants".into()));
    }
    run_loop(problem, state0, schedules, opts, x0, y0, reference, &mut |_| Ok(()))
}

/// Like [`run_inexact_pd`], handing each entry to `observer` as soon as it is
/// recorded. An observer error aborts the run.
#[allow(clippy::too_many_arguments)]
pub fn run_inexact_pd_observed<K, D>(
    problem: &SaddleProblem<K, D>,
    state0: StepState,
    schedules: &Schedules,
    opts: &RunOptions,
    x0: &RealGrid,
    y0: &K::Codomain,
    reference: Option<&SaddleReference<K::Codomain>>,
    observer: &mut dyn FnMut(&RunEntry) -> Result<()>,
) -> Result<RunOutput<K::Codomain>>
where
    K: LinearMap<Domain = RealGrid>,
    D: DualTerm<Space = K::Codomain>,
{
    if state0.variant.is_exact_baseline() {
        return Err(Error::InvalidParameter("use run_exact_baseline for exact variants".into()));
    }
    run_loop(problem, state0, schedules, opts, x0, y0, reference, observer)
}

/// Runs an exact baseline; the primal term must have a closed-form prox.
pub fn run_exact_baseline<K, D>(
    problem: &SaddleProblem<K, D>,
    state0: StepState,
    n_outer: usize,
    x0: &RealGrid,
    y0: &K::Codomain,
    reference: Option<&SaddleReference<K::Codomain>>,
) -> Result<RunOutput<K::Codomain>>
where
    K: LinearMap<Domain = RealGrid>,
    D: DualTerm<Space = K::Codomain>,
{
    run_exact_baseline_observed(problem, state0, n_outer, x0, y0, reference, &mut |_| Ok(()))
}

/// [`run_exact_baseline`] with a per-entry observer.
pub fn run_exact_baseline_observed<K, D>(
    problem: &SaddleProblem<K, D>,
    state0: StepState,
    n_outer: usize,
    x0: &RealGrid,
    y0: &K::Codomain,
    reference: Option<&SaddleReference<K::Codomain>>,
    observer: &mut dyn FnMut(&RunEntry) -> Result<()>,
) -> Result<RunOutput<K::Codomain>>
where
    K: LinearMap<Domain = RealGrid>,
    D: DualTerm<Space = K::Codomain>,
{
    if !state0.variant.is_exact_baseline() {
        return Err(Error::InvalidParameter("exact baseline needs exact_pdhg or exact_pdhg_accel".into()));
    }
    if !problem.primal.is_exact() {
        return Err(Error::InvalidParameter("exact baseline needs a closed-form primal prox".into()));
    }
    let mut opts = RunOptions::new(n_outer, Mode::Practical, 1);
    opts.check_descent = reference.is_some();
    run_loop(problem, state0, &Schedules::zero(), &opts, x0, y0, reference, observer)
}

/// Dual acceleration modulus used in `θ = 1/√(1+2μσ)`: half the modulus of
/// `h*`, which keeps `(1+μσ_n)σ_{n+1}θ_{n+1} ≥ σ_n`.
pub fn dual_accel_modulus(mu: f64) -> f64 {
    0.5 * mu
}

#[allow(clippy::too_many_arguments)]
fn run_loop<K, D>(
    problem: &SaddleProblem<K, D>,
    state0: StepState,
    schedules: &Schedules,
    opts: &RunOptions,
    x0: &RealGrid,
    y0: &K::Codomain,
    reference: Option<&SaddleReference<K::Codomain>>,
    observer: &mut dyn FnMut(&RunEntry) -> Result<()>,
) -> Result<RunOutput<K::Codomain>>
where
    K: LinearMap<Domain = RealGrid>,
    D: DualTerm<Space = K::Codomain>,
{
    let variant = state0.variant;
    if variant == Variant::Reduced && !schedules.gradient_norm.is_zero() {
        return Err(Error::InvalidParameter("reduced variant has no gradient errors".into()));
    }
    if opts.n_outer == 0 {
        return Err(Error::InvalidParameter("n_outer must be at least 1".into()));
    }
    require_positive("gap constant", opts.gap_constant)?;
    let accel_mu = dual_accel_modulus(problem.dual.modulus());
    let consts = problem.step_constants(accel_mu);
    if matches!(variant, Variant::PrimalAccel | Variant::ExactPdhgAccel) && !(consts.gamma > 0.0) {
        return Err(Error::InvalidParameter("primal acceleration needs a strongly convex primal".into()));
    }
    if variant == Variant::DualAccel && !(consts.mu > 0.0) {
        return Err(Error::InvalidParameter("dual acceleration needs a strongly convex h*".into()));
    }
    if variant == Variant::Smooth && !(consts.gamma > 0.0 && consts.mu > 0.0) {
        return Err(Error::InvalidParameter("smooth variant needs both moduli positive".into()));
    }
    check_step_state(&state0, &consts)?;

    let inner = opts.mode.inner_settings(opts.max_inner);
    let template = x0.clone();
    let mut record = RunRecord::new(RunMetadata {
        variant,
        seed: opts.seed,
        schedules: *schedules,
        mode: opts.mode,
        max_inner: opts.max_inner,
        gap_constant: opts.gap_constant,
        step0: state0,
    });
    let approx = if problem.primal.is_exact() {
        ApproxType::Exact
    } else {
        ApproxType::Type2
    };
    let mut acc = CertificateAccumulator::new(variant, approx);
    let mut ergodic: ErgodicAverage<RealGrid, K::Codomain> = ErgodicAverage::new();

    let reference_cache = match reference {
        Some(r) => Some(certificates::ReferenceCache::new(problem, r)?),
        None => None,
    };
    let (dist_x0, dist_y0) = match reference {
        Some(r) => (grid::dist(&r.x_star, x0)?, grid::dist(&r.y_star, y0)?),
        None => (0.0, 0.0),
    };

    let mut x_prev = x0.clone();
    let mut x = x0.clone();
    let mut kx = problem.op.apply(x0)?;
    let mut kx_prev = kx.clone();
    let mut kx_erg: Option<K::Codomain> = None;
    let mut y = y0.clone();
    let mut step = state0;
    let mut warm_z = None;
    let mut cumulative = 0usize;

    for n in 1..=opts.n_outer {
        let theta_ext = match variant {
            Variant::Basic | Variant::Reduced | Variant::ExactPdhg => 1.0,
            _ => step.theta,
        };
        let x_tilde = grid::lincomb(1.0 + theta_ext, &x, -theta_ext, &x_prev)?;
        let kx_tilde = grid::lincomb(1.0 + theta_ext, &kx, -theta_ext, &kx_prev)?;

        let mut y_bar = y.clone();
        grid::axpy(step.sigma, &kx_tilde, &mut y_bar)?;
        let y_new = problem.dual.prox(&y_bar, step.sigma)?;

        let e = if schedules.gradient_norm.is_zero() {
            None
        } else {
            Some(make_gradient_error(n, &schedules.gradient_norm, &template, opts.seed)?)
        };
        let grad_err_norm = e.as_ref().map_or(0.0, grid::norm);
        let mut v = x.clone();
        let mut direction = problem.op.adjoint(&y_new)?;
        if let Some(s) = problem.smooth {
            grid::axpy(1.0, &s.gradient(&x), &mut direction)?;
        }
        if let Some(e) = &e {
            grid::axpy(1.0, e, &mut direction)?;
        }
        grid::axpy(-step.tau, &direction, &mut v)?;

        let eps_target = (opts.gap_constant * schedules.primal_eps.eval(n)).max(opts.eps_floor);
        let prox = problem.primal.prox(&v, step.tau, eps_target, warm_z.as_ref(), &inner)?;
        let x_new = prox.x;
        warm_z = prox.z;
        let eps = prox.cert.achieved_gap;
        let delta = 0.0;
        cumulative += prox.cert.inner_iterations;

        acc.accumulate(n, &step, eps, delta, grad_err_norm)?;
        let log_weight = ergodic_log_weight(variant, n, &step, &state0);
        let ratio = ergodic.update_log(&x_new, &y_new, log_weight)?;

        let kx_new = problem.op.apply(&x_new)?;
        let energy = problem.primal_energy_with(&x_new, &kx_new)?;
        let x_erg = ergodic.mean_x().expect("ergodic mean after update");
        let y_erg = ergodic.mean_y().expect("ergodic mean after update");
        let kx_erg = match kx_erg.as_mut() {
            Some(m) => {
                let d = grid::lincomb(1.0, &kx_new, -1.0, m)?;
                grid::axpy(ratio, &d, m)?;
                m
            }
            None => kx_erg.insert(kx_new.clone()),
        };
        let erg_energy = problem.primal_energy_with(x_erg, kx_erg)?;

        let next = update_steps(&step, consts.gamma, consts.mu_accel)?;
        check_step_transition(&step, &next, &consts)?;

        let (lag_gap, rhs, descent) = match (reference, &reference_cache) {
            (Some(r), Some(cache)) => {
                let gap = cache.lagrangian_gap_with(problem, x_erg, kx_erg, y_erg)?;
                let rhs = certificates::theorem_rhs(&acc, dist_x0, dist_y0, &state0, &next)?;
                let descent = if opts.check_descent {
                    let pack = IteratePack {
                        x_bar: &x,
                        y_bar: &y,
                        x_tilde: &x_tilde,
                        y_tilde: &y_new,
                        x_check: &x_new,
                        y_check: &y_new,
                    };
                    Some(certificates::descent_inequality_check_cached(
                        problem,
                        &pack,
                        (step.tau, step.sigma),
                        (grad_err_norm, eps, delta),
                        (&r.x_star, &r.y_star),
                        approx,
                        Some(&kx_new),
                        cache,
                    )?)
                } else {
                    None
                };
                (Some(gap), Some(rhs), descent)
            }
            _ => (None, None, None),
        };

        let entry = RunEntry {
            n,
            tau: step.tau,
            sigma: step.sigma,
            theta: step.theta,
            primal_energy: energy,
            ergodic_primal_energy: erg_energy,
            lagrangian_gap: lag_gap,
            eps_target: if problem.primal.is_exact() { 0.0 } else { eps_target },
            eps_achieved: eps,
            delta_achieved: delta,
            grad_error_norm: grad_err_norm,
            inner_iterations: prox.cert.inner_iterations,
            cumulative_inner_iterations: cumulative,
            inner_converged: prox.cert.converged,
            rhs_bound: rhs,
            descent,
        };
        observer(&entry)?;
        record.push(entry)?;

        x_prev = std::mem::replace(&mut x, x_new);
        kx_prev = std::mem::replace(&mut kx, kx_new);
        y = y_new;
        step = next;
    }

    let x_ergodic = ergodic.mean_x().cloned().expect("at least one iteration");
    let y_ergodic = ergodic.mean_y().cloned().expect("at least one iteration");
    Ok(RunOutput {
        record,
        x,
        y,
        x_ergodic,
        y_ergodic,
        accumulator: acc,
        final_step: step,
    })
}
