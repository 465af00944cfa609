//! Numerical checks of the convergence theory: error-sum accumulators,
//! theorem bounds, the one-step descent inequality, the recursion lemma and
//! rate fitting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{self, RealGrid, Vector};
use crate::operators::LinearMap;
use crate::prox::{ApproxType, DualTerm};
use crate::solvers::{SaddleProblem, StepState, Variant};

/// Relative slack of the descent inequality.
pub const DESCENT_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub n: usize,
    pub a: f64,
    pub b: f64,
    pub weight: f64,
}

/// Running `A_N`, `B_N`, `T_N` for one variant and approximation type.
#[derive(Clone, Debug, PartialEq)]
pub struct CertificateAccumulator {
    variant: Variant,
    approx_type: ApproxType,
    a: f64,
    b: f64,
    t: f64,
    step0: Option<StepState>,
    history: Vec<Contribution>,
}

impl CertificateAccumulator {
    pub fn new(variant: Variant, approx_type: ApproxType) -> Self {
        Self {
            variant,
            approx_type,
            a: 0.0,
            b: 0.0,
            t: 0.0,
            step0: None,
            history: Vec::new(),
        }
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn approx_type(&self) -> ApproxType {
        self.approx_type
    }

    pub fn a_sum(&self) -> f64 {
        self.a
    }

    pub fn b_sum(&self) -> f64 {
        self.b
    }

    pub fn t_sum(&self) -> f64 {
        self.t
    }

    pub fn n(&self) -> usize {
        self.history.len()
    }

    pub fn history(&self) -> &[Contribution] {
        &self.history
    }

    /// Adds the terms of iterate `n`, produced with `step` (the state with
    /// index `n − 1`).
    pub fn accumulate(&mut self, n: usize, step: &StepState, eps: f64, delta: f64, grad_err: f64) -> Result<()> {
        if n != self.history.len() + 1 {
            return Err(Error::Certificate(format!(
                "accumulate called with n = {n} after {} terms",
                self.history.len()
            )));
        }
        if !(eps >= 0.0 && delta >= 0.0 && grad_err >= 0.0) {
            return Err(Error::Certificate(format!("negative error term ({eps}, {delta}, {grad_err})")));
        }
        if self.approx_type == ApproxType::Type0 {
            return Err(Error::Certificate("no theorem covers type-0 primal errors".into()));
        }
        let step0 = *self.step0.get_or_insert(*step);
        // Types 1 and 3 carry the √ε term in A; type 3 drops ε from B.
        let sqrt_term = matches!(self.approx_type, ApproxType::Type1 | ApproxType::Type3);
        let b_err = if self.approx_type == ApproxType::Type3 { delta } else { eps + delta };
        let (tau, sigma) = (step.tau, step.sigma);
        let (a, b, w) = match self.variant {
            Variant::Basic => {
                let mut a = tau * grad_err;
                if sqrt_term {
                    a += (2.0 * tau * eps).sqrt();
                }
                (a, tau * b_err, 1.0)
            }
            Variant::Reduced | Variant::ExactPdhg => {
                if grad_err != 0.0 {
                    return Err(Error::Certificate("reduced variant has no gradient error".into()));
                }
                (0.0, b_err, 1.0)
            }
            Variant::PrimalAccel | Variant::ExactPdhgAccel => {
                let mut a = sigma * grad_err;
                if sqrt_term {
                    a += (2.0 * sigma * sigma * eps / tau).sqrt();
                }
                (a, 2.0 * sigma * b_err, sigma / step0.sigma)
            }
            Variant::DualAccel => {
                if grad_err != 0.0 {
                    return Err(Error::Certificate("dual-accelerated variant has no gradient error".into()));
                }
                let a = if sqrt_term { (2.0 * tau * eps).sqrt() } else { 0.0 };
                (a, 2.0 * tau * b_err, tau / step0.tau)
            }
            Variant::Smooth => {
                let w = step0.theta.powi(-((n - 1) as i32));
                let mut a = tau * grad_err;
                if sqrt_term {
                    a += (2.0 * tau * eps).sqrt();
                }
                (w * a, w * tau * b_err, w)
            }
        };
        self.a += a;
        self.b += b;
        self.t += w;
        self.history.push(Contribution { n, a, b, weight: w });
        Ok(())
    }
}

/// Upper bound on `ℒ(X^N, y⋆) − ℒ(x⋆, Y^N)` after `acc.n()` iterations.
///
/// `step_n` is the state after the last update (index `N`).
pub fn theorem_rhs(
    acc: &CertificateAccumulator,
    dist_x0: f64,
    dist_y0: f64,
    step0: &StepState,
    step_n: &StepState,
) -> Result<f64> {
    let n = acc.n();
    if n == 0 {
        return Err(Error::Certificate("theorem bound needs at least one iteration".into()));
    }
    let (a, b, t) = (acc.a, acc.b, acc.t);
    let (tau0, sigma0) = (step0.tau, step0.sigma);
    Ok(match acc.variant {
        Variant::Basic => {
            let s = dist_x0 + (tau0 / sigma0).sqrt() * dist_y0 + 2.0 * a + (2.0 * b).sqrt();
            s * s / (2.0 * tau0 * n as f64)
        }
        Variant::Reduced | Variant::ExactPdhg => {
            (dist_x0 * dist_x0 / (2.0 * tau0) + dist_y0 * dist_y0 / (2.0 * sigma0) + b) / n as f64
        }
        Variant::PrimalAccel | Variant::ExactPdhgAccel => {
            let s = (sigma0 / tau0).sqrt() * dist_x0
                + dist_y0
                + (2.0 * b).sqrt()
                + 2.0 * (step_n.tau / step_n.sigma).sqrt() * a;
            s * s / (2.0 * sigma0 * t)
        }
        Variant::DualAccel => {
            let s = dist_x0 + (tau0 / sigma0).sqrt() * dist_y0 + (2.0 * b).sqrt() + 2.0 * a;
            s * s / (2.0 * tau0 * t)
        }
        Variant::Smooth => {
            let s = dist_x0
                + (tau0 / sigma0).sqrt() * dist_y0
                + 2.0 * step0.theta.powf(0.5 * n as f64) * a
                + (2.0 * b).sqrt();
            s * s / (2.0 * tau0 * t)
        }
    })
}

/// Basic variant: `‖x⋆ − x^N‖ ≤ A_N + √(2τΔ₀ + 2B_N + A_N²)` with
/// `Δ₀ = ‖x⋆−x⁰‖²/(2τ) + ‖y⋆−y⁰‖²/(2σ)`.
pub fn basic_distance_bound(acc: &CertificateAccumulator, dist_x0: f64, dist_y0: f64, step: &StepState) -> f64 {
    let delta0 = dist_x0 * dist_x0 / (2.0 * step.tau) + dist_y0 * dist_y0 / (2.0 * step.sigma);
    acc.a + (2.0 * step.tau * delta0 + 2.0 * acc.b + acc.a * acc.a).sqrt()
}

/// Reduced variant bound at an arbitrary probe `(x, y)`.
pub fn reduced_bound_at(acc: &CertificateAccumulator, dist_x: f64, dist_y: f64, step: &StepState) -> Result<f64> {
    if !matches!(acc.variant, Variant::Reduced | Variant::ExactPdhg) {
        return Err(Error::Certificate("probe-free bound only holds for the reduced variant".into()));
    }
    theorem_rhs(acc, dist_x, dist_y, step, step)
}

/// Mixed-rate bound on `F(X^N) − F(x⋆)` for the reduced variant when `h*`
/// has bounded domain: the dual distance is replaced by
/// `sup_{y ∈ dom h*} ‖y − y⁰‖ = dual_radius`.
pub fn mixed_rate_bound(acc: &CertificateAccumulator, dist_x0: f64, dual_radius: f64, step: &StepState) -> Result<f64> {
    reduced_bound_at(acc, dist_x0, dual_radius, step)
}

/// `u_N ≤ ½Σλ_n + √(S_N + (½Σλ_n)²)` for each `N`.
pub fn recursion_bound(s: &[f64], lambdas: &[f64]) -> Result<Vec<f64>> {
    if s.len() != lambdas.len() {
        return Err(Error::Certificate("S and λ sequences differ in length".into()));
    }
    if s.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Certificate("S must be nondecreasing".into()));
    }
    if lambdas.iter().any(|&l| !(l >= 0.0)) {
        return Err(Error::Certificate("λ must be nonnegative".into()));
    }
    let mut half_sum = 0.0;
    Ok(s.iter()
        .zip(lambdas)
        .map(|(&sn, &l)| {
            half_sum += 0.5 * l;
            half_sum + (sn + half_sum * half_sum).sqrt()
        })
        .collect())
}

/// `s_N = Σ_{n=1}^N n^α`.
pub fn power_sum(n_max: usize, alpha: f64) -> f64 {
    (1..=n_max).map(|n| (n as f64).powf(alpha)).sum()
}

/// A numerical saddle point used as probe and comparison point.
#[derive(Clone, Debug)]
pub struct SaddleReference<Y> {
    pub x_star: RealGrid,
    pub y_star: Y,
    pub f_star: f64,
    pub provenance: String,
    pub est_accuracy: f64,
}

/// Quantities at the reference that every gap evaluation reuses.
pub struct ReferenceCache<Y> {
    y_star: Y,
    kx_star: Y,
    fg_star: f64,
    hstar_star: f64,
}

impl<Y: Vector> ReferenceCache<Y> {
    pub fn new<K, D>(problem: &SaddleProblem<K, D>, r: &SaddleReference<Y>) -> Result<Self>
    where
        K: LinearMap<Domain = RealGrid, Codomain = Y>,
        D: DualTerm<Space = Y>,
    {
        let kx_star = problem.op.apply(&r.x_star)?;
        let fg_star = problem.smooth.map_or(0.0, |s| s.value(&r.x_star)) + problem.primal.value(&r.x_star);
        let hstar_star = problem.dual.conjugate_value(&r.y_star)?;
        Ok(Self {
            y_star: r.y_star.clone(),
            kx_star,
            fg_star,
            hstar_star,
        })
    }

    /// `ℒ(x⋆, y)`.
    fn lagrangian_at_star(&self, y: &Y, hstar_y: f64) -> Result<f64> {
        Ok(grid::inner_product(&self.kx_star, y)? + self.fg_star - hstar_y)
    }

    /// `ℒ(x, y⋆) − ℒ(x⋆, y)` given `Kx`; `+∞` when `y` is infeasible.
    pub fn lagrangian_gap_with<K, D>(
        &self,
        problem: &SaddleProblem<K, D>,
        x: &RealGrid,
        kx: &Y,
        y: &Y,
    ) -> Result<f64>
    where
        K: LinearMap<Domain = RealGrid, Codomain = Y>,
        D: DualTerm<Space = Y>,
    {
        let hstar_y = problem.dual.conjugate_value(y)?;
        if hstar_y == f64::INFINITY {
            return Ok(f64::INFINITY);
        }
        let fg_x = problem.smooth.map_or(0.0, |s| s.value(x)) + problem.primal.value(x);
        let left = grid::inner_product(kx, &self.y_star)? + fg_x - self.hstar_star;
        Ok(left - self.lagrangian_at_star(y, hstar_y)?)
    }
}

/// `ℒ(x, y⋆) − ℒ(x⋆, y)`.
pub fn lagrangian_gap<K, D>(
    problem: &SaddleProblem<K, D>,
    x: &RealGrid,
    y: &K::Codomain,
    reference: &SaddleReference<K::Codomain>,
) -> Result<f64>
where
    K: LinearMap<Domain = RealGrid>,
    D: DualTerm<Space = K::Codomain>,
{
    let cache = ReferenceCache::new(problem, reference)?;
    let kx = problem.op.apply(x)?;
    cache.lagrangian_gap_with(problem, x, &kx, y)
}

/// The points entering one application of the descent rule: the update maps
/// `(x̄, ȳ)` and `(x̃, ỹ)` to `(x̌, y̌)`.
pub struct IteratePack<'a, Y> {
    pub x_bar: &'a RealGrid,
    pub y_bar: &'a Y,
    pub x_tilde: &'a RealGrid,
    pub y_tilde: &'a Y,
    pub x_check: &'a RealGrid,
    pub y_check: &'a Y,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescentCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Evaluates both sides of the one-step descent inequality at `probe`.
pub fn descent_inequality_check<K, D>(
    problem: &SaddleProblem<K, D>,
    pack: &IteratePack<'_, K::Codomain>,
    steps: (f64, f64),
    errors: (f64, f64, f64),
    probe: (&RealGrid, &K::Codomain),
    approx: ApproxType,
) -> Result<DescentCheck>
where
    K: LinearMap<Domain = RealGrid>,
    D: DualTerm<Space = K::Codomain>,
{
    let probe_ref = SaddleReference {
        x_star: probe.0.clone(),
        y_star: probe.1.clone(),
        f_star: f64::NAN,
        provenance: "probe".into(),
        est_accuracy: 0.0,
    };
    let cache = ReferenceCache::new(problem, &probe_ref)?;
    descent_inequality_check_cached(problem, pack, steps, errors, probe, approx, None, &cache)
}

/// As [`descent_inequality_check`] with precomputed quantities at the probe
/// and optionally `Kx̌`.
#[allow(clippy::too_many_arguments)]
pub fn descent_inequality_check_cached<K, D>(
    problem: &SaddleProblem<K, D>,
    pack: &IteratePack<'_, K::Codomain>,
    steps: (f64, f64),
    errors: (f64, f64, f64),
    probe: (&RealGrid, &K::Codomain),
    approx: ApproxType,
    kx_check: Option<&K::Codomain>,
    cache: &ReferenceCache<K::Codomain>,
) -> Result<DescentCheck>
where
    K: LinearMap<Domain = RealGrid>,
    D: DualTerm<Space = K::Codomain>,
{
    let (tau, sigma) = steps;
    let (e_norm, eps, delta) = errors;
    let (x, y) = probe;
    let owned;
    let kx_check = match kx_check {
        Some(k) => k,
        None => {
            owned = problem.op.apply(pack.x_check)?;
            &owned
        }
    };

    let lhs = cache.lagrangian_gap_with(problem, pack.x_check, kx_check, pack.y_check)?;

    let d = |a: &RealGrid, b: &RealGrid| grid::dist_sq(a, b);
    let dy = |a: &K::Codomain, b: &K::Codomain| grid::dist_sq(a, b);
    let l_f = problem.l_f();
    let mut rhs = d(x, pack.x_bar)? / (2.0 * tau) + dy(y, pack.y_bar)? / (2.0 * sigma)
        - d(x, pack.x_check)? / (2.0 * tau)
        - (1.0 - tau * l_f) / (2.0 * tau) * d(pack.x_bar, pack.x_check)?
        - dy(y, pack.y_check)? / (2.0 * sigma)
        - dy(pack.y_bar, pack.y_check)? / (2.0 * sigma);

    // ⟨K(x − x̌), ỹ − y̌⟩ − ⟨K(x̃ − x̌), y − y̌⟩
    let k_x_minus = grid::lincomb(1.0, &cache.kx_star, -1.0, kx_check)?;
    let y_t = grid::lincomb(1.0, pack.y_tilde, -1.0, pack.y_check)?;
    let k_xt_minus = problem.op.apply(&grid::lincomb(1.0, pack.x_tilde, -1.0, pack.x_check)?)?;
    let y_p = grid::lincomb(1.0, y, -1.0, pack.y_check)?;
    rhs += grid::inner_product(&k_x_minus, &y_t)? - grid::inner_product(&k_xt_minus, &y_p)?;

    let sqrt_term = matches!(approx, ApproxType::Type1 | ApproxType::Type3);
    let eps_term = matches!(approx, ApproxType::Type1 | ApproxType::Type2);
    let coef = e_norm + if sqrt_term { (2.0 * eps / tau).sqrt() } else { 0.0 };
    rhs += coef * d(x, pack.x_check)?.sqrt() + if eps_term { eps } else { 0.0 } + delta;

    let holds = lhs <= rhs + DESCENT_TOL * rhs.abs().max(1.0);
    Ok(DescentCheck { lhs, rhs, holds })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitMode {
    LogLog,
    SemiLog,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub points: usize,
    pub excluded: usize,
}

/// Least squares of `log v` against `log n` (or `n` in semilog mode) over
/// `n ∈ [from, to]`. Nonpositive values are excluded.
pub fn fit_slope(points: &[(f64, f64)], from: f64, to: f64, mode: FitMode) -> Result<SlopeFit> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut excluded = 0;
    for &(n, v) in points {
        if n < from || n > to {
            continue;
        }
        if !(v > 0.0) || !v.is_finite() {
            excluded += 1;
            continue;
        }
        xs.push(match mode {
            FitMode::LogLog => n.ln(),
            FitMode::SemiLog => n,
        });
        ys.push(v.ln());
    }
    if xs.len() < 5 {
        return Err(Error::TooFewPoints(xs.len()));
    }
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(&ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(SlopeFit {
        slope,
        intercept: my - slope * mx,
        r2,
        points: xs.len(),
        excluded,
    })
}

/// Which per-iteration quantity of a record to fit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    RelErr,
    ErgodicRelErr,
    LagrangianGap,
}

/// Fits a record metric; relative errors need the optimal energy `f_star`.
pub fn fit_loglog_slope(
    record: &crate::solvers::RunRecord,
    metric: Metric,
    f_star: f64,
    n_range: (usize, usize),
    mode: FitMode,
) -> Result<SlopeFit> {
    let pts: Vec<(f64, f64)> = record
        .entries()
        .iter()
        .map(|e| {
            let v = match metric {
                Metric::RelErr => (e.primal_energy - f_star) / f_star,
                Metric::ErgodicRelErr => (e.ergodic_primal_energy - f_star) / f_star,
                Metric::LagrangianGap => e.lagrangian_gap.unwrap_or(f64::NAN),
            };
            (e.n as f64, v)
        })
        .collect();
    fit_slope(&pts, n_range.0 as f64, n_range.1 as f64, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::seeded_rng;
    use crate::operators::{ImageOperator, LinearOperatorHandle};
    use crate::prox::{DataTerm, Fidelity, PrimalTerm};
    use crate::solvers::RunRecord;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn unit(variant: Variant) -> StepState {
        StepState::new(variant, 1.0, 1.0)
    }

    #[test]
    fn basic_type2_sums() {
        let mut acc = CertificateAccumulator::new(Variant::Basic, ApproxType::Type2);
        for n in 1..=3 {
            acc.accumulate(n, &unit(Variant::Basic), 1.0, 1.0, 0.0).unwrap();
        }
        assert_eq!(acc.b_sum(), 6.0);
        assert_eq!(acc.a_sum(), 0.0);
        assert_eq!(acc.t_sum(), 3.0);
    }

    #[test]
    fn smooth_weights_gradient_errors() {
        let s0 = StepState {
            theta: 0.5,
            ..unit(Variant::Smooth)
        };
        let mut acc = CertificateAccumulator::new(Variant::Smooth, ApproxType::Type2);
        for n in 1..=3 {
            acc.accumulate(n, &s0, 0.0, 0.0, 1.0).unwrap();
        }
        assert_eq!(acc.a_sum(), 7.0);
        assert_eq!(acc.t_sum(), 7.0);
        assert_eq!(acc.history().iter().map(|c| c.weight).collect::<Vec<_>>(), vec![1.0, 2.0, 4.0]);
    }

    #[test]
    fn type_specific_terms() {
        let s = StepState::new(Variant::Basic, 2.0, 0.1);
        let mut t1 = CertificateAccumulator::new(Variant::Basic, ApproxType::Type1);
        t1.accumulate(1, &s, 0.25, 0.5, 0.0).unwrap();
        assert_relative_eq!(t1.a_sum(), 1.0, epsilon = 1e-15);
        assert_relative_eq!(t1.b_sum(), 1.5, epsilon = 1e-15);
        let mut t3 = CertificateAccumulator::new(Variant::Basic, ApproxType::Type3);
        t3.accumulate(1, &s, 0.25, 0.5, 0.0).unwrap();
        assert_relative_eq!(t3.a_sum(), 1.0, epsilon = 1e-15);
        assert_relative_eq!(t3.b_sum(), 1.0, epsilon = 1e-15);

        let p = StepState::new(Variant::PrimalAccel, 0.5, 2.0);
        let mut pa = CertificateAccumulator::new(Variant::PrimalAccel, ApproxType::Type2);
        pa.accumulate(1, &p, 0.1, 0.2, 0.5).unwrap();
        assert_relative_eq!(pa.a_sum(), 1.0, epsilon = 1e-15);
        assert_relative_eq!(pa.b_sum(), 1.2, epsilon = 1e-15);

        let d = StepState::new(Variant::DualAccel, 0.5, 2.0);
        let mut da = CertificateAccumulator::new(Variant::DualAccel, ApproxType::Type1);
        da.accumulate(1, &d, 1.0, 0.0, 0.0).unwrap();
        assert_relative_eq!(da.a_sum(), 1.0, epsilon = 1e-15);
        assert_relative_eq!(da.b_sum(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn accumulate_rejects_invalid_input() {
        let mut acc = CertificateAccumulator::new(Variant::Basic, ApproxType::Type0);
        assert!(acc.accumulate(1, &unit(Variant::Basic), 0.0, 0.0, 0.0).is_err());
        let mut acc = CertificateAccumulator::new(Variant::Reduced, ApproxType::Type2);
        assert!(acc.accumulate(1, &unit(Variant::Reduced), 0.0, 0.0, 1.0).is_err());
        assert!(acc.accumulate(2, &unit(Variant::Reduced), 0.0, 0.0, 0.0).is_err());
        assert!(acc.accumulate(1, &unit(Variant::Reduced), -1.0, 0.0, 0.0).is_err());
        let mut acc = CertificateAccumulator::new(Variant::DualAccel, ApproxType::Type2);
        assert!(acc.accumulate(1, &unit(Variant::DualAccel), 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn theorem_rhs_examples() {
        let mut acc = CertificateAccumulator::new(Variant::Basic, ApproxType::Type2);
        assert!(theorem_rhs(&acc, 1.0, 1.0, &unit(Variant::Basic), &unit(Variant::Basic)).is_err());
        acc.accumulate(1, &unit(Variant::Basic), 0.0, 0.0, 0.0).unwrap();
        assert_eq!(theorem_rhs(&acc, 2.0, 0.0, &unit(Variant::Basic), &unit(Variant::Basic)).unwrap(), 2.0);

        let s = StepState::new(Variant::Reduced, 0.5, 2.0);
        let mut r = CertificateAccumulator::new(Variant::Reduced, ApproxType::Type2);
        for n in 1..=4 {
            r.accumulate(n, &s, 0.25, 0.0, 0.0).unwrap();
        }
        // (1/4)(1/(2·0.5) + 4/(2·2) + 1)
        assert_relative_eq!(theorem_rhs(&r, 1.0, 2.0, &s, &s).unwrap(), 0.75, epsilon = 1e-15);
        assert_relative_eq!(mixed_rate_bound(&r, 1.0, 2.0, &s).unwrap(), 0.75, epsilon = 1e-15);
        assert!(reduced_bound_at(&acc, 1.0, 1.0, &unit(Variant::Basic)).is_err());
    }

    /// Builds the extremal sequence `u_N² = S_N + Σ_{n≤N} λ_n u_n`.
    fn extremal_sequence(s: &[f64], lambdas: &[f64]) -> Vec<f64> {
        let mut acc = 0.0;
        s.iter()
            .zip(lambdas)
            .map(|(&sn, &l)| {
                let c = sn + acc;
                let u = 0.5 * (l + (l * l + 4.0 * c).sqrt());
                acc += l * u;
                u
            })
            .collect()
    }

    #[test]
    fn recursion_examples() {
        assert_eq!(recursion_bound(&[4.0, 9.0], &[0.0, 0.0]).unwrap(), vec![2.0, 3.0]);
        let b = recursion_bound(&[0.0], &[2.0]).unwrap();
        assert_relative_eq!(b[0], 2.0, epsilon = 1e-15);
        assert!(recursion_bound(&[2.0, 1.0], &[0.0, 0.0]).is_err());
        assert!(recursion_bound(&[1.0], &[-1.0]).is_err());
        assert!(recursion_bound(&[1.0], &[]).is_err());
    }

    #[test]
    fn recursion_bound_dominates_random_recursions() {
        let mut rng = seeded_rng(11);
        for _ in 0..1000 {
            let len = rng.random_range(1..30);
            let mut s = Vec::with_capacity(len);
            let mut cur = 0.0;
            for _ in 0..len {
                cur += rng.random_range(0.0..2.0);
                s.push(cur);
            }
            let lambdas: Vec<f64> = (0..len).map(|_| rng.random_range(0.0..3.0)).collect();
            let u = extremal_sequence(&s, &lambdas);
            let bound = recursion_bound(&s, &lambdas).unwrap();
            for (ui, bi) in u.iter().zip(&bound) {
                assert!(ui <= &(bi * (1.0 + 1e-12)), "{ui} > {bi}");
            }
            // Sub-extremal sequences are also dominated.
            let shrunk: Vec<f64> = u.iter().map(|v| v * rng.random_range(0.0..1.0)).collect();
            assert!(shrunk.iter().zip(&bound).all(|(a, b)| a <= b));
        }
    }

    #[test]
    fn basic_distance_bound_is_the_recursion_bound() {
        let s = StepState::new(Variant::Basic, 0.7, 0.9);
        let mut acc = CertificateAccumulator::new(Variant::Basic, ApproxType::Type1);
        let mut rng = seeded_rng(5);
        let (dx, dy) = (1.3, 0.4);
        let delta0 = dx * dx / (2.0 * s.tau) + dy * dy / (2.0 * s.sigma);
        let mut ss = Vec::new();
        for n in 1..=50 {
            acc.accumulate(n, &s, rng.random_range(0.0..0.1), rng.random_range(0.0..0.1), rng.random_range(0.0..0.1))
                .unwrap();
            ss.push(2.0 * s.tau * delta0 + 2.0 * acc.b_sum());
        }
        let lambdas: Vec<f64> = acc.history().iter().map(|c| 2.0 * c.a).collect();
        let rec = recursion_bound(&ss, &lambdas).unwrap();
        assert_relative_eq!(basic_distance_bound(&acc, dx, dy, &s), *rec.last().unwrap(), max_relative = 1e-13);
    }

    #[test]
    fn power_sum_asymptotics() {
        let n = 10_000usize;
        for alpha in [-0.5, 0.5] {
            let r = power_sum(n, alpha) / (n as f64).powf(1.0 + alpha);
            let lo = 0.9 / (1.0 + alpha);
            let hi = 1.1 / (1.0 + alpha) + (n as f64).powf(alpha - 1.0);
            assert!(r >= lo && r <= hi, "α = {alpha}: ratio {r}");
        }
        assert_eq!(power_sum(3, 1.0), 6.0);
    }

    #[test]
    fn fit_exact_power_law() {
        let pts: Vec<(f64, f64)> = (1..=200).map(|n| (n as f64, 3.0 * (n as f64).powi(-2))).collect();
        let f = fit_slope(&pts, 10.0, 200.0, FitMode::LogLog).unwrap();
        assert!((f.slope + 2.0).abs() < 1e-6 && f.r2 > 0.999999);
        assert_relative_eq!(f.intercept, 3f64.ln(), epsilon = 1e-9);
        assert_eq!(f.points, 191);
        let scaled: Vec<(f64, f64)> = pts.iter().map(|&(n, v)| (n, 1e-7 * v)).collect();
        let g = fit_slope(&scaled, 10.0, 200.0, FitMode::LogLog).unwrap();
        assert_relative_eq!(g.slope, f.slope, epsilon = 1e-10);
    }

    #[test]
    fn fit_semilog_and_degenerate_inputs() {
        let theta: f64 = 0.97;
        let pts: Vec<(f64, f64)> = (1..=100).map(|n| (n as f64, theta.powi(n))).collect();
        let f = fit_slope(&pts, 1.0, 100.0, FitMode::SemiLog).unwrap();
        assert_relative_eq!(f.slope, theta.ln(), epsilon = 1e-10);
        let flat: Vec<(f64, f64)> = (1..=10).map(|n| (n as f64, 0.5)).collect();
        let c = fit_slope(&flat, 1.0, 10.0, FitMode::LogLog).unwrap();
        assert!(c.slope.abs() < 1e-12 && c.r2 == 1.0);
        let mut mixed = pts.clone();
        mixed[10].1 = -1.0;
        mixed[11].1 = 0.0;
        assert_eq!(fit_slope(&mixed, 1.0, 100.0, FitMode::SemiLog).unwrap().excluded, 2);
        assert!(matches!(fit_slope(&pts, 1.0, 4.0, FitMode::SemiLog), Err(Error::TooFewPoints(4))));
    }

    proptest! {
        #[test]
        fn fit_recovers_any_power(c in 1e-6f64..1e6, p in -3.0f64..1.0) {
            let pts: Vec<(f64, f64)> = (1..=50).map(|n| (n as f64, c * (n as f64).powf(p))).collect();
            let f = fit_slope(&pts, 1.0, 50.0, FitMode::LogLog).unwrap();
            prop_assert!((f.slope - p).abs() < 1e-9);
        }
    }

    fn two_pixel_l2(lambda: f64, f: [f64; 2]) -> SaddleProblem<ImageOperator, DataTerm> {
        SaddleProblem {
            op: LinearOperatorHandle::with_norm_bound(ImageOperator::blur_or_identity(0.0, 1, 2).unwrap(), 1.0)
                .unwrap(),
            smooth: None,
            primal: PrimalTerm::Tv { lambda },
            primal_modulus: 0.0,
            dual: DataTerm::new(Fidelity::L2, RealGrid::new(1, 2, f.to_vec()).unwrap()),
        }
    }

    fn row(v: [f64; 2]) -> RealGrid {
        RealGrid::new(1, 2, v.to_vec()).unwrap()
    }

    #[test]
    fn two_pixel_lagrangian_gap() {
        let (lambda, f) = (1.0, [0.0, 4.0]);
        let p = two_pixel_l2(lambda, f);
        let (xs, ys) = ([1.0, 3.0], [1.0, -1.0]);
        let reference = SaddleReference {
            x_star: row(xs),
            y_star: row(ys),
            f_star: 0.5 * 2.0 + 2.0,
            provenance: "closed form".into(),
            est_accuracy: 0.0,
        };
        assert_eq!(p.primal_energy(&row(xs)).unwrap(), reference.f_star);
        assert_eq!(lagrangian_gap(&p, &row(xs), &row(ys), &reference).unwrap(), 0.0);
        let lag = |x: [f64; 2], y: [f64; 2]| {
            x[0] * y[0] + x[1] * y[1] + lambda * (x[1] - x[0]).abs()
                - (y[0] * f[0] + y[1] * f[1] + 0.5 * (y[0] * y[0] + y[1] * y[1]))
        };
        let mut rng = seeded_rng(3);
        for _ in 0..200 {
            let x = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
            let y = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
            let expected = lag(x, ys) - lag(xs, y);
            let got = lagrangian_gap(&p, &row(x), &row(y), &reference).unwrap();
            assert!((got - expected).abs() < 1e-12 * (1.0 + expected.abs()));
            assert!(got >= -1e-12);
        }
    }

    #[test]
    fn infeasible_dual_gives_infinite_gap() {
        let p = SaddleProblem {
            dual: DataTerm::new(Fidelity::L1, row([0.0, 1.0])),
            ..two_pixel_l2(0.5, [0.0, 1.0])
        };
        let reference = SaddleReference {
            x_star: row([0.5, 0.5]),
            y_star: row([0.0, 0.0]),
            f_star: 1.0,
            provenance: "test".into(),
            est_accuracy: 0.0,
        };
        let gap = lagrangian_gap(&p, &row([0.0, 0.0]), &row([2.0, 0.0]), &reference).unwrap();
        assert_eq!(gap, f64::INFINITY);
    }

    #[test]
    fn descent_check_at_the_new_iterate_is_trivial() {
        let p = two_pixel_l2(0.5, [0.0, 1.0]);
        let (xb, yb) = (row([0.2, 0.3]), row([0.1, -0.1]));
        let (xc, yc) = (row([0.25, 0.6]), row([-0.2, 0.3]));
        let pack = IteratePack {
            x_bar: &xb,
            y_bar: &yb,
            x_tilde: &xc,
            y_tilde: &yc,
            x_check: &xc,
            y_check: &yc,
        };
        let d = descent_inequality_check(&p, &pack, (0.5, 0.5), (0.0, 0.0, 0.0), (&xc, &yc), ApproxType::Exact)
            .unwrap();
        assert_eq!(d.lhs, 0.0);
        // With probe = (x̌, y̌), x̃ = x̌, ỹ = y̌ and L_f = 0 every rhs term cancels.
        assert!(d.rhs.abs() < 1e-14, "rhs {}", d.rhs);
        assert!(d.holds);
    }

    #[test]
    fn fit_reads_record_metrics() {
        use crate::solvers::{Mode, RunEntry, RunMetadata, Schedules};
        let mut rec = RunRecord::new(RunMetadata {
            variant: Variant::Reduced,
            seed: 0,
            schedules: Schedules::zero(),
            mode: Mode::Practical,
            max_inner: 1,
            gap_constant: 1.0,
            step0: unit(Variant::Reduced),
        });
        let f_star = 2.0;
        for n in 1..=20usize {
            let v = f_star * (1.0 + 1.0 / n as f64);
            rec.push(RunEntry {
                n,
                tau: 1.0,
                sigma: 1.0,
                theta: 1.0,
                primal_energy: v,
                ergodic_primal_energy: f_star * (1.0 + (n as f64).powi(-2)),
                lagrangian_gap: Some(1.0 / n as f64),
                eps_target: 0.0,
                eps_achieved: 0.0,
                delta_achieved: 0.0,
                grad_error_norm: 0.0,
                inner_iterations: 0,
                cumulative_inner_iterations: 0,
                inner_converged: true,
                rhs_bound: None,
                descent: None,
            })
            .unwrap();
        }
        let r = fit_loglog_slope(&rec, Metric::RelErr, f_star, (1, 20), FitMode::LogLog).unwrap();
        assert_relative_eq!(r.slope, -1.0, epsilon = 1e-10);
        let e = fit_loglog_slope(&rec, Metric::ErgodicRelErr, f_star, (1, 20), FitMode::LogLog).unwrap();
        assert_relative_eq!(e.slope, -2.0, epsilon = 1e-10);
        let g = fit_loglog_slope(&rec, Metric::LagrangianGap, f_star, (1, 20), FitMode::LogLog).unwrap();
        assert_relative_eq!(g.slope, -1.0, epsilon = 1e-10);
    }
}
