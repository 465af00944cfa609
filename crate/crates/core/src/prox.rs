//! Proximal maps: closed forms for the dual data terms and the box, and an
//! inexact TV prox solved by FISTA on its dual with a duality-gap stop.
//!
//! For the subproblem `min_x ‖x − y‖²/(2τ) + λ‖∇x‖₁` the dual iterate `z`
//! lives in the box `‖z‖∞ ≤ λ` and the primal point is recovered as
//! `x = y + τ·div z`. The gap is evaluated as
//!
//! ```text
//! 𝒢(x, z) = ‖x − (y + τ div z)‖²/(2τ) + Σ (λ|(∇x)ᵢ| − zᵢ(∇x)ᵢ)
//! ```
//!
//! which is algebraically `G_τ(x) + W_τ(z)` and has only nonnegative terms
//! for feasible `z`, so it never goes negative in floating point.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{self, Pair, RealGrid, Vector, VectorField};
use crate::operators::{apply_divergence, apply_gradient};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApproxType {
    Exact,
    Type0,
    Type1,
    Type2,
    Type3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProxCertificate {
    pub approx_type: ApproxType,
    pub target_eps: f64,
    pub achieved_gap: f64,
    pub inner_iterations: usize,
    /// `√(2τ·achieved_gap)`.
    pub distance_bound: f64,
    pub converged: bool,
}

impl ProxCertificate {
    pub fn exact() -> Self {
        Self {
            approx_type: ApproxType::Exact,
            target_eps: 0.0,
            achieved_gap: 0.0,
            inner_iterations: 0,
            distance_bound: 0.0,
            converged: true,
        }
    }
}

pub fn soft_threshold<V: Vector>(y: &V, kappa: f64) -> V {
    let mut out = y.clone();
    for block in out.blocks_mut() {
        for v in block.iter_mut() {
            *v -= v.clamp(-kappa, kappa);
        }
    }
    out
}

pub fn project_box<V: Vector>(p: &V, lambda: f64) -> V {
    let mut out = p.clone();
    clamp_in_place(&mut out, lambda);
    out
}

fn clamp_in_place<V: Vector>(p: &mut V, lambda: f64) {
    for block in p.blocks_mut() {
        for v in block.iter_mut() {
            *v = v.clamp(-lambda, lambda);
        }
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidParameter(format!("dual step must be positive, got {sigma}")));
    }
    Ok(())
}

/// Prox of `h*(y) = ⟨y, f⟩ + ½‖y‖²`: `(ȳ − σf)/(1 + σ)`.
pub fn dual_prox_l2_data(ybar: &RealGrid, sigma: f64, f: &RealGrid) -> Result<RealGrid> {
    check_sigma(sigma)?;
    let mut out = grid::lincomb(1.0, ybar, -sigma, f)?;
    let s = 1.0 / (1.0 + sigma);
    for v in out.data_mut() {
        *v *= s;
    }
    Ok(out)
}

/// Prox of `h*(y) = ⟨y, f⟩ + δ_{‖y‖∞ ≤ 1}`: `clamp(ȳ − σf, [−1, 1])`.
pub fn dual_prox_l1_data(ybar: &RealGrid, sigma: f64, f: &RealGrid) -> Result<RealGrid> {
    check_sigma(sigma)?;
    let mut out = grid::lincomb(1.0, ybar, -sigma, f)?;
    clamp_in_place(&mut out, 1.0);
    Ok(out)
}

/// `min_x ‖x − anchor‖²/(2τ) + λ‖∇x‖₁` and its dual over the λ-box.
#[derive(Clone, Debug)]
pub struct ProxSubproblem {
    pub anchor: RealGrid,
    pub tau: f64,
    pub lambda: f64,
}

impl ProxSubproblem {
    pub fn new(anchor: RealGrid, tau: f64, lambda: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::InvalidParameter(format!("prox step must be positive, got {tau}")));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!("TV weight must be nonnegative, got {lambda}")));
        }
        Ok(Self { anchor, tau, lambda })
    }

    /// `G_τ(x)`.
    pub fn primal_value(&self, x: &RealGrid) -> Result<f64> {
        let d = grid::dist_sq(x, &self.anchor)?;
        let tv = grid::norms(&apply_gradient(x)).l1;
        Ok(d / (2.0 * self.tau) + self.lambda * tv)
    }

    /// `W_τ(z) = (τ/2)‖∇*z‖² − ⟨∇*z, y⟩` with `∇* = −div`.
    pub fn dual_value(&self, z: &VectorField) -> Result<f64> {
        let bstar = grid::scale(-1.0, &apply_divergence(z));
        let ip = grid::inner_product(&bstar, &self.anchor)?;
        Ok(0.5 * self.tau * grid::norm_sq(&bstar) - ip)
    }

    /// `x = y − τ∇*z = y + τ div z`.
    pub fn recover_primal(&self, z: &VectorField) -> Result<RealGrid> {
        let mut x = self.anchor.clone();
        grid::axpy(self.tau, &apply_divergence(z), &mut x)?;
        Ok(x)
    }
}

/// `G_τ(x) + W_τ(z)`; `z` is projected onto the box first.
pub fn duality_gap(sub: &ProxSubproblem, x: &RealGrid, z: &VectorField) -> Result<f64> {
    let z = project_box(z, sub.lambda);
    let w = sub.recover_primal(&z)?;
    let quad = grid::dist_sq(x, &w)? / (2.0 * sub.tau);
    let g = apply_gradient(x);
    Ok(quad + box_gap_terms(&g, &z, sub.lambda))
}

fn box_gap_terms(g: &VectorField, z: &VectorField, lambda: f64) -> f64 {
    let mut acc = 0.0;
    for (gb, zb) in g.blocks().into_iter().zip(z.blocks()) {
        for (gi, zi) in gb.iter().zip(zb) {
            acc += lambda * gi.abs() - zi * gi;
        }
    }
    acc
}

#[derive(Clone, Debug)]
pub struct TvProxSolution {
    pub x: RealGrid,
    pub z: VectorField,
    pub cert: ProxCertificate,
    /// Gap of every evaluated iterate, starting with the initial point.
    /// Only filled by [`solve_tv_prox_traced`].
    pub gap_trace: Vec<f64>,
}

/// FISTA on `W_τ` over the λ-box with adaptive gradient restart.
///
/// Returns the first iterate whose gap is at most `eps_target`, or the best
/// iterate seen within `max_inner` steps with `cert.converged = false`.
pub fn solve_tv_prox(
    sub: &ProxSubproblem,
    eps_target: f64,
    warm_z: Option<&VectorField>,
    max_inner: usize,
    step_scale: f64,
) -> Result<TvProxSolution> {
    run_fista(sub, eps_target, warm_z, max_inner, step_scale, false)
}

pub fn solve_tv_prox_traced(
    sub: &ProxSubproblem,
    eps_target: f64,
    warm_z: Option<&VectorField>,
    max_inner: usize,
    step_scale: f64,
) -> Result<TvProxSolution> {
    run_fista(sub, eps_target, warm_z, max_inner, step_scale, true)
}

fn run_fista(
    sub: &ProxSubproblem,
    eps_target: f64,
    warm_z: Option<&VectorField>,
    max_inner: usize,
    step_scale: f64,
    trace: bool,
) -> Result<TvProxSolution> {
    if !(eps_target > 0.0) {
        return Err(Error::InvalidParameter(format!("eps_target must be positive, got {eps_target}")));
    }
    if max_inner == 0 {
        return Err(Error::InvalidParameter("max_inner must be at least 1".into()));
    }
    if !(step_scale > 0.0 && step_scale <= 1.0) {
        return Err(Error::InvalidParameter(format!("step_scale must lie in (0, 1], got {step_scale}")));
    }
    let (rows, cols) = (sub.anchor.rows(), sub.anchor.cols());
    let lambda = sub.lambda;
    let step = step_scale / (8.0 * sub.tau);

    let mut z = match warm_z {
        Some(w) => {
            grid::check_shapes(w, &VectorField::zeros(rows, cols))?;
            project_box(w, lambda)
        }
        None => VectorField::zeros(rows, cols),
    };
    let x = sub.recover_primal(&z)?;
    let mut g = apply_gradient(&x);
    let gap = box_gap_terms(&g, &z, lambda);
    let mut gaps = Vec::new();
    if trace {
        gaps.push(gap);
    }

    let mut best = (gap, x.clone(), z.clone());
    let finish = |x: RealGrid, z: VectorField, gap: f64, k: usize, converged: bool, gaps: Vec<f64>| TvProxSolution {
        cert: ProxCertificate {
            approx_type: ApproxType::Type2,
            target_eps: eps_target,
            achieved_gap: gap,
            inner_iterations: k,
            distance_bound: (2.0 * sub.tau * gap).sqrt(),
            converged,
        },
        x,
        z,
        gap_trace: gaps,
    };
    if gap <= eps_target {
        return Ok(finish(x, z, gap, 0, true, gaps));
    }

    // Momentum point and the gradient field ∇x(w), extrapolated linearly
    // from the last two iterates since x(·) is affine.
    let mut w = z.clone();
    let mut gw = g.clone();
    let mut t = 1.0_f64;
    for k in 1..=max_inner {
        let mut z_new = w.clone();
        for (zb, gb) in z_new.blocks_mut().into_iter().zip(gw.blocks()) {
            for (zi, gi) in zb.iter_mut().zip(gb) {
                *zi = (*zi + step * gi).clamp(-lambda, lambda);
            }
        }
        let x_new = sub.recover_primal(&z_new)?;
        let g_new = apply_gradient(&x_new);
        let gap_new = box_gap_terms(&g_new, &z_new, lambda);
        if trace {
            gaps.push(gap_new);
        }
        if gap_new <= eps_target {
            return Ok(finish(x_new, z_new, gap_new, k, true, gaps));
        }
        if gap_new < best.0 {
            best = (gap_new, x_new.clone(), z_new.clone());
        }

        // Restart when the step direction opposes the momentum.
        let mut restart_ip = 0.0;
        for ((wb, zn), zo) in w.blocks().into_iter().zip(z_new.blocks()).zip(z.blocks()) {
            for ((wi, ni), oi) in wb.iter().zip(zn).zip(zo) {
                restart_ip += (wi - ni) * (ni - oi);
            }
        }
        if restart_ip > 0.0 {
            t = 1.0;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let beta = (t - 1.0) / t_next;
        t = t_next;

        w = grid::lincomb(1.0 + beta, &z_new, -beta, &z)?;
        gw = grid::lincomb(1.0 + beta, &g_new, -beta, &g)?;
        z = z_new;
        g = g_new;
    }
    let (bgap, bx, bz) = best;
    Ok(finish(bx, bz, bgap, max_inner, false, gaps))
}

/// Norm of a residual `e ∈ τ∂g(x) + x − y` built from the dual iterate:
/// the subgradient uses `λ·sign(∇x)` where `∇x ≠ 0` and `z` elsewhere.
pub fn subgradient_residual_norm(sub: &ProxSubproblem, x: &RealGrid, z: &VectorField) -> Result<f64> {
    let g = apply_gradient(x);
    let z = project_box(z, sub.lambda);
    let mut zhat = z.clone();
    for (hb, gb) in zhat.blocks_mut().into_iter().zip(g.blocks()) {
        for (h, gi) in hb.iter_mut().zip(gb) {
            if *gi != 0.0 {
                *h = sub.lambda * gi.signum();
            }
        }
    }
    // e = τ∇*ẑ + x − y
    let mut e = grid::lincomb(1.0, x, -1.0, &sub.anchor)?;
    grid::axpy(-sub.tau, &apply_divergence(&zhat), &mut e)?;
    Ok(grid::norm(&e))
}

/// Type-0 precision certified by a subgradient residual: `‖e‖²/(2τ)`.
pub fn check_type0_bound(z: &RealGrid, y: &RealGrid, tau: f64, subgrad_residual_norm: f64) -> Result<f64> {
    grid::check_shapes(z, y)?;
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter(format!("tau must be positive, got {tau}")));
    }
    Ok(subgrad_residual_norm * subgrad_residual_norm / (2.0 * tau))
}

/// Inner-solver policy for the TV prox inside an outer run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InnerSettings {
    pub max_inner: usize,
    pub step_scale: f64,
    pub warm_start: bool,
}

/// The nonsmooth primal term `g`.
#[derive(Clone, Debug, PartialEq)]
pub enum PrimalTerm {
    Zero,
    Tv { lambda: f64 },
}

pub struct PrimalProxResult {
    pub x: RealGrid,
    pub z: Option<VectorField>,
    pub cert: ProxCertificate,
}

impl PrimalTerm {
    pub fn value(&self, x: &RealGrid) -> f64 {
        match self {
            PrimalTerm::Zero => 0.0,
            PrimalTerm::Tv { lambda } => lambda * grid::norms(&apply_gradient(x)).l1,
        }
    }

    pub fn is_exact(&self) -> bool {
        matches!(self, PrimalTerm::Zero)
    }

    pub fn prox(
        &self,
        v: &RealGrid,
        tau: f64,
        eps_target: f64,
        warm_z: Option<&VectorField>,
        settings: &InnerSettings,
    ) -> Result<PrimalProxResult> {
        match self {
            PrimalTerm::Zero => Ok(PrimalProxResult {
                x: v.clone(),
                z: None,
                cert: ProxCertificate::exact(),
            }),
            PrimalTerm::Tv { lambda } => {
                let sub = ProxSubproblem::new(v.clone(), tau, *lambda)?;
                let warm = if settings.warm_start { warm_z } else { None };
                let sol = solve_tv_prox(&sub, eps_target, warm, settings.max_inner, settings.step_scale)?;
                Ok(PrimalProxResult {
                    x: sol.x,
                    z: Some(sol.z),
                    cert: sol.cert,
                })
            }
        }
    }
}

/// The dual term `h*` with its exact prox.
pub trait DualTerm: Send + Sync {
    type Space: Vector;

    fn prox(&self, ybar: &Self::Space, sigma: f64) -> Result<Self::Space>;
    /// `h*(y)`, `+∞` outside the domain.
    fn conjugate_value(&self, y: &Self::Space) -> Result<f64>;
    /// `h(v)`.
    fn value(&self, v: &Self::Space) -> Result<f64>;
    /// Strong convexity modulus of `h*`.
    fn modulus(&self) -> f64;
}

/// Relative slack allowed when testing box membership of averaged iterates.
const BOX_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fidelity {
    L1,
    L2,
}

/// Data fidelity `h(v) = ‖v − f‖₁` or `½‖v − f‖²`.
#[derive(Clone, Debug)]
pub struct DataTerm {
    pub fidelity: Fidelity,
    pub data: RealGrid,
    /// Drop the `−σf` shift in the L1 dual prox.
    pub paper_literal: bool,
}

impl DataTerm {
    pub fn new(fidelity: Fidelity, data: RealGrid) -> Self {
        Self {
            fidelity,
            data,
            paper_literal: false,
        }
    }
}

impl DualTerm for DataTerm {
    type Space = RealGrid;

    fn prox(&self, ybar: &RealGrid, sigma: f64) -> Result<RealGrid> {
        match self.fidelity {
            Fidelity::L1 if self.paper_literal => {
                dual_prox_l1_data(ybar, sigma, &self.data.zeros_like())
            }
            Fidelity::L1 => dual_prox_l1_data(ybar, sigma, &self.data),
            Fidelity::L2 => dual_prox_l2_data(ybar, sigma, &self.data),
        }
    }

    fn conjugate_value(&self, y: &RealGrid) -> Result<f64> {
        let lin = grid::inner_product(y, &self.data)?;
        match self.fidelity {
            Fidelity::L1 => {
                if grid::norms(y).linf > 1.0 + BOX_SLACK {
                    Ok(f64::INFINITY)
                } else {
                    Ok(lin)
                }
            }
            Fidelity::L2 => Ok(lin + 0.5 * grid::norm_sq(y)),
        }
    }

    fn value(&self, v: &RealGrid) -> Result<f64> {
        let r = grid::lincomb(1.0, v, -1.0, &self.data)?;
        Ok(match self.fidelity {
            Fidelity::L1 => grid::norms(&r).l1,
            Fidelity::L2 => 0.5 * grid::norm_sq(&r),
        })
    }

    fn modulus(&self) -> f64 {
        match self.fidelity {
            Fidelity::L1 => 0.0,
            Fidelity::L2 => 1.0,
        }
    }
}

/// `h = λ‖·‖₁` on gradient fields, so `h*` is the indicator of the λ-box.
#[derive(Clone, Debug)]
pub struct TvBoxTerm {
    pub lambda: f64,
}

impl DualTerm for TvBoxTerm {
    type Space = VectorField;

    fn prox(&self, ybar: &VectorField, sigma: f64) -> Result<VectorField> {
        check_sigma(sigma)?;
        Ok(project_box(ybar, self.lambda))
    }

    fn conjugate_value(&self, y: &VectorField) -> Result<f64> {
        if grid::norms(y).linf > self.lambda * (1.0 + BOX_SLACK) {
            Ok(f64::INFINITY)
        } else {
            Ok(0.0)
        }
    }

    fn value(&self, v: &VectorField) -> Result<f64> {
        Ok(self.lambda * grid::norms(v).l1)
    }

    fn modulus(&self) -> f64 {
        0.0
    }
}

/// Separable sum `h(v₁, v₂) = h₁(v₁) + h₂(v₂)`.
#[derive(Clone, Debug)]
pub struct PairTerm<A, B> {
    pub first: A,
    pub second: B,
}

impl<A: DualTerm, B: DualTerm> DualTerm for PairTerm<A, B> {
    type Space = Pair<A::Space, B::Space>;

    fn prox(&self, ybar: &Self::Space, sigma: f64) -> Result<Self::Space> {
        Ok(Pair::new(
            self.first.prox(&ybar.first, sigma)?,
            self.second.prox(&ybar.second, sigma)?,
        ))
    }

    fn conjugate_value(&self, y: &Self::Space) -> Result<f64> {
        Ok(self.first.conjugate_value(&y.first)? + self.second.conjugate_value(&y.second)?)
    }

    fn value(&self, v: &Self::Space) -> Result<f64> {
        Ok(self.first.value(&v.first)? + self.second.value(&v.second)?)
    }

    fn modulus(&self) -> f64 {
        self.first.modulus().min(self.second.modulus())
    }
}
