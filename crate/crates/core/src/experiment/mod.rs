//! Deblurring experiments: problem assembly, ground truth, solver runs and
//! the CSV/JSON records they produce.

pub mod images;
pub mod pgm;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use images::{add_noise, synth_image, NoiseSpec, SynthKind};

use crate::certificates::{fit_slope, FitMode, SaddleReference, SlopeFit};
use crate::error::{Error, Result};
use crate::grid::{self, Pair, RealGrid, VectorField};
use crate::operators::{
    apply_gradient, estimate_operator_norm, Gradient, ImageOperator, LinearMap, LinearOperatorHandle, Stacked,
};
use crate::prox::{DataTerm, DualTerm, Fidelity, PrimalTerm, TvBoxTerm};
use crate::solvers::{
    run_exact_baseline, run_inexact_pd_observed, smooth_step_solve, Mode, RunEntry, RunOptions, RunRecord,
    SaddleProblem, ScheduleKind, Schedules, SmoothQuadratic, StepState, Variant,
};

/// CSV header of a run record.
pub const CSV_HEADER: [&str; 13] = [
    "n",
    "tau",
    "sigma",
    "theta",
    "F",
    "relerr",
    "erg_relerr",
    "lag_gap",
    "eps_target",
    "eps_achieved",
    "inner_it",
    "cum_inner_it",
    "rhs_bound",
];

/// Relative slack, in units of `scale`, for `lag_gap ≤ rhs_bound`.
pub const BOUND_TOL: f64 = 1e-6;

/// Power iteration budget for the operator norm estimates.
const NORM_ITERS: usize = 2000;
const NORM_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    Tvl1,
    Tvl2,
    Tvl2Smooth,
}

impl std::str::FromStr for ProblemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tvl1" => Ok(ProblemKind::Tvl1),
            "tvl2" => Ok(ProblemKind::Tvl2),
            "tvl2-smooth" | "tvl2_smooth" => Ok(ProblemKind::Tvl2Smooth),
            other => Err(Error::InvalidParameter(format!("unknown problem '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Pdhg,
    PdhgAccel,
    IpdBasic,
    IpdReduced,
    IpdPrimalAccel,
    IpdDualAccel,
    IpdSmooth,
}

impl Algorithm {
    pub fn variant(self) -> Variant {
        match self {
            Algorithm::Pdhg => Variant::ExactPdhg,
            Algorithm::PdhgAccel => Variant::ExactPdhgAccel,
            Algorithm::IpdBasic => Variant::Basic,
            Algorithm::IpdReduced => Variant::Reduced,
            Algorithm::IpdPrimalAccel => Variant::PrimalAccel,
            Algorithm::IpdDualAccel => Variant::DualAccel,
            Algorithm::IpdSmooth => Variant::Smooth,
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "pdhg" => Algorithm::Pdhg,
            "pdhg-accel" => Algorithm::PdhgAccel,
            "ipd-basic" => Algorithm::IpdBasic,
            "ipd-reduced" => Algorithm::IpdReduced,
            "ipd-primal-accel" => Algorithm::IpdPrimalAccel,
            "ipd-dual-accel" => Algorithm::IpdDualAccel,
            "ipd-smooth" => Algorithm::IpdSmooth,
            other => return Err(Error::InvalidParameter(format!("unknown algorithm '{other}'"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum ImageSource {
    Synth(SynthKind),
    File(PathBuf),
}

impl std::str::FromStr for ImageSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.strip_prefix("synth:") {
            Some(kind) => Ok(ImageSource::Synth(kind.parse()?)),
            None => Ok(ImageSource::File(PathBuf::from(s))),
        }
    }
}

/// How the inner gap target is scaled.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum GapConstantMode {
    /// The duality gap of the first inner subproblem at `z = 0`.
    Auto,
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub problem: ProblemKind,
    pub algorithm: Algorithm,
    pub lambda: f64,
    pub gamma_smooth: f64,
    pub alpha: f64,
    pub q: f64,
    pub gap_constant: GapConstantMode,
    pub n_outer: usize,
    pub max_inner: usize,
    pub mode: Mode,
    /// `None` scales FWHM 12 at width 256 to the image width.
    pub blur_fwhm: Option<f64>,
    pub noise: NoiseSpec,
    pub image: ImageSource,
    pub rows: usize,
    pub cols: usize,
    pub seed: u64,
    pub ground_truth_iters: usize,
    pub output: Option<PathBuf>,
    pub paper_literal: bool,
    pub beta: f64,
    pub fit_from: usize,
    pub fit_to: usize,
}

impl ExperimentConfig {
    /// Desk-scale defaults for a problem and algorithm.
    pub fn new(problem: ProblemKind, algorithm: Algorithm) -> Self {
        let (lambda, noise, gamma) = match problem {
            ProblemKind::Tvl1 => (0.5, NoiseSpec::SaltPepper(0.5), 0.0),
            ProblemKind::Tvl2 => (0.01, NoiseSpec::Gaussian(0.01), 0.0),
            ProblemKind::Tvl2Smooth => (0.01, NoiseSpec::Gaussian(0.01), 1e-3),
        };
        let (fit_from, fit_to) = if algorithm == Algorithm::IpdSmooth { (20, 150) } else { (100, 2000) };
        Self {
            problem,
            algorithm,
            lambda,
            gamma_smooth: gamma,
            alpha: 1.0,
            q: 0.9,
            gap_constant: GapConstantMode::Auto,
            n_outer: 2000,
            max_inner: 1000,
            mode: Mode::Practical,
            blur_fwhm: None,
            noise,
            image: ImageSource::Synth(SynthKind::Shapes),
            rows: 64,
            cols: 64,
            seed: 0,
            ground_truth_iters: 20_000,
            output: None,
            paper_literal: false,
            beta: 0.0,
            fit_from,
            fit_to,
        }
    }

    pub fn fwhm(&self, cols: usize) -> f64 {
        self.blur_fwhm.unwrap_or(12.0 * cols as f64 / 256.0)
    }

    /// The metric and fit mode reported in the summary.
    pub fn summary_fit(&self) -> (SummaryMetric, FitMode) {
        if self.algorithm == Algorithm::IpdSmooth {
            (SummaryMetric::RelErr, FitMode::SemiLog)
        } else {
            (SummaryMetric::ErgRelErr, FitMode::LogLog)
        }
    }

    /// Inner error schedule before the gap constant is applied.
    pub fn primal_schedule(&self) -> ScheduleKind {
        match self.algorithm.variant() {
            Variant::ExactPdhg | Variant::ExactPdhgAccel => ScheduleKind::Zero,
            Variant::Smooth => ScheduleKind::Geometric { c: 1.0, q: self.q },
            Variant::PrimalAccel | Variant::DualAccel => ScheduleKind::Polynomial {
                c: 1.0,
                alpha: 2.0 * self.alpha,
            },
            Variant::Basic | Variant::Reduced => ScheduleKind::Polynomial { c: 1.0, alpha: self.alpha },
        }
    }

    /// Checks combinations that no theorem covers.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be nonnegative, got {}", self.lambda));
        }
        if !(self.gamma_smooth >= 0.0 && self.gamma_smooth.is_finite()) {
            return bad(format!("gamma must be nonnegative, got {}", self.gamma_smooth));
        }
        if self.problem != ProblemKind::Tvl2Smooth && self.gamma_smooth != 0.0 {
            return bad("gamma is only used by tvl2-smooth".into());
        }
        if self.problem == ProblemKind::Tvl2Smooth && self.gamma_smooth == 0.0 {
            return bad("tvl2-smooth needs gamma > 0".into());
        }
        if self.n_outer == 0 || self.max_inner == 0 {
            return bad("n-outer and max-inner must be positive".into());
        }
        if self.rows < 2 || self.cols < 2 {
            return bad(format!("image size {}x{} too small", self.rows, self.cols));
        }
        if self.ground_truth_iters < 1000 {
            return bad(format!("gt-iters must be at least 1000, got {}", self.ground_truth_iters));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be nonnegative, got {}", self.beta));
        }
        if self.beta != 0.0 && self.algorithm != Algorithm::IpdBasic {
            return bad("beta only applies to ipd-basic".into());
        }
        if let GapConstantMode::Fixed(c) = self.gap_constant {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("gap constant must be positive, got {c}"));
            }
        }
        if self.paper_literal && self.problem != ProblemKind::Tvl1 {
            return bad("--paper-literal only changes the tvl1 dual update".into());
        }
        let smooth = self.problem == ProblemKind::Tvl2Smooth;
        let l1 = self.problem == ProblemKind::Tvl1;
        match self.algorithm {
            Algorithm::IpdReduced if smooth => bad("ipd-reduced requires f = 0; use ipd-basic".into()),
            Algorithm::IpdDualAccel if l1 => {
                bad("ipd-dual-accel needs a strongly convex h*; tvl1 has μ = 0".into())
            }
            Algorithm::IpdSmooth if !smooth => bad("ipd-smooth needs γ > 0 and μ > 0 (tvl2-smooth)".into()),
            Algorithm::IpdPrimalAccel | Algorithm::PdhgAccel if !smooth => {
                bad(format!("{:?} needs a strongly convex primal (tvl2-smooth)", self.algorithm))
            }
            _ => Ok(()),
        }?;
        let variant = self.algorithm.variant();
        match variant {
            Variant::Smooth => {
                if !(self.q > 0.0 && self.q < 1.0) {
                    return bad(format!("q must lie in (0, 1), got {}", self.q));
                }
            }
            Variant::ExactPdhg | Variant::ExactPdhgAccel => {}
            _ => {
                if !(self.alpha > 0.0 && self.alpha.is_finite()) {
                    return bad(format!("alpha must be positive, got {}", self.alpha));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummaryMetric {
    RelErr,
    ErgRelErr,
    LagGap,
}

impl std::str::FromStr for SummaryMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relerr" => Ok(SummaryMetric::RelErr),
            "erg_relerr" => Ok(SummaryMetric::ErgRelErr),
            "lag_gap" => Ok(SummaryMetric::LagGap),
            other => Err(Error::InvalidParameter(format!("unknown metric '{other}'"))),
        }
    }
}

pub type NestedProblem = SaddleProblem<ImageOperator, DataTerm>;
pub type StackedProblem = SaddleProblem<Stacked<ImageOperator, Gradient>, PairTerm>;
pub type PairTerm = crate::prox::PairTerm<DataTerm, TvBoxTerm>;
pub type StackedDual = Pair<RealGrid, VectorField>;

/// Both formulations of one deblurring instance.
pub struct BuiltProblem {
    pub clean: RealGrid,
    pub data: RealGrid,
    /// `K = A`, `h*` the data term, `g = λ‖∇·‖₁` with an inexact prox.
    pub nested: NestedProblem,
    /// `K = (A, ∇)`, `h*` the data term plus the λ-box, `g = 0`.
    pub stacked: StackedProblem,
    /// Power-iteration estimate of `‖A‖` before the safety factor.
    pub norm_estimate: f64,
}

pub fn load_clean_image(config: &ExperimentConfig) -> Result<RealGrid> {
    match &config.image {
        ImageSource::Synth(kind) => Ok(synth_image(*kind, config.rows, config.cols, config.seed)),
        ImageSource::File(path) => pgm::read_pgm(path),
    }
}

/// Builds blur, noise and both saddle formulations.
pub fn build_problem(config: &ExperimentConfig) -> Result<BuiltProblem> {
    config.validate()?;
    let clean = load_clean_image(config)?;
    let (rows, cols) = (clean.rows(), clean.cols());
    let a = ImageOperator::blur_or_identity(config.fwhm(cols), rows, cols)?;
    let data = add_noise(&a.apply(&clean)?, config.noise, config.seed)?;
    build_from_data(config, clean, data, a)
}

/// Assembles the formulations around already degraded data.
pub fn build_from_data(
    config: &ExperimentConfig,
    clean: RealGrid,
    data: RealGrid,
    a: ImageOperator,
) -> Result<BuiltProblem> {
    let (rows, cols) = (data.rows(), data.cols());
    let mut handle = LinearOperatorHandle::new(a.clone());
    let norm_estimate = estimate_operator_norm(&mut handle, NORM_ITERS, NORM_TOL, config.seed)?;
    let a_bound = handle.norm_bound();
    // ‖(A, ∇)‖² ≤ ‖A‖² + ‖∇‖² and ‖∇‖² ≤ 8.
    let stacked_bound = (a_bound * a_bound + 8.0).sqrt();

    let fidelity = match config.problem {
        ProblemKind::Tvl1 => Fidelity::L1,
        ProblemKind::Tvl2 | ProblemKind::Tvl2Smooth => Fidelity::L2,
    };
    let data_term = DataTerm::new(fidelity, data.clone());
    let mut run_term = data_term.clone();
    run_term.paper_literal = config.paper_literal;
    let smooth = match config.problem {
        ProblemKind::Tvl2Smooth => Some(SmoothQuadratic {
            gamma: config.gamma_smooth,
        }),
        _ => None,
    };
    let nested = SaddleProblem {
        op: handle,
        smooth,
        primal: PrimalTerm::Tv { lambda: config.lambda },
        primal_modulus: 0.0,
        dual: run_term,
    };
    let stacked = SaddleProblem {
        op: LinearOperatorHandle::with_norm_bound(Stacked::new(a, Gradient::new(rows, cols)), stacked_bound)?,
        smooth,
        primal: PrimalTerm::Zero,
        primal_modulus: 0.0,
        dual: PairTerm {
            first: data_term,
            second: TvBoxTerm { lambda: config.lambda },
        },
    };
    Ok(BuiltProblem {
        clean,
        data,
        nested,
        stacked,
        norm_estimate,
    })
}

/// `τ = σ = 0.99/L`.
pub fn baseline_steps(l: f64) -> (f64, f64) {
    (0.99 / l, 0.99 / l)
}

/// `τ₀ = 0.99/L`, `σ₀ = (1 − τ₀L_f)/(τ₀L²)`.
pub fn accelerated_baseline_steps(l: f64, l_f: f64) -> (f64, f64) {
    let tau = 0.99 / l;
    (tau, (1.0 - tau * l_f) / (tau * l * l))
}

/// Initial step state of the configured algorithm.
pub fn initial_steps(config: &ExperimentConfig, built: &BuiltProblem) -> Result<StepState> {
    let variant = config.algorithm.variant();
    let l = built.nested.op.norm_bound();
    let l_f = built.nested.l_f();
    let state = match variant {
        Variant::ExactPdhg => {
            let (t, s) = baseline_steps(built.stacked.op.norm_bound());
            StepState::new(variant, t, s)
        }
        Variant::ExactPdhgAccel => {
            let (t, s) = accelerated_baseline_steps(built.stacked.op.norm_bound(), built.stacked.l_f());
            StepState::new(variant, t, s)
        }
        Variant::Basic => {
            let (t, s) = baseline_steps(l);
            let mut st = StepState::new(variant, t, s);
            st.beta = config.beta;
            let v = t * l_f + s * t * l * l + t * config.beta * l;
            if v >= 1.0 {
                return Err(Error::StepCondition(format!(
                    "τ = σ = 0.99/L gives τL_f + στL² + τβL = {v} ≥ 1; reduce beta"
                )));
            }
            st
        }
        Variant::Reduced => {
            let (t, s) = baseline_steps(l);
            StepState::new(variant, t, s)
        }
        Variant::PrimalAccel => StepState::new(variant, 1.0 / (2.0 * l_f), l_f / (l * l)),
        Variant::DualAccel => StepState::new(variant, 1.0 / l, 1.0 / l),
        Variant::Smooth => smooth_step_solve(l_f, built.nested.dual.modulus(), l, l_f)?,
    };
    Ok(state)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapConstant {
    pub value: f64,
    pub provenance: String,
}

/// `λ‖∇v‖₁` for the first prox input `v = x⁰ − τ₀(K*y¹ + ∇f(x⁰))`; falls
/// back to 1 when that is zero.
pub fn gap_constant(problem: &NestedProblem, state0: &StepState, x0: &RealGrid, y0: &RealGrid) -> Result<GapConstant> {
    let lambda = match problem.primal {
        PrimalTerm::Tv { lambda } => lambda,
        PrimalTerm::Zero => {
            return Ok(GapConstant {
                value: 1.0,
                provenance: "fallback: exact primal prox".into(),
            })
        }
    };
    let mut ybar = y0.clone();
    grid::axpy(state0.sigma, &problem.op.apply(x0)?, &mut ybar)?;
    let y1 = problem.dual.prox(&ybar, state0.sigma)?;
    let mut dir = problem.op.adjoint(&y1)?;
    if let Some(s) = problem.smooth {
        grid::axpy(1.0, &s.gradient(x0), &mut dir)?;
    }
    let v = grid::lincomb(1.0, x0, -state0.tau, &dir)?;
    Ok(tv_gap_at_zero(lambda, &v))
}

/// Duality gap of the TV prox subproblem at `z = 0`, i.e. `λ‖∇v‖₁`.
pub fn tv_gap_at_zero(lambda: f64, v: &RealGrid) -> GapConstant {
    let value = lambda * grid::norms(&apply_gradient(v)).l1;
    if value > 0.0 && value.is_finite() {
        GapConstant {
            value,
            provenance: "first inner subproblem gap at z = 0".into(),
        }
    } else {
        log_warning("first inner subproblem has zero gap; using C = 1");
        GapConstant {
            value: 1.0,
            provenance: "fallback: zero first-subproblem gap".into(),
        }
    }
}

fn log_warning(msg: &str) {
    eprintln!("warning: {msg}");
}

/// Ground-truth saddle point from a long exact PDHG run on the stacked
/// formulation.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub x_star: RealGrid,
    pub y_star: StackedDual,
    pub f_star: f64,
    pub est_accuracy: f64,
    pub iters: usize,
    /// `F(x_{iters/2})`.
    pub f_half: f64,
}

impl GroundTruth {
    pub fn provenance(&self) -> String {
        format!("exact PDHG on (A, ∇), {} iterations", self.iters)
    }

    pub fn nested_reference(&self) -> SaddleReference<RealGrid> {
        SaddleReference {
            x_star: self.x_star.clone(),
            y_star: self.y_star.first.clone(),
            f_star: self.f_star,
            provenance: self.provenance(),
            est_accuracy: self.est_accuracy,
        }
    }

    pub fn stacked_reference(&self) -> SaddleReference<StackedDual> {
        SaddleReference {
            x_star: self.x_star.clone(),
            y_star: self.y_star.clone(),
            f_star: self.f_star,
            provenance: self.provenance(),
            est_accuracy: self.est_accuracy,
        }
    }
}

/// Runs exact PDHG (accelerated when the primal is strongly convex) from
/// zero for `iters` iterations.
pub fn compute_ground_truth(problem: &StackedProblem, iters: usize) -> Result<GroundTruth> {
    if iters < 1000 {
        return Err(Error::InvalidParameter(format!("ground truth needs at least 1000 iterations, got {iters}")));
    }
    let l = problem.op.norm_bound();
    let state0 = if problem.l_f() > 0.0 {
        let (t, s) = accelerated_baseline_steps(l, problem.l_f());
        StepState::new(Variant::ExactPdhgAccel, t, s)
    } else {
        let (t, s) = baseline_steps(l);
        StepState::new(Variant::ExactPdhg, t, s)
    };
    let x0 = problem.op.map().domain_zeros();
    let y0 = problem.op.map().codomain_zeros();
    let out = run_exact_baseline(problem, state0, iters, &x0, &y0, None)?;
    let entries = out.record.entries();
    let f_star = problem.primal_energy(&out.x)?;
    let f_half = entries[iters / 2 - 1].primal_energy;
    Ok(GroundTruth {
        x_star: out.x,
        y_star: out.y,
        f_star,
        est_accuracy: (f_star - f_half).abs(),
        iters,
        f_half,
    })
}

/// `max(1, |F*|)`; tolerances on energies and gaps are relative to it.
pub fn energy_scale(f_star: f64) -> f64 {
    f_star.abs().max(1.0)
}

/// `(F − F*)/F*`, or `F − F*` when `F* = 0`.
pub fn relative_error(f: f64, f_star: f64) -> f64 {
    if f_star == 0.0 {
        f - f_star
    } else {
        (f - f_star) / f_star
    }
}

/// One CSV row, as written and as parsed back.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvRow {
    pub n: usize,
    pub tau: f64,
    pub sigma: f64,
    pub theta: f64,
    pub f: f64,
    pub relerr: f64,
    pub erg_relerr: f64,
    pub lag_gap: Option<f64>,
    pub eps_target: f64,
    pub eps_achieved: f64,
    pub inner_it: usize,
    pub cum_inner_it: usize,
    pub rhs_bound: Option<f64>,
}

impl CsvRow {
    pub fn from_entry(e: &RunEntry, f_star: f64) -> Self {
        Self {
            n: e.n,
            tau: e.tau,
            sigma: e.sigma,
            theta: e.theta,
            f: e.primal_energy,
            relerr: relative_error(e.primal_energy, f_star),
            erg_relerr: relative_error(e.ergodic_primal_energy, f_star),
            lag_gap: e.lagrangian_gap,
            eps_target: e.eps_target,
            eps_achieved: e.eps_achieved,
            inner_it: e.inner_iterations,
            cum_inner_it: e.cumulative_inner_iterations,
            rhs_bound: e.rhs_bound,
        }
    }

    fn fields(&self) -> Vec<String> {
        let r = |v: f64| format!("{v:?}");
        let o = |v: Option<f64>| v.map(r).unwrap_or_default();
        vec![
            self.n.to_string(),
            r(self.tau),
            r(self.sigma),
            r(self.theta),
            r(self.f),
            r(self.relerr),
            r(self.erg_relerr),
            o(self.lag_gap),
            r(self.eps_target),
            r(self.eps_achieved),
            self.inner_it.to_string(),
            self.cum_inner_it.to_string(),
            o(self.rhs_bound),
        ]
    }

    fn parse(rec: &csv::StringRecord, line: usize) -> Result<Self> {
        if rec.len() != CSV_HEADER.len() {
            return Err(Error::InvalidParameter(format!(
                "line {line}: expected {} fields, found {}",
                CSV_HEADER.len(),
                rec.len()
            )));
        }
        let bad = |k: usize| Error::InvalidParameter(format!("line {line}: cannot parse {} = '{}'", CSV_HEADER[k], &rec[k]));
        let real = |k: usize| rec[k].parse::<f64>().map_err(|_| bad(k));
        let int = |k: usize| rec[k].parse::<usize>().map_err(|_| bad(k));
        let opt = |k: usize| if rec[k].is_empty() { Ok(None) } else { real(k).map(Some) };
        Ok(Self {
            n: int(0)?,
            tau: real(1)?,
            sigma: real(2)?,
            theta: real(3)?,
            f: real(4)?,
            relerr: real(5)?,
            erg_relerr: real(6)?,
            lag_gap: opt(7)?,
            eps_target: real(8)?,
            eps_achieved: real(9)?,
            inner_it: int(10)?,
            cum_inner_it: int(11)?,
            rhs_bound: opt(12)?,
        })
    }

    pub fn metric(&self, m: SummaryMetric) -> f64 {
        match m {
            SummaryMetric::RelErr => self.relerr,
            SummaryMetric::ErgRelErr => self.erg_relerr,
            SummaryMetric::LagGap => self.lag_gap.unwrap_or(f64::NAN),
        }
    }

    /// `lag_gap ≤ rhs_bound + tol`; rows without both values pass.
    pub fn bound_holds(&self, tol: f64) -> bool {
        match (self.lag_gap, self.rhs_bound) {
            (Some(g), Some(r)) => g <= r + tol,
            _ => true,
        }
    }
}

/// Streams rows to a `\n`-terminated CSV sink.
pub struct CsvSink<W: Write> {
    writer: csv::Writer<W>,
}

impl<W: Write> CsvSink<W> {
    pub fn new(inner: W) -> Result<Self> {
        let mut writer = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(inner);
        writer.write_record(CSV_HEADER)?;
        Ok(Self { writer })
    }

    pub fn write_row(&mut self, row: &CsvRow) -> Result<()> {
        self.writer.write_record(row.fields())?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> Result<W> {
        self.writer
            .into_inner()
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    }
}

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = reader.headers()?.clone();
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(Error::InvalidParameter(format!("unexpected CSV header {:?}", header)));
    }
    reader
        .records()
        .enumerate()
        .map(|(k, rec)| CsvRow::parse(&rec?, k + 2))
        .collect()
}

pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>> {
    parse_csv(&std::fs::read_to_string(path)?)
}

/// JSON summary written next to the CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub slope: Option<f64>,
    pub r2: Option<f64>,
    pub bound_ok: bool,
    pub config: ExperimentConfig,
    pub metric: SummaryMetric,
    pub fit_mode: FitMode,
    pub fit_from: usize,
    pub fit_to: usize,
    pub fit_points: usize,
    pub f_star: f64,
    pub ground_truth_accuracy: f64,
    pub ground_truth_provenance: String,
    pub scale: f64,
    pub bound_tolerance: f64,
    pub bound_violations: usize,
    pub descent_ok: bool,
    pub descent_violations: usize,
    pub gap_constant: GapConstant,
    pub norm_estimate: f64,
    pub norm_bound: f64,
    pub step0: StepState,
    pub unconverged_inner: usize,
    pub total_inner_iterations: usize,
}

pub fn summary_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

pub struct ExperimentOutcome {
    pub csv: String,
    pub rows: Vec<CsvRow>,
    pub summary: Summary,
    pub record: RunRecord,
    pub x: RealGrid,
    pub x_ergodic: RealGrid,
    pub ground_truth: GroundTruth,
}

pub fn fit_rows(rows: &[CsvRow], metric: SummaryMetric, from: usize, to: usize, mode: FitMode) -> Result<SlopeFit> {
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.n as f64, r.metric(metric))).collect();
    fit_slope(&pts, from as f64, to as f64, mode)
}

/// Build, ground truth, run and record. With `config.output` set the CSV is
/// streamed to that file (and flushed on failure) and the summary is written
/// next to it.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let built = build_problem(config).map_err(|e| e.at_stage("build"))?;
    let gt = compute_ground_truth(&built.stacked, config.ground_truth_iters).map_err(|e| e.at_stage("ground_truth"))?;
    run_with_ground_truth(config, &built, gt)
}

/// [`run_experiment`] with a precomputed ground truth.
pub fn run_with_ground_truth(config: &ExperimentConfig, built: &BuiltProblem, gt: GroundTruth) -> Result<ExperimentOutcome> {
    let scale = energy_scale(gt.f_star);
    let file = match &config.output {
        Some(p) => Some(BufWriter::new(File::create(p).map_err(|e| Error::from(e).at_stage("write"))?)),
        None => None,
    };
    let mut buffer = CsvSink::new(Vec::new())?;
    let mut file_sink = match file {
        Some(f) => Some(CsvSink::new(f).map_err(|e| e.at_stage("write"))?),
        None => None,
    };
    let mut rows = Vec::with_capacity(config.n_outer);
    let f_star = gt.f_star;

    let result = solve(config, built, &gt, &mut |entry| {
        let row = CsvRow::from_entry(entry, f_star);
        buffer.write_row(&row)?;
        if let Some(s) = file_sink.as_mut() {
            s.write_row(&row).map_err(|e| e.at_stage("write"))?;
        }
        rows.push(row);
        Ok(())
    });
    if let Some(s) = file_sink.as_mut() {
        s.flush().map_err(|e| e.at_stage("write"))?;
    }
    let (out, state0, gap) = result?;
    drop(file_sink);

    let (metric, fit_mode) = config.summary_fit();
    let fit_to = config.fit_to.min(config.n_outer);
    let fit = fit_rows(&rows, metric, config.fit_from, fit_to, fit_mode).ok();
    let tol = BOUND_TOL * scale;
    let bound_violations = rows.iter().filter(|r| !r.bound_holds(tol)).count();
    let descent_violations = out
        .record
        .entries()
        .iter()
        .filter(|e| e.descent.as_ref().is_some_and(|d| !d.holds))
        .count();
    let norm_bound = match config.algorithm.variant() {
        Variant::ExactPdhg | Variant::ExactPdhgAccel => built.stacked.op.norm_bound(),
        _ => built.nested.op.norm_bound(),
    };
    let summary = Summary {
        slope: fit.as_ref().map(|f| f.slope),
        r2: fit.as_ref().map(|f| f.r2),
        bound_ok: bound_violations == 0,
        config: config.clone(),
        metric,
        fit_mode,
        fit_from: config.fit_from,
        fit_to,
        fit_points: fit.as_ref().map_or(0, |f| f.points),
        f_star,
        ground_truth_accuracy: gt.est_accuracy,
        ground_truth_provenance: gt.provenance(),
        scale,
        bound_tolerance: BOUND_TOL,
        bound_violations,
        descent_ok: descent_violations == 0,
        descent_violations,
        gap_constant: gap,
        norm_estimate: built.norm_estimate,
        norm_bound,
        step0: state0,
        unconverged_inner: out.record.entries().iter().filter(|e| !e.inner_converged).count(),
        total_inner_iterations: out.record.entries().last().map_or(0, |e| e.cumulative_inner_iterations),
    };
    if let Some(p) = &config.output {
        let json = serde_json::to_string_pretty(&summary)?;
        std::fs::write(summary_path(p), json + "\n").map_err(|e| Error::from(e).at_stage("write"))?;
    }
    let csv = String::from_utf8(buffer.into_inner()?).expect("CSV output is UTF-8");
    Ok(ExperimentOutcome {
        csv,
        rows,
        summary,
        record: out.record,
        x: out.x,
        x_ergodic: out.x_ergodic,
        ground_truth: gt,
    })
}

struct Solved {
    record: RunRecord,
    x: RealGrid,
    x_ergodic: RealGrid,
}

fn solve(
    config: &ExperimentConfig,
    built: &BuiltProblem,
    gt: &GroundTruth,
    observer: &mut dyn FnMut(&RunEntry) -> Result<()>,
) -> Result<(Solved, StepState, GapConstant)> {
    let state0 = initial_steps(config, built).map_err(|e| e.at_stage("solve"))?;
    let x0 = built.nested.op.map().domain_zeros();
    match state0.variant {
        Variant::ExactPdhg | Variant::ExactPdhgAccel => {
            let y0 = built.stacked.op.map().codomain_zeros();
            let reference = gt.stacked_reference();
            let mut opts = RunOptions::new(config.n_outer, Mode::Practical, 1);
            opts.seed = config.seed;
            let out = run_inexact_pd_observed_exact(&built.stacked, state0, &opts, &x0, &y0, &reference, observer)
                .map_err(|e| e.at_stage("solve"))?;
            let gap = GapConstant {
                value: 1.0,
                provenance: "exact baseline".into(),
            };
            Ok((out, state0, gap))
        }
        _ => {
            let y0 = built.nested.op.map().codomain_zeros();
            let gap = match config.gap_constant {
                GapConstantMode::Auto => gap_constant(&built.nested, &state0, &x0, &y0).map_err(|e| e.at_stage("solve"))?,
                GapConstantMode::Fixed(c) => GapConstant {
                    value: c,
                    provenance: "fixed by configuration".into(),
                },
            };
            let schedules = Schedules::with_primal_eps(config.primal_schedule())?;
            let mut opts = RunOptions::new(config.n_outer, config.mode, config.max_inner);
            opts.gap_constant = gap.value;
            opts.seed = config.seed;
            let reference = gt.nested_reference();
            let out = run_inexact_pd_observed(&built.nested, state0, &schedules, &opts, &x0, &y0, Some(&reference), observer)
                .map_err(|e| e.at_stage("solve"))?;
            Ok((
                Solved {
                    record: out.record,
                    x: out.x,
                    x_ergodic: out.x_ergodic,
                },
                state0,
                gap,
            ))
        }
    }
}

fn run_inexact_pd_observed_exact(
    problem: &StackedProblem,
    state0: StepState,
    opts: &RunOptions,
    x0: &RealGrid,
    y0: &StackedDual,
    reference: &SaddleReference<StackedDual>,
    observer: &mut dyn FnMut(&RunEntry) -> Result<()>,
) -> Result<Solved> {
    let out = crate::solvers::run_exact_baseline_observed(problem, state0, opts.n_outer, x0, y0, Some(reference), observer)?;
    Ok(Solved {
        record: out.record,
        x: out.x,
        x_ergodic: out.x_ergodic,
    })
}

/// Result of re-checking a stored record.
#[derive(Clone, Debug, PartialEq)]
pub struct CertifyReport {
    pub rows: usize,
    pub checked: usize,
    pub bound_violations: Vec<usize>,
    pub descent_ok: bool,
    pub monotone_cumulative: bool,
    pub row_count_ok: bool,
}

impl CertifyReport {
    pub fn ok(&self) -> bool {
        self.bound_violations.is_empty() && self.descent_ok && self.monotone_cumulative && self.row_count_ok
    }
}

/// Re-checks `lag_gap ≤ rhs_bound + tol·scale` on every row of a CSV and
/// the descent verdict of its JSON summary.
pub fn certify(csv_path: &Path) -> Result<CertifyReport> {
    let rows = read_csv(csv_path)?;
    let summary: Summary = serde_json::from_str(&std::fs::read_to_string(summary_path(csv_path))?)?;
    let tol = summary.bound_tolerance * summary.scale;
    let bound_violations = rows.iter().filter(|r| !r.bound_holds(tol)).map(|r| r.n).collect();
    Ok(CertifyReport {
        rows: rows.len(),
        checked: rows.iter().filter(|r| r.lag_gap.is_some() && r.rhs_bound.is_some()).count(),
        bound_violations,
        descent_ok: summary.descent_ok,
        monotone_cumulative: rows.windows(2).all(|w| w[0].cum_inner_it <= w[1].cum_inner_it),
        row_count_ok: rows.len() == summary.config.n_outer,
    })
}

/// Fits a metric of a stored CSV over `n ∈ [from, to]`.
pub fn rates(csv_path: &Path, metric: SummaryMetric, from: usize, to: usize, mode: FitMode) -> Result<SlopeFit> {
    fit_rows(&read_csv(csv_path)?, metric, from, to, mode)
}

#[cfg(test)]
mod tests;
