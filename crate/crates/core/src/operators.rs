//! Linear operators: discrete gradient/divergence, periodic Gaussian blur,
//! identity, and stacks of these, plus power-iteration norm estimation.

use crate::error::{Error, Result};
use crate::grid::{self, Pair, RealGrid, Vector, VectorField};

/// Safety factor applied to power-iteration estimates.
pub const NORM_SAFETY: f64 = 1.001;

pub trait LinearMap: Send + Sync {
    type Domain: Vector;
    type Codomain: Vector;

    fn apply(&self, x: &Self::Domain) -> Result<Self::Codomain>;
    fn adjoint(&self, y: &Self::Codomain) -> Result<Self::Domain>;
    fn domain_zeros(&self) -> Self::Domain;
    fn codomain_zeros(&self) -> Self::Codomain;
}

fn check_grid(u: &RealGrid, rows: usize, cols: usize) -> Result<()> {
    if u.rows() != rows || u.cols() != cols {
        return Err(Error::ShapeMismatch {
            left: u.shape(),
            right: vec![(rows, cols)],
        });
    }
    Ok(())
}

/// Forward differences with Neumann boundary (last difference is zero).
pub fn apply_gradient(u: &RealGrid) -> VectorField {
    let (rows, cols) = (u.rows(), u.cols());
    let mut dx = RealGrid::zeros(rows, cols);
    let mut dy = RealGrid::zeros(rows, cols);
    let src = u.data();
    {
        let dxd = dx.data_mut();
        for i in 0..rows {
            let r = i * cols;
            for j in 0..cols - 1 {
                dxd[r + j] = src[r + j + 1] - src[r + j];
            }
        }
    }
    {
        let dyd = dy.data_mut();
        for i in 0..rows - 1 {
            let r = i * cols;
            for j in 0..cols {
                dyd[r + j] = src[r + cols + j] - src[r + j];
            }
        }
    }
    VectorField { dx, dy }
}

/// Backward differences, the negative adjoint of [`apply_gradient`].
pub fn apply_divergence(p: &VectorField) -> RealGrid {
    let (rows, cols) = (p.rows(), p.cols());
    let mut out = RealGrid::zeros(rows, cols);
    let px = p.dx.data();
    let py = p.dy.data();
    let o = out.data_mut();
    for i in 0..rows {
        let r = i * cols;
        for j in 0..cols {
            let mut v = 0.0;
            if j < cols - 1 {
                v += px[r + j];
            }
            if j > 0 {
                v -= px[r + j - 1];
            }
            if i < rows - 1 {
                v += py[r + j];
            }
            if i > 0 {
                v -= py[r + j - cols];
            }
            o[r + j] = v;
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct Gradient {
    rows: usize,
    cols: usize,
}

impl Gradient {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }
}

impl LinearMap for Gradient {
    type Domain = RealGrid;
    type Codomain = VectorField;

    fn apply(&self, x: &RealGrid) -> Result<VectorField> {
        check_grid(x, self.rows, self.cols)?;
        Ok(apply_gradient(x))
    }

    fn adjoint(&self, y: &VectorField) -> Result<RealGrid> {
        check_grid(&y.dx, self.rows, self.cols)?;
        check_grid(&y.dy, self.rows, self.cols)?;
        let mut d = apply_divergence(y);
        for v in d.data_mut() {
            *v = -*v;
        }
        Ok(d)
    }

    fn domain_zeros(&self) -> RealGrid {
        RealGrid::zeros(self.rows, self.cols)
    }

    fn codomain_zeros(&self) -> VectorField {
        VectorField::zeros(self.rows, self.cols)
    }
}

#[derive(Clone, Debug)]
pub struct Identity {
    rows: usize,
    cols: usize,
}

impl Identity {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }
}

impl LinearMap for Identity {
    type Domain = RealGrid;
    type Codomain = RealGrid;

    fn apply(&self, x: &RealGrid) -> Result<RealGrid> {
        check_grid(x, self.rows, self.cols)?;
        Ok(x.clone())
    }

    fn adjoint(&self, y: &RealGrid) -> Result<RealGrid> {
        self.apply(y)
    }

    fn domain_zeros(&self) -> RealGrid {
        RealGrid::zeros(self.rows, self.cols)
    }

    fn codomain_zeros(&self) -> RealGrid {
        RealGrid::zeros(self.rows, self.cols)
    }
}

/// Separable Gaussian convolution with periodic boundary.
#[derive(Clone, Debug)]
pub struct GaussianBlur {
    rows: usize,
    cols: usize,
    radius: usize,
    kernel: Vec<f64>,
}

impl GaussianBlur {
    pub fn new(fwhm: f64, rows: usize, cols: usize) -> Result<Self> {
        if !(fwhm > 0.0 && fwhm.is_finite()) {
            return Err(Error::InvalidParameter(format!("blur fwhm must be positive, got {fwhm}")));
        }
        let sigma = fwhm / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt());
        let radius = (3.0 * sigma).ceil() as usize;
        let mut kernel: Vec<f64> = (0..=2 * radius)
            .map(|k| {
                let t = k as f64 - radius as f64;
                (-t * t / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let total: f64 = kernel.iter().sum();
        for k in kernel.iter_mut() {
            *k /= total;
        }
        Ok(Self {
            rows,
            cols,
            radius,
            kernel,
        })
    }

    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    fn convolve(&self, u: &RealGrid) -> RealGrid {
        let (rows, cols) = (self.rows, self.cols);
        let r = self.radius;
        let k = &self.kernel;
        let src = u.data();
        let mut tmp = vec![0.0; rows * cols];
        let mut padded = vec![0.0; cols + 2 * r];
        for i in 0..rows {
            let row = &src[i * cols..(i + 1) * cols];
            for (p, v) in padded.iter_mut().enumerate() {
                *v = row[(p + cols * (r / cols + 1) - r) % cols];
            }
            for (j, t) in tmp[i * cols..(i + 1) * cols].iter_mut().enumerate() {
                *t = k.iter().zip(&padded[j..j + 2 * r + 1]).map(|(w, v)| w * v).sum();
            }
        }
        let mut out = RealGrid::zeros(rows, cols);
        let o = out.data_mut();
        for i in 0..rows {
            let dst = &mut o[i * cols..(i + 1) * cols];
            for (t, w) in k.iter().enumerate() {
                let ii = (i + t + rows * (r / rows + 1) - r) % rows;
                for (d, v) in dst.iter_mut().zip(&tmp[ii * cols..(ii + 1) * cols]) {
                    *d += w * v;
                }
            }
        }
        out
    }
}

impl LinearMap for GaussianBlur {
    type Domain = RealGrid;
    type Codomain = RealGrid;

    fn apply(&self, x: &RealGrid) -> Result<RealGrid> {
        check_grid(x, self.rows, self.cols)?;
        Ok(self.convolve(x))
    }

    fn adjoint(&self, y: &RealGrid) -> Result<RealGrid> {
        self.apply(y)
    }

    fn domain_zeros(&self) -> RealGrid {
        RealGrid::zeros(self.rows, self.cols)
    }

    fn codomain_zeros(&self) -> RealGrid {
        RealGrid::zeros(self.rows, self.cols)
    }
}

/// The image-space operator `A` of the deblurring problems.
#[derive(Clone, Debug)]
pub enum ImageOperator {
    Identity(Identity),
    Blur(GaussianBlur),
}

impl ImageOperator {
    /// Blur with the given FWHM; a FWHM of zero gives the identity.
    pub fn blur_or_identity(fwhm: f64, rows: usize, cols: usize) -> Result<Self> {
        if fwhm == 0.0 {
            Ok(ImageOperator::Identity(Identity::new(rows, cols)))
        } else {
            Ok(ImageOperator::Blur(GaussianBlur::new(fwhm, rows, cols)?))
        }
    }
}

impl LinearMap for ImageOperator {
    type Domain = RealGrid;
    type Codomain = RealGrid;

    fn apply(&self, x: &RealGrid) -> Result<RealGrid> {
        match self {
            ImageOperator::Identity(m) => m.apply(x),
            ImageOperator::Blur(m) => m.apply(x),
        }
    }

    fn adjoint(&self, y: &RealGrid) -> Result<RealGrid> {
        match self {
            ImageOperator::Identity(m) => m.adjoint(y),
            ImageOperator::Blur(m) => m.adjoint(y),
        }
    }

    fn domain_zeros(&self) -> RealGrid {
        match self {
            ImageOperator::Identity(m) => m.domain_zeros(),
            ImageOperator::Blur(m) => m.domain_zeros(),
        }
    }

    fn codomain_zeros(&self) -> RealGrid {
        self.domain_zeros()
    }
}

/// `x ↦ (A x, B x)`; the adjoint sums the part adjoints.
#[derive(Clone, Debug)]
pub struct Stacked<A, B> {
    pub first: A,
    pub second: B,
}

impl<A, B> Stacked<A, B> {
    pub fn new(first: A, second: B) -> Self {
        Self { first, second }
    }
}

impl<A, B> LinearMap for Stacked<A, B>
where
    A: LinearMap,
    B: LinearMap<Domain = A::Domain>,
{
    type Domain = A::Domain;
    type Codomain = Pair<A::Codomain, B::Codomain>;

    fn apply(&self, x: &A::Domain) -> Result<Self::Codomain> {
        Ok(Pair::new(self.first.apply(x)?, self.second.apply(x)?))
    }

    fn adjoint(&self, y: &Self::Codomain) -> Result<A::Domain> {
        let a = self.first.adjoint(&y.first)?;
        let b = self.second.adjoint(&y.second)?;
        grid::lincomb(1.0, &a, 1.0, &b)
    }

    fn domain_zeros(&self) -> A::Domain {
        self.first.domain_zeros()
    }

    fn codomain_zeros(&self) -> Self::Codomain {
        Pair::new(self.first.codomain_zeros(), self.second.codomain_zeros())
    }
}

/// A linear map together with a certified bound on its norm.
#[derive(Clone, Debug)]
pub struct LinearOperatorHandle<M> {
    map: M,
    norm_bound: f64,
}

impl<M: LinearMap> LinearOperatorHandle<M> {
    /// The bound starts at +∞ until [`estimate_operator_norm`] runs.
    pub fn new(map: M) -> Self {
        Self {
            map,
            norm_bound: f64::INFINITY,
        }
    }

    pub fn with_norm_bound(map: M, norm_bound: f64) -> Result<Self> {
        if !(norm_bound >= 0.0) {
            return Err(Error::InvalidParameter(format!("norm bound {norm_bound}")));
        }
        Ok(Self { map, norm_bound })
    }

    pub fn map(&self) -> &M {
        &self.map
    }

    pub fn norm_bound(&self) -> f64 {
        self.norm_bound
    }

    pub fn apply(&self, x: &M::Domain) -> Result<M::Codomain> {
        self.map.apply(x)
    }

    pub fn adjoint(&self, y: &M::Codomain) -> Result<M::Domain> {
        self.map.adjoint(y)
    }

    pub fn input_shape(&self) -> Vec<(usize, usize)> {
        self.map.domain_zeros().shape()
    }

    pub fn output_shape(&self) -> Vec<(usize, usize)> {
        self.map.codomain_zeros().shape()
    }
}

/// Power iteration on `K*K` from a seeded Gaussian start.
///
/// Returns the estimate `L̂` and stores `1.001·L̂` as the handle's bound.
pub fn estimate_operator_norm<M: LinearMap>(
    op: &mut LinearOperatorHandle<M>,
    max_iters: usize,
    tol: f64,
    seed: u64,
) -> Result<f64> {
    if max_iters == 0 {
        return Err(Error::InvalidParameter("max_iters must be at least 1".into()));
    }
    let mut rng = grid::seeded_rng(seed);
    let mut v = grid::random_normal_like(&op.map.domain_zeros(), &mut rng);
    let n0 = grid::norm(&v);
    if n0 == 0.0 {
        op.norm_bound = 0.0;
        return Ok(0.0);
    }
    v = grid::scale(1.0 / n0, &v);
    let mut estimate = 0.0;
    for _ in 0..max_iters {
        let kv = op.map.apply(&v)?;
        let current = grid::norm(&kv);
        let w = op.map.adjoint(&kv)?;
        let wn = grid::norm(&w);
        let converged = (current - estimate).abs() <= tol * current;
        estimate = current;
        if wn == 0.0 || converged {
            break;
        }
        v = grid::scale(1.0 / wn, &w);
    }
    op.norm_bound = NORM_SAFETY * estimate;
    Ok(estimate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{inner_product, norm, seeded_rng};

    fn rand_grid(rows: usize, cols: usize, seed: u64) -> RealGrid {
        grid::random_normal_like(&RealGrid::zeros(rows, cols), &mut seeded_rng(seed))
    }

    #[test]
    fn gradient_examples() {
        let c = RealGrid::filled(4, 5, 2.5);
        let g = apply_gradient(&c);
        assert!(g.dx.data().iter().chain(g.dy.data()).all(|&v| v == 0.0));
        let r = RealGrid::new(1, 3, vec![0.0, 1.0, 2.0]).unwrap();
        assert_eq!(apply_gradient(&r).dx.data(), &[1.0, 1.0, 0.0]);
        assert_eq!(apply_gradient(&r).dy.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn divergence_examples() {
        assert!(apply_divergence(&VectorField::zeros(3, 3)).data().iter().all(|&v| v == 0.0));
        let c = RealGrid::filled(5, 4, -1.0);
        assert!(apply_divergence(&apply_gradient(&c)).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_divergence_adjoint() {
        for (rows, cols, seed) in [(8, 8, 1), (16, 16, 2), (1, 7, 3), (5, 1, 4)] {
            let u = rand_grid(rows, cols, seed);
            let p = VectorField {
                dx: rand_grid(rows, cols, seed + 100),
                dy: rand_grid(rows, cols, seed + 200),
            };
            let a = inner_product(&apply_gradient(&u), &p).unwrap();
            let b = inner_product(&u, &apply_divergence(&p)).unwrap();
            assert!((a + b).abs() <= 1e-12 * norm(&u) * norm(&p), "{a} {b}");
        }
    }

    #[test]
    fn blur_preserves_constants_and_mean() {
        let blur = GaussianBlur::new(3.0, 16, 12).unwrap();
        let total: f64 = blur.kernel().iter().sum();
        assert!((total - 1.0).abs() < 1e-15);
        let c = RealGrid::filled(16, 12, 0.7);
        let out = blur.apply(&c).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.7).abs() < 1e-14));
        let u = rand_grid(16, 12, 9);
        let m = blur.apply(&u).unwrap().mean();
        assert!((m - u.mean()).abs() <= 1e-12 * u.data().iter().map(|v| v.abs()).sum::<f64>() / u.len() as f64);
    }

    #[test]
    fn blur_of_centered_delta_is_the_kernel() {
        let blur = GaussianBlur::new(4.0, 21, 21).unwrap();
        let r = blur.radius();
        let mut delta = RealGrid::zeros(21, 21);
        delta.set(10, 10, 1.0);
        let out = blur.apply(&delta).unwrap();
        let k = blur.kernel();
        for i in 0..21usize {
            for j in 0..21usize {
                let di = i as isize - 10;
                let dj = j as isize - 10;
                let expected = if di.unsigned_abs() <= r && dj.unsigned_abs() <= r {
                    k[(di + r as isize) as usize] * k[(dj + r as isize) as usize]
                } else {
                    0.0
                };
                assert!((out.get(i, j) - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn blur_rejects_nonpositive_fwhm() {
        assert!(GaussianBlur::new(0.0, 4, 4).is_err());
        assert!(GaussianBlur::new(-1.0, 4, 4).is_err());
    }

    #[test]
    fn blur_is_self_adjoint() {
        let blur = GaussianBlur::new(3.0, 32, 32).unwrap();
        for seed in 0..5 {
            let u = rand_grid(32, 32, seed);
            let p = rand_grid(32, 32, seed + 50);
            let a = inner_product(&blur.apply(&u).unwrap(), &p).unwrap();
            let b = inner_product(&u, &blur.apply(&p).unwrap()).unwrap();
            assert!((a - b).abs() <= 1e-10 * norm(&u) * norm(&p));
        }
    }

    #[test]
    fn stacked_adjoint_sums_parts() {
        let k = Stacked::new(GaussianBlur::new(2.0, 8, 9).unwrap(), Gradient::new(8, 9));
        let u = rand_grid(8, 9, 1);
        let p = Pair::new(
            rand_grid(8, 9, 2),
            VectorField {
                dx: rand_grid(8, 9, 3),
                dy: rand_grid(8, 9, 4),
            },
        );
        let a = inner_product(&k.apply(&u).unwrap(), &p).unwrap();
        let b = inner_product(&u, &k.adjoint(&p).unwrap()).unwrap();
        assert!((a - b).abs() <= 1e-10 * norm(&u) * norm(&p));
        let parts = grid::lincomb(
            1.0,
            &k.first.adjoint(&p.first).unwrap(),
            1.0,
            &k.second.adjoint(&p.second).unwrap(),
        )
        .unwrap();
        assert_eq!(parts, k.adjoint(&p).unwrap());
    }

    #[test]
    fn shape_errors() {
        let g = Gradient::new(3, 3);
        assert!(g.apply(&RealGrid::zeros(3, 4)).is_err());
        let b = GaussianBlur::new(1.0, 3, 3).unwrap();
        assert!(b.apply(&RealGrid::zeros(2, 3)).is_err());
    }

    #[test]
    fn norm_estimates() {
        let mut id = LinearOperatorHandle::new(Identity::new(6, 7));
        let l = estimate_operator_norm(&mut id, 50, 1e-12, 3).unwrap();
        assert!((l - 1.0).abs() < 1e-12);
        assert!((id.norm_bound() - NORM_SAFETY).abs() < 1e-12);

        let mut grad = LinearOperatorHandle::new(Gradient::new(64, 64));
        let l = estimate_operator_norm(&mut grad, 2000, 1e-10, 7).unwrap();
        assert!((l - 8f64.sqrt()).abs() <= 0.01 * 8f64.sqrt(), "{l}");
        assert!(l <= 8f64.sqrt() + 1e-6);

        let mut blur = LinearOperatorHandle::new(GaussianBlur::new(3.0, 64, 64).unwrap());
        let l = estimate_operator_norm(&mut blur, 2000, 1e-10, 7).unwrap();
        assert!((l - 1.0).abs() < 1e-3, "{l}");
    }

    #[test]
    fn norm_estimate_is_deterministic() {
        let mut a = LinearOperatorHandle::new(Gradient::new(10, 10));
        let mut b = LinearOperatorHandle::new(Gradient::new(10, 10));
        let la = estimate_operator_norm(&mut a, 100, 1e-8, 11).unwrap();
        let lb = estimate_operator_norm(&mut b, 100, 1e-8, 11).unwrap();
        assert_eq!(la.to_bits(), lb.to_bits());
    }

    #[test]
    fn bound_dominates_random_inputs() {
        let mut grad = LinearOperatorHandle::new(Gradient::new(12, 12));
        estimate_operator_norm(&mut grad, 3000, 1e-12, 5).unwrap();
        for seed in 0..20 {
            let u = rand_grid(12, 12, seed);
            assert!(norm(&grad.apply(&u).unwrap()) <= grad.norm_bound() * norm(&u));
        }
    }
}
