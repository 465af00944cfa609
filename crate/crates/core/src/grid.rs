//! Grid containers and the vector algebra shared by every other module.
//!
//! [`RealGrid`] is a row-major scalar field, [`VectorField`] a pair of grids
//! holding a discrete gradient, and [`Pair`] glues two spaces together for
//! stacked dual variables. All reductions run left to right over the blocks
//! returned by [`Vector::blocks`], so results are bitwise reproducible.

use crate::error::{Error, Result};

/// Common view of the vector spaces used by the solvers.
pub trait Vector: Clone + std::fmt::Debug + Send + Sync {
    /// One `(rows, cols)` entry per block.
    fn shape(&self) -> Vec<(usize, usize)>;
    fn blocks(&self) -> Vec<&[f64]>;
    fn blocks_mut(&mut self) -> Vec<&mut [f64]>;
    fn zeros_like(&self) -> Self;
}

#[derive(Clone, Debug, PartialEq)]
pub struct RealGrid {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl RealGrid {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidGrid(format!("empty shape {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::InvalidGrid(format!(
                "{} values for a {rows}x{cols} grid",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid(format!("non-finite value at index {i}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "grid dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(rows > 0 && cols > 0, "grid dimensions must be positive");
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn same_shape(&self, other: &RealGrid) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> RealGrid {
        RealGrid {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

impl Vector for RealGrid {
    fn shape(&self) -> Vec<(usize, usize)> {
        vec![(self.rows, self.cols)]
    }

    fn blocks(&self) -> Vec<&[f64]> {
        vec![&self.data]
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.data]
    }

    fn zeros_like(&self) -> Self {
        RealGrid::zeros(self.rows, self.cols)
    }
}

/// Two components of a discrete gradient field.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    pub dx: RealGrid,
    pub dy: RealGrid,
}

impl VectorField {
    pub fn new(dx: RealGrid, dy: RealGrid) -> Result<Self> {
        if !dx.same_shape(&dy) {
            return Err(Error::ShapeMismatch {
                left: dx.shape(),
                right: dy.shape(),
            });
        }
        Ok(Self { dx, dy })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            dx: RealGrid::zeros(rows, cols),
            dy: RealGrid::zeros(rows, cols),
        }
    }

    pub fn rows(&self) -> usize {
        self.dx.rows()
    }

    pub fn cols(&self) -> usize {
        self.dx.cols()
    }
}

impl Vector for VectorField {
    fn shape(&self) -> Vec<(usize, usize)> {
        vec![(self.dx.rows, self.dx.cols), (self.dy.rows, self.dy.cols)]
    }

    fn blocks(&self) -> Vec<&[f64]> {
        vec![&self.dx.data, &self.dy.data]
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.dx.data, &mut self.dy.data]
    }

    fn zeros_like(&self) -> Self {
        VectorField::zeros(self.rows(), self.cols())
    }
}

/// Product space element, used for the stacked dual `(y₁, y₂)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair<A, B> {
    pub first: A,
    pub second: B,
}

impl<A: Vector, B: Vector> Pair<A, B> {
    pub fn new(first: A, second: B) -> Self {
        Self { first, second }
    }
}

impl<A: Vector, B: Vector> Vector for Pair<A, B> {
    fn shape(&self) -> Vec<(usize, usize)> {
        let mut s = self.first.shape();
        s.extend(self.second.shape());
        s
    }

    fn blocks(&self) -> Vec<&[f64]> {
        let mut b = self.first.blocks();
        b.extend(self.second.blocks());
        b
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut b = self.first.blocks_mut();
        b.extend(self.second.blocks_mut());
        b
    }

    fn zeros_like(&self) -> Self {
        Pair {
            first: self.first.zeros_like(),
            second: self.second.zeros_like(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Norms {
    pub l1: f64,
    pub l2: f64,
    pub linf: f64,
}

pub fn check_shapes<V: Vector>(u: &V, v: &V) -> Result<()> {
    let (a, b) = (u.shape(), v.shape());
    if a != b {
        return Err(Error::ShapeMismatch { left: a, right: b });
    }
    Ok(())
}

pub fn inner_product<V: Vector>(u: &V, v: &V) -> Result<f64> {
    check_shapes(u, v)?;
    let mut acc = 0.0;
    for (a, b) in u.blocks().into_iter().zip(v.blocks()) {
        for (x, y) in a.iter().zip(b) {
            acc += x * y;
        }
    }
    Ok(acc)
}

pub fn norms<V: Vector>(u: &V) -> Norms {
    let (mut l1, mut sq, mut linf) = (0.0_f64, 0.0_f64, 0.0_f64);
    for block in u.blocks() {
        for &x in block {
            l1 += x.abs();
            sq += x * x;
            linf = linf.max(x.abs());
        }
    }
    Norms {
        l1,
        l2: sq.sqrt(),
        linf,
    }
}

pub fn norm_sq<V: Vector>(u: &V) -> f64 {
    let mut sq = 0.0;
    for block in u.blocks() {
        for &x in block {
            sq += x * x;
        }
    }
    sq
}

pub fn norm<V: Vector>(u: &V) -> f64 {
    norm_sq(u).sqrt()
}

/// `‖u − v‖²` without allocating the difference.
pub fn dist_sq<V: Vector>(u: &V, v: &V) -> Result<f64> {
    check_shapes(u, v)?;
    let mut sq = 0.0;
    for (a, b) in u.blocks().into_iter().zip(v.blocks()) {
        for (x, y) in a.iter().zip(b) {
            let d = x - y;
            sq += d * d;
        }
    }
    Ok(sq)
}

pub fn dist<V: Vector>(u: &V, v: &V) -> Result<f64> {
    Ok(dist_sq(u, v)?.sqrt())
}

/// Componentwise `a·u + b·v`.
pub fn lincomb<V: Vector>(a: f64, u: &V, b: f64, v: &V) -> Result<V> {
    check_shapes(u, v)?;
    let mut out = u.clone();
    for (o, w) in out.blocks_mut().into_iter().zip(v.blocks()) {
        for (x, y) in o.iter_mut().zip(w) {
            *x = a * *x + b * y;
        }
    }
    Ok(out)
}

/// `y ← y + a·x`.
pub fn axpy<V: Vector>(a: f64, x: &V, y: &mut V) -> Result<()> {
    check_shapes(x, y)?;
    for (o, w) in y.blocks_mut().into_iter().zip(x.blocks()) {
        for (t, s) in o.iter_mut().zip(w) {
            *t += a * s;
        }
    }
    Ok(())
}

pub fn scale<V: Vector>(a: f64, u: &V) -> V {
    let mut out = u.clone();
    for block in out.blocks_mut() {
        for x in block.iter_mut() {
            *x *= a;
        }
    }
    out
}

/// Fills a copy of `template` with standard normal draws.
pub fn random_normal_like<V: Vector, R: rand::Rng>(template: &V, rng: &mut R) -> V {
    let mut out = template.zeros_like();
    for block in out.blocks_mut() {
        for x in block.iter_mut() {
            *x = rng.sample(rand_distr::StandardNormal);
        }
    }
    out
}

pub fn seeded_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

pub fn is_finite<V: Vector>(u: &V) -> bool {
    u.blocks().iter().all(|b| b.iter().all(|x| x.is_finite()))
}
