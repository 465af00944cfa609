//! Inexact primal-dual splitting for saddle-point problems
//! `min_x max_y ⟨Kx, y⟩ + f(x) + g(x) − h*(y)` with certified prox errors.

pub mod certificates;
pub mod error;
pub mod experiment;
pub mod grid;
pub mod operators;
pub mod prox;
pub mod solvers;

pub use error::{Error, Result};
