//! Minimal reverse-mode differentiation over dense channel-first tensors.
//!
//! Grid tensors are laid out `[channels, d0, d1(, d2)]` in row-major order.
//! A [`Graph`] is a tape: every op appends a node holding its forward value,
//! and [`Graph::backward`] sweeps the tape once in reverse.

mod graph;
pub mod kernels;
mod tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

pub use graph::{Gradients, Graph, UpsampleMode, Var};
pub use tensor::Tensor;

/// Scalar type of a graph: `f32` for training, `f64` for gradient checks.
pub trait Real:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + 'static
{
    fn lit(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn lit(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
