//! A small reverse-mode autodiff engine over `ndarray`.
//!
//! The engine is a define-by-run tape: every operation appends a node holding
//! its value and a backward closure. It is generic over the element type so
//! the same network code trains in `f32` and gradient-checks in `f64`.
//!
//! Determinism: all operators are deterministic for a fixed input, including
//! under rayon parallelism. Batched kernels split work per sample and reduce
//! partial results in index order, so thread count never changes the bits.

mod adam;
mod conv;
pub mod gradcheck;
mod layers;
mod ops;
mod param;
mod tape;

pub use adam::Adam;
pub use conv::{conv2d_output_size, Pad};
pub use layers::{normal_param, BatchNorm2d, Conv2d, Linear};
pub use ops::{input_vec, mean_value};
pub use param::Param;
pub use tape::{Grads, Tape, Tensor};

use ndarray::NdFloat;
use num_traits::FromPrimitive;

/// Element type the engine operates on. Implemented for `f32` and `f64`.
pub trait Scalar: NdFloat + FromPrimitive + 'static {
    const DTYPE: &'static str;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
}

/// Shorthand for converting an `f64` constant into the element type.
#[inline]
pub fn cst<F: Scalar>(v: f64) -> F {
    F::from_f64(v).expect("constant representable")
}

/// Draw `n` standard-normal values through Box-Muller. Sampling happens in
/// `f64` and is cast down, so a given rng state yields the same pattern for
/// every element type.
pub fn normal_draws<F: Scalar, R: rand::Rng>(rng: &mut R, n: usize, mean: f64, std: f64) -> Vec<F> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u1: f64 = 1.0 - rng.random::<f64>();
        let u2: f64 = rng.random::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        out.push(cst::<F>(mean + std * r * theta.cos()));
        if out.len() < n {
            out.push(cst::<F>(mean + std * r * theta.sin()));
        }
    }
    out
}
