//! Reverse-mode differentiation over dense 2-D arrays.
//!
//! The tape records each operation as an [`tape::Op`] variant; `backward`
//! walks the nodes in reverse insertion order, which is a valid topological
//! order since every node is created after its parents.

mod adam;
pub mod gradcheck;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use tape::{Gradients, Tape, Var};

use ndarray::{LinalgScalar, ScalarOperand};

/// Floating-point element type usable on the tape.
pub trait Real:
    nalgebra::RealField + LinalgScalar + ScalarOperand + Copy + Default + Send + Sync + std::fmt::Debug
{
    fn of_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    /// Zero for subnormal inputs; subnormal arithmetic is very slow on common CPUs.
    fn flush_subnormal(self) -> Self;
}

impl Real for f32 {
    fn of_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn flush_subnormal(self) -> Self {
        if self.is_subnormal() {
            0.0
        } else {
            self
        }
    }
}

impl Real for f64 {
    fn of_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn flush_subnormal(self) -> Self {
        if self.is_subnormal() {
            0.0
        } else {
            self
        }
    }
}
