//! Minimal tape-based neural network toolkit: dynamic-dimensional tensors
//! with reverse-mode autodiff, a named parameter store, and Adam.
//!
//! Generic over `f32` (training speed) and `f64` (gradient verification).

mod adam;
mod graph;
pub mod params;

pub use adam::Adam;
pub use graph::{Graph, Var};
pub use params::{ParamId, ParamStore};

/// Floating-point element type of the network.
pub trait Real: ndarray::NdFloat + num_traits::Float + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}
