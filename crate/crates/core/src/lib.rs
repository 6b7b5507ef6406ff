//! Spike-and-slab RBMs with tiled-convolutional weight sharing, their deep
//! belief network extensions, and the full texture-modeling pipeline around
//! them: training (CD/PCD/FPCD), synthesis, inpainting and evaluation.
//!
//! Numeric kernels are generic over the scalar type (`scalar::Real`, f32 or
//! f64); the aliases below fix the double-precision instantiations that the
//! CLI and file formats use.

pub mod data;
pub mod dbn;
pub mod error;
pub mod metrics;
pub mod oracle;
pub mod protocol;
pub mod rng;
pub mod scalar;
pub mod ssrbm;
pub mod tiling;
pub mod train;
pub mod upper;

pub use error::{Error, Result};
pub use scalar::Real;

/// Double-precision image grid (the default working type).
pub type Image = ndarray::Array2<f64>;
/// Single-precision image grid.
pub type Image32 = ndarray::Array2<f32>;
/// Per-unit value stack, one plane per feature map.
pub type UnitMaps = ndarray::Array3<f64>;
/// Double-precision model stack.
pub type Dbn = dbn::DbnModel<f64>;
/// Single-precision model stack.
pub type Dbn32 = dbn::DbnModel<f32>;
