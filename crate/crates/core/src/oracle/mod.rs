//! Exact reference computations for tiny models: enumeration over the binary
//! variables combined with closed-form Gaussian integrals, plus quadrature
//! cross-checks. Every conditional, marginal and gradient the layers
//! implement is validated against this module.

pub mod brbm;
pub mod linalg;
pub mod ssrbm;
pub mod ssvis;

pub use brbm::TinyBrbm;
pub use linalg::{gauss_hermite, gh_log_integral, logsumexp};
pub use ssrbm::{TinySsRbm, TinySsRbmGrads};
pub use ssvis::{TinySsVis, TinySsVisGrads};

use ndarray::Array1;

/// Enumeration guard: 2^bits states must stay tractable.
pub const MAX_ENUM_BITS: usize = 22;

/// Binary configuration `mask` as a 0/1 vector of length `n` (bit i = unit i).
pub fn bit_vector(n: usize, mask: usize) -> Array1<f64> {
    Array1::from_shape_fn(n, |i| ((mask >> i) & 1) as f64)
}

/// Index of a binary vector in enumeration order.
pub fn bit_index(h: &Array1<f64>) -> usize {
    h.iter()
        .enumerate()
        .map(|(i, &x)| if x > 0.5 { 1usize << i } else { 0 })
        .sum()
}
