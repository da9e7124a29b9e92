//! Dense tensors and a minimal reverse-mode autodiff tape.

mod conv;
mod dense;
mod gradcheck;
mod graph;

pub use dense::Tensor;
pub use gradcheck::{
    directional_check, grad_check, grad_check_report, GradCheckReport, GradEntry, NOISE_ULPS,
    REL_FLOOR,
};
pub use graph::{CustomBackward, Graph, Var};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::rng::Rng;

/// Tensor with i.i.d. `N(0, std²)` entries.
pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// Tensor with i.i.d. `U(lo, hi)` entries.
pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}
