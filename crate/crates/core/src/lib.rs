//! Dynamic token halting for sparse regional attention over voxelized scenes.

pub mod backbone;
pub mod diagnostics;
pub mod edf;
pub mod error;
pub mod halting;
pub mod losses;
pub mod model;
pub mod params;
pub mod rng;
pub mod scene;
pub mod sweep;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/scenes.md")]
    mod scenes {}
    #[doc = include_str!("../../../book/src/attention.md")]
    mod attention {}
    #[doc = include_str!("../../../book/src/halting.md")]
    mod halting {}
    #[doc = include_str!("../../../book/src/passes.md")]
    mod passes {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/verification.md")]
    mod verification {}
}
