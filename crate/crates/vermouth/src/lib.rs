//! Vermouth: a desk-scale study of diffusion models as visual feature
//! extractors.
//!
//! The crate wires a toy latent-diffusion backbone (fixed patch encoder,
//! conditional U-net), a lightweight discriminative expert, and a U-shaped
//! fusion head into three task evaluators (classification, retrieval,
//! segmentation) over deterministic synthetic shape datasets. A CLI harness
//! drives sweeps and ablations and writes CSV/JSON/SVG reports.
//!
//! Everything is pure Rust: tensors are dense row-major buffers, gradients
//! come from a small reverse-mode tape, and every random draw flows from an
//! explicit seed so that a (config, seed) pair reproduces byte-identical
//! artifacts.

pub mod autodiff;
pub mod backbone;
pub mod conditioning;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod expert;
pub mod fusion;
pub mod harness;
pub mod io;
pub mod params;
pub mod report;
pub mod rng;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
