//! Two-branch real-time semantic segmentation engine.
//!
//! Everything runs on the CPU with no external ML dependencies: a dense
//! 4-D tensor library, the NN kernels, a static-graph reverse-mode
//! autodiff engine, the architecture blocks and full-model builder, a
//! static cost model, and a small training stack.
//!
//! All numeric code is generic over the scalar type ([`scalar::Scalar`],
//! implemented for `f32` and `f64`): networks train in f32 while gradient
//! verification runs the same code paths in f64.

pub mod analysis;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod image_io;
pub mod labels;
pub mod graph;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Shape4, Tensor};

/// Single-precision tensor, the training/inference default.
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor, used by gradient verification.
pub type Tensor64 = Tensor<f64>;
