//! mnvton-core: a desk-scale, dependency-light study of single-network
//! multimodal attention with modality-specific normalization, applied to a
//! synthetic try-on inpainting task.
//!
//! The crate builds everything from a small f64 tensor core with reverse-mode
//! autodiff: transformer blocks whose normalization is split per modality
//! group, the dual-network (reference-stack) and query-restricted baselines,
//! a toy denoising-diffusion training loop, image metrics, and analysis tools
//! (parameter/FLOP accounting, per-block PCA of garment features, variant
//! ablations). Determinism is a contract: every random draw is seeded and
//! reruns reproduce artifacts bit-for-bit.
//!
//! The math core ([`tensor`], [`tape`], [`modality`], [`metrics`],
//! [`linalg`]) is generic over a scalar type; the crate root pins the f64
//! aliases used by the model and training layers.

pub mod analysis;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod modality;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod toytask;
pub mod train;

pub use error::{Error, Result};
pub use rng::SplitMix64;
pub use scalar::Scalar;
pub use tape::{grad_check, TVar, GRAD_CHECK_H};

/// Concrete scalar used by the model, training and task layers.
pub type Tensor = tensor::TensorBase<f64>;
/// Gradient tape over [`Tensor`].
pub type Tape = tape::GradTape<f64>;
