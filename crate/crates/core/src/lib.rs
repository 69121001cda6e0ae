//! Contrastive image-text learning with optimal-transport soft targets.
//!
//! The crate is organized bottom-up:
//!
//! * [`numerics`]: dense matrices, softmax, cross-entropy.
//! * [`sinkhorn`]: entropic optimal transport by Sinkhorn-Knopp scaling.
//! * [`targets`]: hard, label-smoothing, distillation and transport targets.
//! * [`losses`]: the combined contrastive loss and its analytic gradients.
//! * [`trainer`]: linear encoders, EMA teacher, SGD with cosine annealing.
//! * [`synthdata`]: seeded synthetic paired data and the embedding file format.
//! * [`evaluation`]: zero-shot KNN, flat hit@K, matching statistics and the
//!   compositional retrieval benchmark.
//! * [`cli`]: the `otter` command-line driver.

pub mod cli;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod numerics;
pub mod sinkhorn;
pub mod synthdata;
pub mod targets;
pub mod trainer;

pub use error::{OtterError, Result};
