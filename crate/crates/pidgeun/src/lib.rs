//! PIDGeuN: a physics-informed dynamic graph neural network for predicting
//! transient dynamics of networked microgrids from bus measurements.
//!
//! The crate covers the full pipeline:
//!
//! - [`graph`]: admittance-derived graph representation (adjacency, normalized
//!   and scaled Laplacians, graph Fourier basis).
//! - [`tensor`]: a dense-tensor engine with reverse-mode automatic
//!   differentiation, sized for desk-scale grids.
//! - [`model`]: the encoder / graph-attention / physics-infused adjacency /
//!   Chebyshev-convolution / decoder architecture.
//! - [`loss`]: prediction loss, Kirchhoff-law residual loss, and explicit
//!   state integration.
//! - [`sim`]: a synthetic networked-microgrid transient simulator used to
//!   generate training and test data.
//! - [`dataset`]: on-disk dataset format and extended-state assembly.
//! - [`training`]: normalization, Adam with exponential learning-rate decay,
//!   the training loop, and checkpointing.
//! - [`eval`]: one-step and cumulative rollout metrics, a ridge linear
//!   baseline, and the ablation runner.

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod graph;
pub mod linalg;
pub mod loss;
pub mod model;
pub mod oracles;
pub mod sim;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
