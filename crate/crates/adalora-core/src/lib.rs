//! Adaptive low-rank adaptation with variational training, at desk scale.
//!
//! The crate implements the full AdaLoRA-style training stack on top of a
//! small, self-contained numeric core:
//!
//! - [`numerics`]: dense `f64` matrices, a fixed seeded PRNG (SplitMix64 +
//!   Marsaglia polar normals), the standard-normal CDF, and a
//!   finite-difference gradient oracle.
//! - [`adapter`]: SVD-parameterized delta weights `W = W0 + P diag(lambda) Q`
//!   with an orthogonality penalty, per-triplet rank masking, and exact
//!   analytic gradients.
//! - [`optim`]: the IVON variational optimizer (diagonal Gaussian posterior
//!   over all adapter scalars) plus an Adam baseline behind one trait.
//! - [`scoring`]: five importance metrics — gradient-based sensitivity with
//!   EMA smoothing, and four posterior-based metrics (|mu|/sigma, the
//!   folded-normal SNR of |theta|, |mu|, 1/sigma) — and per-triplet
//!   aggregation.
//! - [`budget`]: the cubic global rank-budget schedule and the top-k
//!   allocation step that masks everything below the cut.
//! - [`task`], [`model`], [`train`], [`report`]: synthetic teacher–student
//!   tasks with planted per-layer delta ranks, the adapter MLP, the training
//!   loop, and experiment reporting.
//!
//! **Orientation convention (fixed repo-wide):** activations are row vectors;
//! a layer with weight `W` of shape `d1 x d2` maps a batch `x` of shape
//! `batch x d1` to `y = x * W` of shape `batch x d2`. `P` is `d1 x r`, `Q` is
//! `r x d2`, and the adapter delta is `P diag(lambda ⊙ mask) Q`.

pub mod adapter;
pub mod budget;
pub mod error;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod report;
pub mod scoring;
pub mod stats;
pub mod task;
pub mod train;

pub use error::{Error, Result};
