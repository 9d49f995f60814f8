//! Deterministic numeric kernels: dense matrices, seeded sampling, the
//! standard-normal CDF, and a finite-difference gradient oracle.

pub mod gradcheck;
pub mod matrix;
pub mod rng;
pub mod special;

pub use gradcheck::finite_diff_grad;
pub use matrix::Matrix;
pub use rng::{sample_gaussian, SplitMix64};
pub use special::{erf, normal_cdf};
