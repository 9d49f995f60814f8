//! Optimizers over a flat parameter vector.
//!
//! [`ivon::GaussianState`] maintains a diagonal Gaussian posterior
//! `q(theta) = N(mu, sigma^2)` over every trainable scalar and updates it with
//! the IVON natural-gradient scheme; [`adam::AdamState`] is the conventional
//! point-estimate baseline. Both sit behind the [`Optimizer`] trait so the
//! training loop can swap them, and the trait is where the cost structure of
//! the posterior-based importance metrics is enforced: scorers that need
//! `(mu, sigma)` call [`Optimizer::posterior`], which only the variational
//! optimizer provides — there is no gradient input anywhere in that path.

pub mod adam;
pub mod ivon;
pub mod schedule;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use ivon::{
    hessian_vs_squared_grad_diagnostic, GaussianState, HessianDiagnostic, IvonConfig, PriorSpec,
};
pub use schedule::LrSchedule;

use crate::error::Result;
use crate::numerics::SplitMix64;
use serde::{Deserialize, Serialize};

/// Read-only view of a variational posterior: the mean vector and the derived
/// per-parameter standard deviation.
pub struct Posterior<'a> {
    pub mean: &'a [f64],
    pub sigma: Vec<f64>,
}

/// Serializable optimizer state for checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerSnapshot {
    Ivon {
        mu: Vec<f64>,
        h: Vec<f64>,
        m: Vec<f64>,
        step: u64,
        lambda_ess: f64,
        delta: f64,
    },
    Adam {
        params: Vec<f64>,
        m: Vec<f64>,
        v: Vec<f64>,
        step: u64,
    },
}

/// Common interface the training loop drives.
///
/// Protocol per step: call [`Optimizer::draw`] for the parameter vector to
/// evaluate the loss at (a posterior sample for IVON, the current point for
/// Adam), compute the gradient there, then hand both back to
/// [`Optimizer::update`].
pub trait Optimizer {
    fn dim(&self) -> usize;

    fn set_lr(&mut self, lr: f64);

    fn step_count(&self) -> u64;

    /// Parameter vector at which the next gradient must be evaluated.
    fn draw(&mut self, rng: &mut SplitMix64) -> Vec<f64>;

    /// Consumes the gradient evaluated at `theta` (the vector from `draw`).
    fn update(&mut self, theta: &[f64], grad: &[f64]) -> Result<()>;

    /// Current point estimate of the parameters (posterior mean for IVON).
    fn mean(&self) -> &[f64];

    /// Posterior view for Bayesian importance metrics; `None` when the
    /// optimizer does not maintain one.
    fn posterior(&self) -> Option<Posterior<'_>>;

    fn snapshot(&self) -> OptimizerSnapshot;
}
