//! IVON: variational online Newton with a diagonal Gaussian posterior.
//!
//! The state is `(mu, h, m)` per scalar. `h` estimates the diagonal Hessian of
//! the expected loss and doubles as the posterior precision through
//! `sigma = 1 / sqrt(lambda_ess * (h + delta))`, so the optimizer and the
//! uncertainty estimate are one object — Bayesian importance metrics read
//! `(mu, sigma)` straight out of the optimizer with no extra bookkeeping.
//!
//! One step, given a gradient `g` evaluated at a posterior sample `theta`:
//!
//! ```text
//! hhat = g ⊙ (theta - mu) * lambda_ess * (h + delta)         (= g ⊙ noise / sigma^2)
//! m    <- beta1 * m + (1 - beta1) * g
//! h    <- beta2 * h + (1 - beta2) * hhat
//!           + 0.5 * (1 - beta2)^2 * (h - hhat)^2 / (h + delta),  clipped at 0
//! mu   <- mu - lr * (m / (1 - beta1^step) + delta * mu) / (h + delta)
//! ```
//!
//! `hhat` is the reparameterization-trick Hessian estimator: in expectation
//! over the posterior noise it equals the diagonal of the Hessian, without
//! per-example squared gradients. The `(h - hhat)^2` term is the second-order
//! correction of the natural-gradient update for the precision; float
//! round-off can drive `h` slightly negative, hence the clip. The weight
//! decay `delta` acts through the preconditioner, giving the regularized
//! stationary point `a(mu - c) + delta*mu = 0` on a quadratic `a/2 (x - c)^2`.

use crate::error::{Error, Result};
use crate::numerics::SplitMix64;
use crate::optim::{Optimizer, OptimizerSnapshot, Posterior};
use crate::stats::spearman;
use serde::{Deserialize, Serialize};

/// IVON hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct IvonConfig {
    /// First-moment EMA factor.
    pub beta1: f64,
    /// Hessian EMA factor. The desk-scale harness overrides the conservative
    /// default with faster forgetting (e.g. 0.999) so `h` can adapt within a
    /// few thousand steps.
    pub beta2: f64,
    /// Effective sample size linking Hessian and posterior precision;
    /// conventionally the training-set size.
    pub lambda_ess: f64,
    /// Weight decay, folded into the preconditioner.
    pub delta: f64,
    /// Initial value of every `h` entry.
    pub h_init: f64,
    /// Learning rate; the schedule overwrites this between steps.
    pub lr: f64,
}

impl IvonConfig {
    /// Defaults with `lambda_ess` tied to the dataset size.
    pub fn for_dataset(n_train: usize) -> Self {
        IvonConfig {
            beta1: 0.9,
            beta2: 0.99999,
            lambda_ess: n_train as f64,
            delta: 1e-4,
            h_init: 1.0,
            lr: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.lambda_ess > 0.0
            && self.delta > 0.0
            && self.h_init >= 0.0
            && self.lr > 0.0
            && [self.beta1, self.beta2, self.lambda_ess, self.delta, self.h_init, self.lr]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("ivon hyperparameters out of range: {self:?}")))
        }
    }
}

/// Isotropic Gaussian prior `p(theta) = N(0, prior_variance * I)` for the
/// variational objective.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PriorSpec {
    pub prior_variance: f64,
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.prior_variance.is_finite() && self.prior_variance > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "prior_variance must be finite and > 0, got {}",
                self.prior_variance
            )))
        }
    }
}

/// Diagonal Gaussian posterior plus IVON accumulators.
#[derive(Debug, Clone)]
pub struct GaussianState {
    mu: Vec<f64>,
    h: Vec<f64>,
    m: Vec<f64>,
    step: u64,
    cfg: IvonConfig,
}

/// Guard threshold: any |mu| beyond this aborts the run as diverged.
const DIVERGENCE_LIMIT: f64 = 1e6;

impl GaussianState {
    pub fn new(init_mu: Vec<f64>, cfg: IvonConfig) -> Result<Self> {
        cfg.validate()?;
        if init_mu.is_empty() {
            return Err(Error::InvalidArgument("empty parameter vector".into()));
        }
        if init_mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("initial mu".into()));
        }
        let n = init_mu.len();
        Ok(GaussianState { mu: init_mu, h: vec![cfg.h_init; n], m: vec![0.0; n], step: 0, cfg })
    }

    pub fn config(&self) -> &IvonConfig {
        &self.cfg
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn h(&self) -> &[f64] {
        &self.h
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// `sigma_i = 1 / sqrt(lambda_ess * (h_i + delta))`, strictly positive.
    pub fn posterior_sigma(&self) -> Vec<f64> {
        self.h
            .iter()
            .map(|&h| 1.0 / (self.cfg.lambda_ess * (h + self.cfg.delta)).sqrt())
            .collect()
    }

    /// Posterior sample `theta = mu + sigma ⊙ eps`. The caller passes the
    /// same vector back to [`GaussianState::step`], which recovers the noise
    /// as `theta - mu`.
    pub fn sample_parameters(&self, rng: &mut SplitMix64) -> Vec<f64> {
        let sigma = self.posterior_sigma();
        self.mu
            .iter()
            .zip(&sigma)
            .map(|(&mu, &s)| mu + s * rng.normal())
            .collect()
    }

    /// Single-sample IVON step with the gradient evaluated at `theta`.
    pub fn step(&mut self, theta: &[f64], grad: &[f64]) -> Result<()> {
        self.check_input(theta, grad)?;
        let hhat: Vec<f64> = (0..self.mu.len())
            .map(|i| grad[i] * (theta[i] - self.mu[i]) * self.cfg.lambda_ess * (self.h[i] + self.cfg.delta))
            .collect();
        self.apply(grad, &hhat)
    }

    /// Multi-sample IVON step: gradient and Hessian estimator are averaged
    /// over several posterior draws before one update is applied. Reduces
    /// estimator noise at proportional cost; single-sample is the default
    /// everywhere, this is an opt-in config path.
    pub fn step_multi(&mut self, draws: &[(Vec<f64>, Vec<f64>)]) -> Result<()> {
        if draws.is_empty() {
            return Err(Error::InvalidArgument("step_multi needs at least one draw".into()));
        }
        let n = self.mu.len();
        let mut g_avg = vec![0.0; n];
        let mut hhat_avg = vec![0.0; n];
        let k = draws.len() as f64;
        for (theta, grad) in draws {
            self.check_input(theta, grad)?;
            for i in 0..n {
                g_avg[i] += grad[i] / k;
                hhat_avg[i] +=
                    grad[i] * (theta[i] - self.mu[i]) * self.cfg.lambda_ess * (self.h[i] + self.cfg.delta) / k;
            }
        }
        self.apply(&g_avg, &hhat_avg)
    }

    fn check_input(&self, theta: &[f64], grad: &[f64]) -> Result<()> {
        if theta.len() != self.mu.len() || grad.len() != self.mu.len() {
            return Err(Error::ShapeMismatch(format!(
                "step: theta {} / grad {} vs state {}",
                theta.len(),
                grad.len(),
                self.mu.len()
            )));
        }
        if let Some(i) = grad.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient entry {i} = {}", grad[i])));
        }
        Ok(())
    }

    fn apply(&mut self, g: &[f64], hhat: &[f64]) -> Result<()> {
        let IvonConfig { beta1, beta2, delta, lr, .. } = self.cfg;
        self.step += 1;
        let bias = 1.0 - beta1.powi(self.step as i32);
        for i in 0..self.mu.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g[i];
            let h_old = self.h[i];
            let corr = 0.5 * (1.0 - beta2) * (1.0 - beta2) * (h_old - hhat[i]) * (h_old - hhat[i])
                / (h_old + delta);
            self.h[i] = (beta2 * h_old + (1.0 - beta2) * hhat[i] + corr).max(0.0);
            let m_hat = self.m[i] / bias;
            self.mu[i] -= lr * (m_hat + delta * self.mu[i]) / (self.h[i] + delta);
            if self.mu[i].abs() > DIVERGENCE_LIMIT {
                return Err(Error::Diverged(format!(
                    "|mu[{i}]| = {} after step {}",
                    self.mu[i].abs(),
                    self.step
                )));
            }
        }
        Ok(())
    }

    /// Closed-form KL(q ‖ p) for the diagonal posterior against the isotropic
    /// prior: `sum_i [ ln(s/sigma_i) + (sigma_i^2 + mu_i^2) / (2 s^2) - 1/2 ]`.
    pub fn kl_to_prior(&self, prior: &PriorSpec) -> Result<f64> {
        prior.validate()?;
        let s2 = prior.prior_variance;
        let sigma = self.posterior_sigma();
        Ok(self
            .mu
            .iter()
            .zip(&sigma)
            .map(|(&mu, &sig)| 0.5 * (s2 / (sig * sig)).ln() + (sig * sig + mu * mu) / (2.0 * s2) - 0.5)
            .sum())
    }

    /// Monte-Carlo estimate of the variational objective
    /// `E_q[loss] + KL(q ‖ p)`: the average of `loss_at` over `n_samples`
    /// posterior draws plus the closed-form KL term.
    pub fn elbo_estimate(
        &self,
        prior: &PriorSpec,
        loss_at: &mut dyn FnMut(&[f64]) -> Result<f64>,
        rng: &mut SplitMix64,
        n_samples: usize,
    ) -> Result<f64> {
        if n_samples == 0 {
            return Err(Error::InvalidArgument("n_samples must be >= 1".into()));
        }
        let mut acc = 0.0;
        for _ in 0..n_samples {
            let theta = self.sample_parameters(rng);
            let l = loss_at(&theta)?;
            if !l.is_finite() {
                return Err(Error::NonFinite(format!("loss value {l}")));
            }
            acc += l;
        }
        Ok(acc / n_samples as f64 + self.kl_to_prior(prior)?)
    }
}

impl Optimizer for GaussianState {
    fn dim(&self) -> usize {
        self.mu.len()
    }

    fn set_lr(&mut self, lr: f64) {
        GaussianState::set_lr(self, lr);
    }

    fn step_count(&self) -> u64 {
        self.step
    }

    fn draw(&mut self, rng: &mut SplitMix64) -> Vec<f64> {
        self.sample_parameters(rng)
    }

    fn update(&mut self, theta: &[f64], grad: &[f64]) -> Result<()> {
        self.step(theta, grad)
    }

    fn mean(&self) -> &[f64] {
        &self.mu
    }

    fn posterior(&self) -> Option<Posterior<'_>> {
        Some(Posterior { mean: &self.mu, sigma: self.posterior_sigma() })
    }

    fn snapshot(&self) -> OptimizerSnapshot {
        OptimizerSnapshot::Ivon {
            mu: self.mu.clone(),
            h: self.h.clone(),
            m: self.m.clone(),
            step: self.step,
            lambda_ess: self.cfg.lambda_ess,
            delta: self.cfg.delta,
        }
    }
}

/// Side-by-side view of the tracked Hessian and the empirical mean squared
/// gradient, with their Spearman correlation (`None` when degenerate, e.g.
/// all-zero gradients).
#[derive(Debug, Clone, Serialize)]
pub struct HessianDiagnostic {
    pub h: Vec<f64>,
    pub mean_sq_grad: Vec<f64>,
    pub spearman: Option<f64>,
}

/// Compares the optimizer's `h` against `mean_t g_t^2` over a recorded
/// gradient history. Requires at least 100 steps of history for the average
/// to mean anything; report-only, no thresholds enforced here.
pub fn hessian_vs_squared_grad_diagnostic(
    state: &GaussianState,
    grad_history: &[Vec<f64>],
) -> Result<HessianDiagnostic> {
    if grad_history.len() < 100 {
        return Err(Error::InsufficientHistory(format!(
            "hessian diagnostic needs >= 100 recorded gradient steps, got {}",
            grad_history.len()
        )));
    }
    let n = state.mu().len();
    let mut mean_sq = vec![0.0; n];
    for g in grad_history {
        if g.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "gradient history entry of length {} vs state {}",
                g.len(),
                n
            )));
        }
        for (acc, &v) in mean_sq.iter_mut().zip(g) {
            *acc += v * v;
        }
    }
    for v in &mut mean_sq {
        *v /= grad_history.len() as f64;
    }
    let rho = spearman(state.h(), &mean_sq);
    Ok(HessianDiagnostic { h: state.h().to_vec(), mean_sq_grad: mean_sq, spearman: rho })
}
