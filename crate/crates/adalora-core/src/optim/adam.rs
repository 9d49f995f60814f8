//! Adam baseline: point-estimate first/second-moment optimizer.

use crate::error::{Error, Result};
use crate::numerics::SplitMix64;
use crate::optim::{Optimizer, OptimizerSnapshot, Posterior};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-2, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && [self.lr, self.beta1, self.beta2, self.eps].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("adam hyperparameters out of range: {self:?}")))
        }
    }
}

/// Adam state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    params: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    cfg: AdamConfig,
}

impl AdamState {
    pub fn new(init_params: Vec<f64>, cfg: AdamConfig) -> Result<Self> {
        cfg.validate()?;
        if init_params.is_empty() {
            return Err(Error::InvalidArgument("empty parameter vector".into()));
        }
        if init_params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("initial params".into()));
        }
        let n = init_params.len();
        Ok(AdamState { params: init_params, m: vec![0.0; n], v: vec![0.0; n], step: 0, cfg })
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// Standard Adam update with bias correction.
    pub fn step(&mut self, grad: &[f64]) -> Result<()> {
        if grad.len() != self.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "adam_step: grad {} vs params {}",
                grad.len(),
                self.params.len()
            )));
        }
        if let Some(i) = grad.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient entry {i} = {}", grad[i])));
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        self.step += 1;
        let bias1 = 1.0 - beta1.powi(self.step as i32);
        let bias2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..self.params.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bias1;
            let v_hat = self.v[i] / bias2;
            self.params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Free-function form of the update.
pub fn adam_step(state: &mut AdamState, grad: &[f64]) -> Result<()> {
    state.step(grad)
}

impl Optimizer for AdamState {
    fn dim(&self) -> usize {
        self.params.len()
    }

    fn set_lr(&mut self, lr: f64) {
        AdamState::set_lr(self, lr);
    }

    fn step_count(&self) -> u64 {
        self.step
    }

    fn draw(&mut self, _rng: &mut SplitMix64) -> Vec<f64> {
        // Point estimate: gradients are evaluated at the current parameters.
        self.params.clone()
    }

    fn update(&mut self, _theta: &[f64], grad: &[f64]) -> Result<()> {
        self.step(grad)
    }

    fn mean(&self) -> &[f64] {
        &self.params
    }

    fn posterior(&self) -> Option<Posterior<'_>> {
        None
    }

    fn snapshot(&self) -> OptimizerSnapshot {
        OptimizerSnapshot::Adam {
            params: self.params.clone(),
            m: self.m.clone(),
            v: self.v.clone(),
            step: self.step,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut state = AdamState::new(vec![1.0, -2.0], AdamConfig::default()).unwrap();
        for _ in 0..10 {
            state.step(&[0.0, 0.0]).unwrap();
        }
        assert_eq!(state.params(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_roughly_lr_times_sign() {
        let cfg = AdamConfig { lr: 0.01, ..AdamConfig::default() };
        let mut state = AdamState::new(vec![0.0], cfg).unwrap();
        state.step(&[3.7]).unwrap();
        // After bias correction m_hat = g, v_hat = g^2, so the step is
        // -lr * g / (|g| + eps) ~ -lr * sign(g).
        assert!((state.params()[0] + 0.01).abs() < 1e-6, "{}", state.params()[0]);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let cfg = AdamConfig { lr: 1e-2, ..AdamConfig::default() };
        let mut state = AdamState::new(vec![2.0], cfg).unwrap();
        for _ in 0..2000 {
            let g = state.params()[0] - 0.3;
            state.step(&[g]).unwrap();
        }
        assert!((state.params()[0] - 0.3).abs() < 1e-4, "{}", state.params()[0]);
    }

    #[test]
    fn adam_exposes_no_posterior() {
        let state = AdamState::new(vec![0.0], AdamConfig::default()).unwrap();
        let opt: &dyn Optimizer = &state;
        assert!(opt.posterior().is_none());
    }

    #[test]
    fn rejects_bad_gradients_and_shapes() {
        let mut state = AdamState::new(vec![0.0], AdamConfig::default()).unwrap();
        assert!(state.step(&[f64::INFINITY]).is_err());
        assert!(state.step(&[0.0, 1.0]).is_err());
    }
}
