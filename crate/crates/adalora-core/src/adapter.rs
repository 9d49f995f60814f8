//! SVD-parameterized adapter: `W = W0 + P diag(lambda ⊙ mask) Q`.
//!
//! The frozen base weight `W0` (`d1 x d2`) is augmented with a low-rank delta
//! factored like a truncated SVD: left factor `P` (`d1 x r`), singular values
//! `lambda` (`r`), right factor `Q` (`r x d2`). Each `(P[:,i], lambda[i],
//! Q[i,:])` group is one *triplet*, the atomic unit the allocator prunes and
//! reactivates. Only the singular values are masked: pruning triplet `i`
//! forces its forward contribution to zero while `P` and `Q` keep their
//! values, so a reactivated triplet resumes exactly where it stopped.
//!
//! Orthogonality of the factors is encouraged by the penalty
//! `R(P, Q) = ||P^T P - I||_F^2 + ||Q Q^T - I||_F^2`, which is zero iff `P`
//! has orthonormal columns and `Q` has orthonormal rows. (With `r <
//! min(d1, d2)` this is the only orientation in which both terms can vanish.)
//!
//! Orientation is fixed repo-wide: `x` is `batch x d1` and `forward` computes
//! `y = x * W`.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, SplitMix64};
use serde::{Deserialize, Serialize};

/// One adapted weight matrix with its rank mask.
#[derive(Debug, Clone)]
pub struct AdapterLayer {
    w0: Matrix,
    p: Matrix,
    lambda: Vec<f64>,
    q: Matrix,
    mask: Vec<bool>,
    gamma_orth: f64,
}

/// Gradients of (task loss + orthogonality penalty) for one layer.
///
/// `g_lambda` is computed for *all* triplets, masked ones included: the masked
/// entries hold the gradient the singular value would receive if reactivated,
/// which keeps importance scores defined for pruned triplets. The task-loss
/// parts of `g_p`/`g_q` are zero for masked triplets (their forward
/// contribution is zero), leaving only the penalty part there.
#[derive(Debug, Clone)]
pub struct AdapterGradients {
    pub g_p: Matrix,
    pub g_lambda: Vec<f64>,
    pub g_q: Matrix,
}

/// Serializable dump of a layer; shapes in the header, factors row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSnapshot {
    pub d1: usize,
    pub d2: usize,
    pub rank: usize,
    pub w0: Vec<f64>,
    pub p: Vec<f64>,
    pub lambda: Vec<f64>,
    pub q: Vec<f64>,
    pub mask: Vec<bool>,
    pub gamma_orth: f64,
}

impl AdapterLayer {
    /// Fresh adapter on a frozen base: `P, Q ~ N(0, init_std^2)`, `lambda = 0`
    /// (the delta starts as a no-op), all triplets active.
    pub fn new(
        w0: Matrix,
        rank: usize,
        init_std: f64,
        gamma_orth: f64,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let (d1, d2) = w0.shape();
        if rank == 0 || rank > d1.min(d2) {
            return Err(Error::InvalidArgument(format!(
                "adapter rank {rank} invalid for a {d1}x{d2} base weight"
            )));
        }
        if !(init_std > 0.0 && init_std.is_finite()) {
            return Err(Error::InvalidArgument(format!("init_std must be finite and > 0, got {init_std}")));
        }
        if !(gamma_orth >= 0.0 && gamma_orth.is_finite()) {
            return Err(Error::InvalidArgument(format!("gamma_orth must be finite and >= 0, got {gamma_orth}")));
        }
        let p = Matrix::from_fn(d1, rank, |_, _| init_std * rng.normal())?;
        let q = Matrix::from_fn(rank, d2, |_, _| init_std * rng.normal())?;
        Ok(AdapterLayer {
            w0,
            p,
            lambda: vec![0.0; rank],
            q,
            mask: vec![true; rank],
            gamma_orth,
        })
    }

    /// Reassembles a layer from explicit parts, validating every shape.
    pub fn from_parts(
        w0: Matrix,
        p: Matrix,
        lambda: Vec<f64>,
        q: Matrix,
        mask: Vec<bool>,
        gamma_orth: f64,
    ) -> Result<Self> {
        let (d1, d2) = w0.shape();
        let rank = p.cols();
        if p.rows() != d1 || q.shape() != (rank, d2) || lambda.len() != rank || mask.len() != rank {
            return Err(Error::ShapeMismatch(format!(
                "adapter parts inconsistent: w0 {d1}x{d2}, p {}x{}, q {}x{}, lambda {}, mask {}",
                p.rows(),
                p.cols(),
                q.rows(),
                q.cols(),
                lambda.len(),
                mask.len()
            )));
        }
        if lambda.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("adapter lambda".into()));
        }
        if !(gamma_orth >= 0.0 && gamma_orth.is_finite()) {
            return Err(Error::InvalidArgument(format!("gamma_orth must be finite and >= 0, got {gamma_orth}")));
        }
        Ok(AdapterLayer { w0, p, lambda, q, mask, gamma_orth })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.w0.shape()
    }

    pub fn rank(&self) -> usize {
        self.lambda.len()
    }

    pub fn active_rank(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn w0(&self) -> &Matrix {
        &self.w0
    }

    pub fn p(&self) -> &Matrix {
        &self.p
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn q(&self) -> &Matrix {
        &self.q
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn gamma_orth(&self) -> f64 {
        self.gamma_orth
    }

    /// Number of trainable scalars in active triplets: `active_rank * (d1 + d2 + 1)`.
    pub fn active_param_count(&self) -> usize {
        let (d1, d2) = self.dims();
        self.active_rank() * (d1 + d2 + 1)
    }

    /// Replaces the rank mask; factor values are untouched.
    pub fn set_mask(&mut self, mask: &[bool]) -> Result<()> {
        if mask.len() != self.rank() {
            return Err(Error::ShapeMismatch(format!(
                "mask length {} != rank {}",
                mask.len(),
                self.rank()
            )));
        }
        self.mask.copy_from_slice(mask);
        Ok(())
    }

    /// Overwrites the trainable factors (used by the optimizer to push its
    /// current parameter vector into the layer). Shapes must match.
    pub fn set_factors(&mut self, p: &[f64], lambda: &[f64], q: &[f64]) -> Result<()> {
        let (d1, d2) = self.dims();
        let r = self.rank();
        if p.len() != d1 * r || lambda.len() != r || q.len() != r * d2 {
            return Err(Error::ShapeMismatch(format!(
                "factor lengths ({}, {}, {}) do not match a {d1}x{d2} rank-{r} adapter",
                p.len(),
                lambda.len(),
                q.len()
            )));
        }
        self.p = Matrix::from_vec(d1, r, p.to_vec())?;
        self.q = Matrix::from_vec(r, d2, q.to_vec())?;
        if lambda.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("set_factors lambda".into()));
        }
        self.lambda.copy_from_slice(lambda);
        Ok(())
    }

    /// Effective weight `W0 + P diag(lambda ⊙ mask) Q`. Masked triplets
    /// contribute no floating-point operation at all, so with everything
    /// masked this returns `W0` bit-for-bit.
    pub fn effective_weight(&self) -> Result<Matrix> {
        let (d1, d2) = self.dims();
        let mut w = self.w0.clone();
        {
            let data = w.as_mut_slice();
            for j in 0..self.rank() {
                if !self.mask[j] {
                    continue;
                }
                let lam = self.lambda[j];
                for a in 0..d1 {
                    let coeff = self.p.get(a, j) * lam;
                    let row = &mut data[a * d2..(a + 1) * d2];
                    for (b, slot) in row.iter_mut().enumerate() {
                        *slot += coeff * self.q.get(j, b);
                    }
                }
            }
        }
        w.check_finite("effective_weight")?;
        Ok(w)
    }

    /// Forward pass `y = x * (W0 + P diag(lambda ⊙ mask) Q)`.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let (d1, _) = self.dims();
        if x.cols() != d1 {
            return Err(Error::ShapeMismatch(format!(
                "forward: x is {}x{}, layer expects inputs of width {d1}",
                x.rows(),
                x.cols()
            )));
        }
        x.matmul(&self.effective_weight()?)
    }

    /// `R(P, Q) = ||P^T P - I||_F^2 + ||Q Q^T - I||_F^2`.
    pub fn orthogonality_penalty(&self) -> f64 {
        let r = self.rank();
        let mut total = 0.0;
        for i in 0..r {
            for j in 0..r {
                let target = if i == j { 1.0 } else { 0.0 };
                // (P^T P)[i,j] = column_i . column_j
                let mut pp = 0.0;
                for a in 0..self.p.rows() {
                    pp += self.p.get(a, i) * self.p.get(a, j);
                }
                total += (pp - target) * (pp - target);
                // (Q Q^T)[i,j] = row_i . row_j
                let mut qq = 0.0;
                for b in 0..self.q.cols() {
                    qq += self.q.get(i, b) * self.q.get(j, b);
                }
                total += (qq - target) * (qq - target);
            }
        }
        total
    }

    /// Exact gradients of `task loss + gamma_orth * R` given the layer input
    /// `x` and `upstream = d(task loss)/dy`.
    ///
    /// With `M = x^T upstream` (`d1 x d2`):
    /// - `g_p    = M Q^T diag(lambda ⊙ mask) + gamma * 4 P (P^T P - I)`
    /// - `g_q    = diag(lambda ⊙ mask) P^T M + gamma * 4 (Q Q^T - I) Q`
    /// - `g_lambda[i] = (P^T M Q^T)[i,i]` — deliberately *not* masked; see
    ///   [`AdapterGradients`].
    pub fn backward(&self, x: &Matrix, upstream: &Matrix) -> Result<AdapterGradients> {
        let (d1, d2) = self.dims();
        let r = self.rank();
        if x.cols() != d1 || upstream.cols() != d2 || x.rows() != upstream.rows() {
            return Err(Error::ShapeMismatch(format!(
                "backward: x {}x{}, upstream {}x{}, layer {d1}x{d2}",
                x.rows(),
                x.cols(),
                upstream.rows(),
                upstream.cols()
            )));
        }
        let m = x.transpose().matmul(upstream)?; // d1 x d2

        // Task parts.
        let mqt = m.matmul(&self.q.transpose())?; // d1 x r
        let ptm = self.p.transpose().matmul(&m)?; // r x d2
        let mut g_p = Matrix::zeros(d1, r);
        let mut g_q = Matrix::zeros(r, d2);
        let mut g_lambda = vec![0.0; r];
        for j in 0..r {
            let lam_eff = if self.mask[j] { self.lambda[j] } else { 0.0 };
            for a in 0..d1 {
                g_p.set(a, j, mqt.get(a, j) * lam_eff)?;
            }
            for b in 0..d2 {
                g_q.set(j, b, ptm.get(j, b) * lam_eff)?;
            }
            // Unmasked singular-value gradient: (P^T M Q^T)[j,j].
            let mut acc = 0.0;
            for b in 0..d2 {
                acc += ptm.get(j, b) * self.q.get(j, b);
            }
            g_lambda[j] = acc;
        }
        if g_lambda.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("backward g_lambda".into()));
        }

        // Penalty parts: 4 P (P^T P - I) and 4 (Q Q^T - I) Q.
        if self.gamma_orth > 0.0 {
            let ptp = self.p.transpose().matmul(&self.p)?;
            let qqt = self.q.matmul(&self.q.transpose())?;
            let eye = Matrix::identity(r);
            let p_pen = self.p.matmul(&ptp.sub(&eye)?)?.scale(4.0 * self.gamma_orth)?;
            let q_pen = qqt.sub(&eye)?.matmul(&self.q)?.scale(4.0 * self.gamma_orth)?;
            g_p = g_p.add(&p_pen)?;
            g_q = g_q.add(&q_pen)?;
        }

        Ok(AdapterGradients { g_p, g_lambda, g_q })
    }

    /// Gradient with respect to the layer input: `upstream * W^T` with the
    /// effective (masked) weight.
    pub fn backprop_input(&self, upstream: &Matrix) -> Result<Matrix> {
        upstream.matmul(&self.effective_weight()?.transpose())
    }

    pub fn to_snapshot(&self) -> AdapterSnapshot {
        let (d1, d2) = self.dims();
        AdapterSnapshot {
            d1,
            d2,
            rank: self.rank(),
            w0: self.w0.as_slice().to_vec(),
            p: self.p.as_slice().to_vec(),
            lambda: self.lambda.clone(),
            q: self.q.as_slice().to_vec(),
            mask: self.mask.clone(),
            gamma_orth: self.gamma_orth,
        }
    }

    pub fn from_snapshot(s: &AdapterSnapshot) -> Result<Self> {
        AdapterLayer::from_parts(
            Matrix::from_vec(s.d1, s.d2, s.w0.clone())?,
            Matrix::from_vec(s.d1, s.rank, s.p.clone())?,
            s.lambda.clone(),
            Matrix::from_vec(s.rank, s.d2, s.q.clone())?,
            s.mask.clone(),
            s.gamma_orth,
        )
    }
}
