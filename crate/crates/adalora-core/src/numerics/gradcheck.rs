//! Central-finite-difference gradient oracle.
//!
//! Used throughout the test suites to validate analytic gradients: perturb one
//! entry at a time by `+/- eps` and difference the objective.

use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;

/// Gradient of scalar `f` at `x` by central differences:
/// `g[i,j] = (f(x + eps*e_ij) - f(x - eps*e_ij)) / (2*eps)`.
///
/// `f` may fail (e.g. shape errors); failures and non-finite values propagate.
pub fn finite_diff_grad(
    f: &mut dyn FnMut(&Matrix) -> Result<f64>,
    x: &Matrix,
    eps: f64,
) -> Result<Matrix> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be > 0, got {eps}")));
    }
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            let orig = x.get(i, j);
            probe.set(i, j, orig + eps)?;
            let plus = f(&probe)?;
            probe.set(i, j, orig - eps)?;
            let minus = f(&probe)?;
            probe.set(i, j, orig)?;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "objective at perturbed ({i},{j}): f+ = {plus}, f- = {minus}"
                )));
            }
            grad.set(i, j, (plus - minus) / (2.0 * eps))?;
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient_is_two_x() {
        let x = Matrix::from_vec(1, 1, vec![3.0]).unwrap();
        let g = finite_diff_grad(&mut |m| Ok(m.frobenius_norm_sq()), &x, 1e-5).unwrap();
        assert!((g.get(0, 0) - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Matrix::from_vec(2, 3, vec![1.0; 6]).unwrap();
        let g = finite_diff_grad(&mut |_| Ok(4.25), &x, 1e-5).unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn orthogonality_penalty_1x1_gradient() {
        // f(P) = ||P^T P - I||_F^2 at P = [[2]] is (4-1)^2 = 9;
        // analytic gradient 4 P (P^T P - I) = 4 * 2 * 3 = 24.
        let p = Matrix::from_vec(1, 1, vec![2.0]).unwrap();
        let g = finite_diff_grad(
            &mut |m| {
                let v = m.get(0, 0);
                let d = v * v - 1.0;
                Ok(d * d)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!((g.get(0, 0) - 24.0).abs() < 1e-5, "{}", g.get(0, 0));
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let x = Matrix::from_vec(1, 1, vec![0.0]).unwrap();
        let r = finite_diff_grad(&mut |m| Ok(1.0 / m.get(0, 0)), &x, 1e-5);
        assert!(r.is_ok()); // 1/eps is finite
        let r2 = finite_diff_grad(&mut |_| Ok(f64::NAN), &x, 1e-5);
        assert!(r2.is_err());
    }

    #[test]
    fn rejects_nonpositive_eps() {
        let x = Matrix::zeros(1, 1);
        assert!(finite_diff_grad(&mut |_| Ok(0.0), &x, 0.0).is_err());
    }
}
