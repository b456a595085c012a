//! Squared-exponential kernel `k(a, b) = alpha^2 exp(-|a - b|^2 / (2 beta^2))`
//! and its analytic first and second partial derivatives.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Kernel and noise hyperparameters.
///
/// `alpha` is the signal standard deviation, `beta` the lengthscale and
/// `sigma_y` the measurement-noise standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub alpha: f64,
    pub beta: f64,
    pub sigma_y: f64,
}

impl Hyperparams {
    pub fn new(alpha: f64, beta: f64, sigma_y: f64) -> Result<Self> {
        let hp = Hyperparams { alpha, beta, sigma_y };
        hp.validate()?;
        Ok(hp)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha.is_finite()
            && self.alpha > 0.0
            && self.beta.is_finite()
            && self.beta > 0.0
            && self.sigma_y.is_finite()
            && self.sigma_y >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "hyperparameters need alpha > 0, beta > 0, sigma_y >= 0 (got {self:?})"
            )))
        }
    }

    pub fn signal_variance(&self) -> f64 {
        self.alpha * self.alpha
    }

    pub fn noise_variance(&self) -> f64 {
        self.sigma_y * self.sigma_y
    }
}

/// Which mixed second derivative [`kernel_hess`] returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HessianKind {
    /// `d^2 k / db db^T`
    SecondSecond,
    /// `d^2 k / da db^T`
    FirstSecond,
}

pub fn kernel_eval(a: &[f64], b: &[f64], hp: &Hyperparams) -> Result<f64> {
    check_dim("kernel arguments", a.len(), b.len())?;
    Ok(value(a, b, hp))
}

/// Gradient with respect to the second argument, `(a - b) k(a, b) / beta^2`.
/// The gradient with respect to the first argument is its negation.
pub fn kernel_grad_second_arg(a: &[f64], b: &[f64], hp: &Hyperparams) -> Result<DVector<f64>> {
    check_dim("kernel arguments", a.len(), b.len())?;
    let mut out = DVector::zeros(a.len());
    grad_second_into(a, b, hp, out.as_mut_slice());
    Ok(out)
}

pub fn kernel_hess(a: &[f64], b: &[f64], hp: &Hyperparams, which: HessianKind) -> Result<DMatrix<f64>> {
    check_dim("kernel arguments", a.len(), b.len())?;
    let n = a.len();
    let mut out = vec![0.0; n * n];
    hess_second_second_into(a, b, hp, &mut out);
    if which == HessianKind::FirstSecond {
        out.iter_mut().for_each(|v| *v = -*v);
    }
    Ok(DMatrix::from_row_slice(n, n, &out))
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Kernel value without dimension checks. Large distances underflow to 0.0.
#[inline]
pub(crate) fn value(a: &[f64], b: &[f64], hp: &Hyperparams) -> f64 {
    hp.signal_variance() * (-sq_dist(a, b) / (2.0 * hp.beta * hp.beta)).exp()
}

#[inline]
pub(crate) fn grad_second_into(a: &[f64], b: &[f64], hp: &Hyperparams, out: &mut [f64]) {
    let inv_b2 = 1.0 / (hp.beta * hp.beta);
    let k = value(a, b, hp);
    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
        *o = inv_b2 * (x - y) * k;
    }
}

/// Row-major `n x n` second-second Hessian `k [d d^T / beta^4 - I / beta^2]`
/// with `d = a - b`. The first-second Hessian is its negation, and the
/// first-first Hessian coincides with it.
#[inline]
pub(crate) fn hess_second_second_into(a: &[f64], b: &[f64], hp: &Hyperparams, out: &mut [f64]) {
    let n = a.len();
    let inv_b2 = 1.0 / (hp.beta * hp.beta);
    let k = value(a, b, hp);
    for p in 0..n {
        let dp = a[p] - b[p];
        for q in 0..n {
            let dq = a[q] - b[q];
            let mut v = dp * dq * inv_b2 * inv_b2;
            if p == q {
                v -= inv_b2;
            }
            out[p * n + q] = k * v;
        }
    }
}

/// Cross-covariance matrix `K[i, j] = k(x_i, z_j)` between the rows of `x` and `z`.
pub(crate) fn cross_gram(x: &DMatrix<f64>, z: &DMatrix<f64>, hp: &Hyperparams) -> DMatrix<f64> {
    let xr = rows(x);
    let zr = rows(z);
    DMatrix::from_fn(x.nrows(), z.nrows(), |i, j| value(&xr[i], &zr[j], hp))
}

/// Symmetric Gram matrix of the rows of `x`; the diagonal is exactly `alpha^2`.
pub(crate) fn gram(x: &DMatrix<f64>, hp: &Hyperparams) -> DMatrix<f64> {
    let xr = rows(x);
    let t = x.nrows();
    let mut k = DMatrix::zeros(t, t);
    for i in 0..t {
        k[(i, i)] = hp.signal_variance();
        for j in 0..i {
            let v = value(&xr[i], &xr[j], hp);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Rows of a column-major matrix copied out as contiguous vectors.
pub(crate) fn rows(x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    x.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hp() -> Hyperparams {
        Hyperparams::new(1.0, 0.1, 0.0).unwrap()
    }

    #[test]
    fn value_at_zero_distance_is_signal_variance() {
        assert_eq!(kernel_eval(&[0.3], &[0.3], &hp()).unwrap(), 1.0);
        let h = Hyperparams::new(2.0, 0.5, 0.0).unwrap();
        assert_eq!(kernel_eval(&[1.0, -1.0], &[1.0, -1.0], &h).unwrap(), 4.0);
    }

    #[test]
    fn value_one_lengthscale_apart() {
        let v = kernel_eval(&[0.0], &[0.1], &hp()).unwrap();
        assert!((v - (-0.5f64).exp()).abs() < 1e-15);
        assert!((v - 0.60653).abs() < 1e-5);
    }

    #[test]
    fn far_points_underflow_to_finite_zero() {
        let v = kernel_eval(&[0.0], &[10.0], &hp()).unwrap();
        assert!(v.is_finite());
        assert!(v >= 0.0);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        assert!(matches!(
            kernel_eval(&[0.0], &[0.0, 1.0], &hp()),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(kernel_grad_second_arg(&[0.0, 1.0], &[0.0], &hp()).is_err());
        assert!(kernel_hess(&[0.0], &[], &hp(), HessianKind::SecondSecond).is_err());
    }

    #[test]
    fn gradient_examples() {
        let g = kernel_grad_second_arg(&[0.4, 0.2], &[0.4, 0.2], &hp()).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));

        let g = kernel_grad_second_arg(&[0.0], &[0.1], &hp()).unwrap();
        let expect = 100.0 * -0.1 * (-0.5f64).exp();
        assert!((g[0] - expect).abs() < 1e-12);
        assert!((g[0] + 6.0653).abs() < 1e-4);
    }

    #[test]
    fn gradient_antisymmetric_under_exchange() {
        let a = [0.1, -0.3];
        let b = [0.25, 0.05];
        let g_ab = kernel_grad_second_arg(&a, &b, &hp()).unwrap();
        let g_ba = kernel_grad_second_arg(&b, &a, &hp()).unwrap();
        assert_eq!(g_ab, -g_ba);
    }

    #[test]
    fn hessian_examples() {
        let h = kernel_hess(&[0.2, 0.7], &[0.2, 0.7], &hp(), HessianKind::SecondSecond).unwrap();
        let expect = DMatrix::from_diagonal_element(2, 2, -100.0);
        assert!((h - expect).amax() < 1e-12);

        // inflection one lengthscale away
        let h = kernel_hess(&[0.0], &[0.1], &hp(), HessianKind::SecondSecond).unwrap();
        assert!(h[(0, 0)].abs() < 1e-12);

        let a = [0.1, 0.0];
        let b = [0.0, 0.05];
        let ss = kernel_hess(&a, &b, &hp(), HessianKind::SecondSecond).unwrap();
        let fs = kernel_hess(&a, &b, &hp(), HessianKind::FirstSecond).unwrap();
        assert_eq!(ss, -fs.clone());
        assert_eq!(ss, ss.transpose());
        assert_eq!(fs, fs.transpose());
    }

    #[test]
    fn gram_diagonal_is_exact() {
        let x = DMatrix::from_row_slice(3, 1, &[0.0, 0.1, 0.2]);
        let k = gram(&x, &hp());
        assert!((0..3).all(|i| k[(i, i)] == 1.0));
        assert_eq!(k, k.transpose());
        assert_eq!(k, cross_gram(&x, &x, &hp()));
    }

    #[test]
    fn invalid_hyperparams() {
        assert!(Hyperparams::new(0.0, 1.0, 0.0).is_err());
        assert!(Hyperparams::new(1.0, -1.0, 0.0).is_err());
        assert!(Hyperparams::new(1.0, 1.0, -0.1).is_err());
        assert!(Hyperparams::new(1.0, 1.0, 0.0).is_ok());
    }
}
