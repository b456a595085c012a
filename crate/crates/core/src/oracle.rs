//! Finite-difference reference derivatives, used only to check the closed
//! forms in [`crate::derivatives`].
//!
//! Jacobians are central differences of [`predict_at`], so they share nothing
//! with the analytic code beyond the GP itself. Every difference is
//! Richardson-extrapolated from steps `h` and `h / 2`, which cancels the
//! `h^2` error term and allows a step large enough to keep rounding noise
//! small. Hessians are central
//! differences of the analytic Jacobians evaluated at moved locations, which
//! is far more accurate than a second difference of the moments; the first
//! order check anchors them.

use nalgebra::{DMatrix, DVector};

use crate::derivatives::{build_kernel_grad_slices, cov_jacobian, mean_jacobian};
use crate::error::{Error, Result};
use crate::gp::{predict_at, TrainedModel};
use crate::tensor::Tensor;

/// Central-difference settings and the tolerance used when comparing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdConfig {
    /// Relative step; the step for coordinate value `x` is
    /// `step_scale * max(1, |x|)`.
    pub step_scale: f64,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig {
            step_scale: 3e-4,
            rtol: 1e-6,
            atol: 1e-10,
        }
    }
}

impl FdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.step_scale > 0.0 && self.step_scale <= 1e-2 && self.rtol >= 0.0 && self.atol >= 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "finite-difference step must lie in (0, 1e-2] and tolerances be non-negative (got {self:?})"
            )))
        }
    }

    fn step(&self, x: f64) -> f64 {
        self.step_scale * x.abs().max(1.0)
    }
}

fn check(model: &TrainedModel, i: usize, cfg: &FdConfig) -> Result<()> {
    cfg.validate()?;
    if i < model.t() {
        Ok(())
    } else {
        Err(Error::IndexOutOfRange {
            index: i,
            len: model.t(),
        })
    }
}

fn shifted(model: &TrainedModel, i: usize, d: usize, h: f64) -> DMatrix<f64> {
    let mut z = model.training().locations().clone();
    z[(i, d)] += h;
    z
}

/// Central difference of both moments along coordinate `d` of point `i`.
fn central(model: &TrainedModel, i: usize, d: usize, cfg: &FdConfig) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let once = |h: f64| -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (mp, sp) = predict_at(model, &shifted(model, i, d, h))?;
        let (mm, sm) = predict_at(model, &shifted(model, i, d, -h))?;
        Ok(((mp - mm) / (2.0 * h), (sp - sm) / (2.0 * h)))
    };
    let h = cfg.step(model.training().locations()[(i, d)]);
    let (m1, s1) = once(h)?;
    let (m2, s2) = once(h / 2.0)?;
    Ok((richardson(m1, m2), richardson(s1, s2)))
}

/// Combine central differences at steps `h` and `h / 2`.
fn richardson<R: nalgebra::Dim, C: nalgebra::Dim>(
    coarse: nalgebra::OMatrix<f64, R, C>,
    fine: nalgebra::OMatrix<f64, R, C>,
) -> nalgebra::OMatrix<f64, R, C>
where
    nalgebra::DefaultAllocator: nalgebra::allocator::Allocator<R, C>,
{
    (fine * 4.0 - coarse) / 3.0
}

pub fn fd_mean_jacobian(model: &TrainedModel, i: usize, cfg: &FdConfig) -> Result<DMatrix<f64>> {
    check(model, i, cfg)?;
    let mut out = DMatrix::zeros(model.m(), model.n());
    for d in 0..model.n() {
        let (dm, _) = central(model, i, d, cfg)?;
        out.set_column(d, &dm);
    }
    Ok(out)
}

/// Shape `[M, M, n]`.
pub fn fd_cov_jacobian(model: &TrainedModel, i: usize, cfg: &FdConfig) -> Result<Tensor> {
    check(model, i, cfg)?;
    let (m, n) = (model.m(), model.n());
    let mut out = Tensor::zeros(&[m, m, n]);
    for d in 0..n {
        let (_, ds) = central(model, i, d, cfg)?;
        for a in 0..m {
            for b in 0..m {
                out.set(&[a, b, d], ds[(a, b)]);
            }
        }
    }
    Ok(out)
}

/// Analytic Jacobians of point `i` at the model relocated by `h` along
/// coordinate `q` of point `j`.
fn jacobians_at(model: &TrainedModel, i: usize, j: usize, q: usize, h: f64) -> Result<(DMatrix<f64>, Tensor)> {
    let moved = model.relocated(shifted(model, j, q, h))?;
    let slices = build_kernel_grad_slices(&moved)?;
    Ok((mean_jacobian(&moved, &slices, i)?, cov_jacobian(&moved, &slices, i)?))
}

/// Central differences in `(j, q)` of both analytic Jacobians of point `i`.
fn jacobian_differences(
    model: &TrainedModel,
    i: usize,
    j: usize,
    cfg: &FdConfig,
) -> Result<Vec<(DMatrix<f64>, Tensor)>> {
    (0..model.n())
        .map(|q| {
            let once = |h: f64| -> Result<(DMatrix<f64>, Vec<f64>, Vec<usize>)> {
                let (mp, sp) = jacobians_at(model, i, j, q, h)?;
                let (mm, sm) = jacobians_at(model, i, j, q, -h)?;
                let scale = 1.0 / (2.0 * h);
                let ds = sp.data().iter().zip(sm.data()).map(|(a, b)| (a - b) * scale).collect();
                Ok(((mp - mm) * scale, ds, sp.shape().to_vec()))
            };
            let h = cfg.step(model.training().locations()[(j, q)]);
            let (m1, s1, shape) = once(h)?;
            let (m2, s2, _) = once(h / 2.0)?;
            let ds = s1.iter().zip(&s2).map(|(c, f)| (4.0 * f - c) / 3.0).collect();
            Ok((richardson(m1, m2), Tensor::from_vec(&shape, ds)))
        })
        .collect()
}

/// Shape `[M, n, n]`; entry `[t, p, q]` differentiates along `(i, p)` then `(j, q)`.
pub fn fd_mean_hessian(model: &TrainedModel, i: usize, j: usize, cfg: &FdConfig) -> Result<Tensor> {
    check(model, i, cfg)?;
    check(model, j, cfg)?;
    let (m, n) = (model.m(), model.n());
    let diffs = jacobian_differences(model, i, j, cfg)?;
    let mut out = Tensor::zeros(&[m, n, n]);
    for (q, (dm, _)) in diffs.iter().enumerate() {
        for t in 0..m {
            for p in 0..n {
                out.set(&[t, p, q], dm[(t, p)]);
            }
        }
    }
    Ok(out)
}

/// Shape `[M, M, n, n]`.
pub fn fd_cov_hessian(model: &TrainedModel, i: usize, j: usize, cfg: &FdConfig) -> Result<Tensor> {
    check(model, i, cfg)?;
    check(model, j, cfg)?;
    let (m, n) = (model.m(), model.n());
    let diffs = jacobian_differences(model, i, j, cfg)?;
    let mut out = Tensor::zeros(&[m, m, n, n]);
    for (q, (_, ds)) in diffs.iter().enumerate() {
        for a in 0..m {
            for b in 0..m {
                for p in 0..n {
                    out.set(&[a, b, p, q], ds.get(&[a, b, p]));
                }
            }
        }
    }
    Ok(out)
}

/// Outcome of an elementwise `|a - b| <= atol + rtol |b|` comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Comparison {
    pub max_abs_err: f64,
    /// Largest `|a - b| / max(|b|, tiny)`.
    pub max_rel_err: f64,
    /// Largest `|a - b| / (atol + rtol |b|)`; at most 1 when passing.
    pub worst_ratio: f64,
    pub passed: bool,
}

pub fn compare(analytic: &[f64], oracle: &[f64], rtol: f64, atol: f64) -> Comparison {
    assert_eq!(analytic.len(), oracle.len(), "compared arrays differ in length");
    let mut out = Comparison {
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        worst_ratio: 0.0,
        passed: true,
    };
    for (&a, &b) in analytic.iter().zip(oracle) {
        let err = (a - b).abs();
        let tol = atol + rtol * b.abs();
        out.max_abs_err = out.max_abs_err.max(err);
        out.max_rel_err = out.max_rel_err.max(err / b.abs().max(f64::MIN_POSITIVE));
        out.worst_ratio = out.worst_ratio.max(err / tol);
        if !(err <= tol) {
            out.passed = false;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{train, TestGrid, TrainingSet};
    use crate::kernel::Hyperparams;

    #[test]
    fn compare_flags_nan_and_tolerance() {
        assert!(compare(&[1.0, 2.0], &[1.0, 2.0 + 1e-9], 1e-6, 0.0).passed);
        assert!(!compare(&[1.0], &[1.1], 1e-6, 1e-10).passed);
        assert!(!compare(&[f64::NAN], &[0.0], 1e-6, 1e-10).passed);
    }

    #[test]
    fn step_scale_is_validated() {
        let cfg = FdConfig {
            step_scale: 0.1,
            ..FdConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(FdConfig::default().validate().is_ok());
    }

    fn model() -> TrainedModel {
        let x = DMatrix::from_row_slice(3, 1, &[0.1, 0.4, 0.8]);
        let y = DVector::from_vec(vec![1.0, -0.5, 0.3]);
        let xe = DMatrix::from_row_slice(2, 1, &[0.2, 0.6]);
        let hp = Hyperparams::new(1.0, 0.3, 0.1).unwrap();
        train(TrainingSet::new(x, y).unwrap(), TestGrid::new(xe).unwrap(), hp).unwrap()
    }

    #[test]
    fn out_of_range_index_rejected() {
        let m = model();
        assert!(fd_mean_jacobian(&m, 3, &FdConfig::default()).is_err());
        assert!(fd_cov_hessian(&m, 0, 5, &FdConfig::default()).is_err());
    }

    #[test]
    fn oracle_is_deterministic() {
        let m = model();
        let a = fd_mean_hessian(&m, 0, 1, &FdConfig::default()).unwrap();
        let b = fd_mean_hessian(&m, 0, 1, &FdConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_measurements_give_zero_mean_hessian() {
        let m = model().with_measurements(DVector::zeros(3)).unwrap();
        let h = fd_mean_hessian(&m, 1, 2, &FdConfig::default()).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn halving_step_changes_little() {
        let m = model();
        let coarse = FdConfig {
            step_scale: 1e-2,
            ..FdConfig::default()
        };
        let fine = FdConfig {
            step_scale: 5e-3,
            ..FdConfig::default()
        };
        let a = fd_mean_jacobian(&m, 1, &coarse).unwrap();
        let b = fd_mean_jacobian(&m, 1, &fine).unwrap();
        let s = build_kernel_grad_slices(&m).unwrap();
        let exact = mean_jacobian(&m, &s, 1).unwrap();
        let ea = (a - &exact).amax();
        let eb = (b - &exact).amax();
        // extrapolated central differences: error falls like h^4
        assert!(ea / eb > 12.0 && ea / eb < 20.0, "ratio {}", ea / eb);
    }
}
