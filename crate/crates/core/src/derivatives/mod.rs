//! Closed-form sensitivities of the posterior moments to the training
//! locations, and the operator bundle the online correction reads.

mod cache;
pub mod directional;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gp::TrainedModel;
use crate::instrument;
use crate::kernel::{grad_second_into, hess_second_second_into, rows};
use crate::tensor::Tensor;

pub use cache::{read_cache, write_cache};
pub use directional::Direction;

/// Default cap on the number of dense `f64` scalars [`precompute`] may store.
pub const DEFAULT_BUDGET: usize = 10_000_000;

/// Covariance Hessian blocks are only stored densely up to this many test points.
pub const DENSE_COV_HESSIAN_MAX_M: usize = 50;

/// Per-point kernel derivative slices plus `K^-1`.
///
/// Slice `i` holds only the nonzero part of the derivative of the kernel
/// matrices with respect to training point `i`: `et(i)[t, :]` is
/// `grad_z k(x_e_t, z)` at `z = x_i`, and `tt(i)[l, :]` is
/// `grad_z k(x_l, z)` at `z = x_i` (row `i` is zero). The dense
/// `T x T x n` derivative of `K_TT` has this vector in both row `i` and
/// column `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelGradSlices {
    et: Vec<DMatrix<f64>>,
    tt: Vec<DMatrix<f64>>,
    et_hess: Vec<Tensor>,
    tt_hess: Vec<Tensor>,
    tt_cross: Vec<Tensor>,
    k_inv: DMatrix<f64>,
}

impl KernelGradSlices {
    /// `M x n`.
    pub fn et(&self, i: usize) -> &DMatrix<f64> {
        instrument::record(i);
        &self.et[i]
    }

    /// `T x n`.
    pub fn tt(&self, i: usize) -> &DMatrix<f64> {
        instrument::record(i);
        &self.tt[i]
    }

    /// `[M, n, n]`, `d^2 k(x_e_t, z) / dz dz^T` at `z = x_i`.
    pub fn et_hess(&self, i: usize) -> &Tensor {
        instrument::record(i);
        &self.et_hess[i]
    }

    /// `[T, n, n]`, `d^2 k(x_l, z) / dz dz^T` at `z = x_i`; zero at `l = i`.
    pub fn tt_hess(&self, i: usize) -> &Tensor {
        instrument::record(i);
        &self.tt_hess[i]
    }

    /// `[T, n, n]`, `d^2 k(w, z) / dw dz^T` at `w = x_l, z = x_i`; zero at `l = i`.
    pub fn tt_cross(&self, i: usize) -> &Tensor {
        instrument::record(i);
        &self.tt_cross[i]
    }

    /// Explicit inverse of the noisy training covariance.
    pub fn k_inv(&self) -> &DMatrix<f64> {
        &self.k_inv
    }

    /// `(M, n)`, or `(0, 0)` when there are no points. Not recorded as an access.
    pub fn test_shape(&self) -> (usize, usize) {
        self.et.first().map_or((0, 0), |e| e.shape())
    }

    pub fn len(&self) -> usize {
        self.et.len()
    }

    pub fn is_empty(&self) -> bool {
        self.et.is_empty()
    }

    /// Full `[M, T, n]` derivative of `K_eT` with respect to point `i`.
    pub fn et_dense(&self, i: usize) -> Tensor {
        let (m, n) = self.et[i].shape();
        let t = self.len();
        let mut out = Tensor::zeros(&[m, t, n]);
        for r in 0..m {
            for d in 0..n {
                out.set(&[r, i, d], self.et[i][(r, d)]);
            }
        }
        out
    }

    /// Full `[T, T, n]` derivative of `K_TT` with respect to point `i`.
    pub fn tt_dense(&self, i: usize) -> Tensor {
        let (t, n) = self.tt[i].shape();
        let mut out = Tensor::zeros(&[t, t, n]);
        for l in 0..t {
            for d in 0..n {
                let v = self.tt[i][(l, d)];
                out.set(&[l, i, d], v);
                out.set(&[i, l, d], v);
            }
        }
        out
    }

    /// Flip the sign of the `K_eT` slice of point `i`. Used to check that the
    /// gradient checker notices a broken operator.
    #[doc(hidden)]
    pub fn corrupt_sign(&mut self, i: usize) {
        self.et[i].neg_mut();
    }

    pub(crate) fn scalar_count(&self) -> usize {
        let s: usize = self.et.iter().chain(&self.tt).map(|m| m.len()).sum();
        let h: usize = self
            .et_hess
            .iter()
            .chain(&self.tt_hess)
            .chain(&self.tt_cross)
            .map(Tensor::len)
            .sum();
        s + h + self.k_inv.len()
    }
}

pub fn build_kernel_grad_slices(model: &TrainedModel) -> Result<KernelGradSlices> {
    let hp = *model.hyperparams();
    let (t, m, n) = (model.t(), model.m(), model.n());
    let xt = rows(model.training().locations());
    let xe = rows(model.test_grid().locations());

    let per_point: Vec<_> = (0..t)
        .into_par_iter()
        .map(|i| {
            let xi = &xt[i];
            let mut buf = vec![0.0; n];
            let mut et = DMatrix::zeros(m, n);
            let mut et_hess = Tensor::zeros(&[m, n, n]);
            for (r, x) in xe.iter().enumerate() {
                grad_second_into(x, xi, &hp, &mut buf);
                for d in 0..n {
                    et[(r, d)] = buf[d];
                }
                hess_second_second_into(x, xi, &hp, &mut et_hess.data_mut()[r * n * n..(r + 1) * n * n]);
            }
            let mut tt = DMatrix::zeros(t, n);
            let mut tt_hess = Tensor::zeros(&[t, n, n]);
            for (l, x) in xt.iter().enumerate() {
                if l == i {
                    continue;
                }
                grad_second_into(x, xi, &hp, &mut buf);
                for d in 0..n {
                    tt[(l, d)] = buf[d];
                }
                hess_second_second_into(x, xi, &hp, &mut tt_hess.data_mut()[l * n * n..(l + 1) * n * n]);
            }
            let tt_cross = tt_hess.map(|v| -v);
            (et, tt, et_hess, tt_hess, tt_cross)
        })
        .collect();

    let k_inv = model.factor().inverse();
    if !k_inv.iter().all(|v| v.is_finite()) {
        return Err(Error::Model("training covariance inverse is not finite".into()));
    }
    let mut s = KernelGradSlices {
        et: Vec::with_capacity(t),
        tt: Vec::with_capacity(t),
        et_hess: Vec::with_capacity(t),
        tt_hess: Vec::with_capacity(t),
        tt_cross: Vec::with_capacity(t),
        k_inv,
    };
    for (et, tt, eh, th, tc) in per_point {
        s.et.push(et);
        s.tt.push(tt);
        s.et_hess.push(eh);
        s.tt_hess.push(th);
        s.tt_cross.push(tc);
    }
    Ok(s)
}

fn check_index(i: usize, t: usize) -> Result<()> {
    if i < t {
        Ok(())
    } else {
        Err(Error::IndexOutOfRange { index: i, len: t })
    }
}

fn c_column(model: &TrainedModel) -> DMatrix<f64> {
    DMatrix::from_column_slice(model.t(), 1, model.c().as_slice())
}

/// `d M_hat / d x_i`, shape `M x n`.
///
/// Only slice `i` is read and no `T x T x n` intermediate is formed.
pub fn mean_jacobian(model: &TrainedModel, slices: &KernelGradSlices, i: usize) -> Result<DMatrix<f64>> {
    check_index(i, model.t())?;
    let c = model.c();
    let p = model.p();
    let g = slices.et(i);
    let r = slices.tt(i);
    let ci = c[i];
    let p_i = p.column(i);
    let mut out = DMatrix::zeros(model.m(), model.n());
    for d in 0..model.n() {
        let rd = r.column(d);
        let pr = p * rd;
        let rc = rd.dot(c);
        let col = (g.column(d) - pr) * ci - p_i * rc;
        out.set_column(d, &col);
    }
    Ok(out)
}

/// `d S_hat / d x_i`, shape `[M, M, n]`. Each slab along the last axis is
/// exactly symmetric.
pub fn cov_jacobian(model: &TrainedModel, slices: &KernelGradSlices, i: usize) -> Result<Tensor> {
    check_index(i, model.t())?;
    let (m, n) = (model.m(), model.n());
    let p = model.p();
    let g = slices.et(i);
    let r = slices.tt(i);
    let p_i = p.column(i);
    let mut out = Tensor::zeros(&[m, m, n]);
    let data = out.data_mut();
    for d in 0..n {
        let h = g.column(d) - p * r.column(d);
        for a in 0..m {
            for b in 0..m {
                data[(a * m + b) * n + d] = -(h[a] * p_i[b] + p_i[a] * h[b]);
            }
        }
    }
    Ok(out)
}

/// `d^2 M_hat / d x_i d x_j^T`, shape `[M, n, n]`.
pub fn mean_hessian(model: &TrainedModel, slices: &KernelGradSlices, i: usize, j: usize) -> Result<Tensor> {
    check_index(i, model.t())?;
    check_index(j, model.t())?;
    let (m, n) = (model.m(), model.n());
    let c = c_column(model);
    let mut out = Tensor::zeros(&[m, n, n]);
    for p in 0..n {
        let d1 = Direction::unit(i, p, n);
        for q in 0..n {
            let d2 = Direction::unit(j, q, n);
            let col = directional::mean_second(model, slices, &d1, &d2, &c);
            for t in 0..m {
                out.set(&[t, p, q], col[(t, 0)]);
            }
        }
    }
    Ok(out)
}

/// `d^2 S_hat / d x_i d x_j^T`, shape `[M, M, n, n]`.
pub fn cov_hessian(model: &TrainedModel, slices: &KernelGradSlices, i: usize, j: usize) -> Result<Tensor> {
    check_index(i, model.t())?;
    check_index(j, model.t())?;
    let (m, n) = (model.m(), model.n());
    let mut out = Tensor::zeros(&[m, m, n, n]);
    let data = out.data_mut();
    for p in 0..n {
        let d1 = Direction::unit(i, p, n);
        for q in 0..n {
            let d2 = Direction::unit(j, q, n);
            let s = directional::cov_second(model, slices, &d1, &d2);
            for a in 0..m {
                for b in 0..m {
                    data[((a * m + b) * n + p) * n + q] = s[(a, b)];
                }
            }
        }
    }
    Ok(out)
}

/// Measurement-independent tensors `F^i` (`[M, n, T]`) and `G^{ij}`
/// (`[M, n, n, T]`, stored at `i * T + j`) with `J_M^i = F^i Y` and
/// `H_M^{ij} = G^{ij} Y` for any measurement vector `Y`.
pub fn build_structural_tensors(
    model: &TrainedModel,
    slices: &KernelGradSlices,
    budget: usize,
) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let (t, m, n) = (model.t(), model.m(), model.n());
    let required = t * m * n * t + t * t * m * n * n * t;
    if required > budget {
        return Err(Error::BudgetExceeded { required, budget });
    }
    let w = slices.k_inv();
    let f = (0..t)
        .into_par_iter()
        .map(|i| {
            let mut out = Tensor::zeros(&[m, n, t]);
            for d in 0..n {
                let block = directional::mean_first(model, slices, &Direction::unit(i, d, n), w);
                fill_block(&mut out, d, &block, n);
            }
            out
        })
        .collect();
    let g = (0..t * t)
        .into_par_iter()
        .map(|ij| {
            let (i, j) = (ij / t, ij % t);
            let mut out = Tensor::zeros(&[m, n, n, t]);
            for p in 0..n {
                let d1 = Direction::unit(i, p, n);
                for q in 0..n {
                    let d2 = Direction::unit(j, q, n);
                    let block = directional::mean_second(model, slices, &d1, &d2, w);
                    fill_block(&mut out, p * n + q, &block, n * n);
                }
            }
            out
        })
        .collect();
    Ok((f, g))
}

/// Write `block` (`M x T`) into `out[:, slot, :]` where `out` is viewed as
/// `[M, slots, T]`.
fn fill_block(out: &mut Tensor, slot: usize, block: &DMatrix<f64>, slots: usize) {
    let (m, t) = block.shape();
    let data = out.data_mut();
    for r in 0..m {
        let base = (r * slots + slot) * t;
        for l in 0..t {
            data[base + l] = block[(r, l)];
        }
    }
}

/// How much of the operator bundle is materialised ahead of time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoragePolicy {
    /// Store `F`, `G`, the covariance Jacobians and (for small `M`) the
    /// covariance Hessians.
    Dense,
    /// Keep only the per-point slices and evaluate products on demand.
    Lazy,
    /// Dense when it fits in the budget, lazy otherwise.
    Auto,
}

impl StoragePolicy {
    pub(crate) fn code(self) -> u32 {
        match self {
            StoragePolicy::Dense => 0,
            StoragePolicy::Lazy => 1,
            StoragePolicy::Auto => 2,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(StoragePolicy::Dense),
            1 => Some(StoragePolicy::Lazy),
            2 => Some(StoragePolicy::Auto),
            _ => None,
        }
    }
}

impl std::str::FromStr for StoragePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(StoragePolicy::Dense),
            "lazy" => Ok(StoragePolicy::Lazy),
            "auto" => Ok(StoragePolicy::Auto),
            other => Err(Error::Config(format!(
                "unknown storage policy '{other}' (expected dense, lazy or auto)"
            ))),
        }
    }
}

/// Dense operator tensors, indexed by training point (or `i * T + j`).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseOperators {
    pub f: Vec<Tensor>,
    pub g: Vec<Tensor>,
    pub cov_jac: Vec<Tensor>,
    pub cov_hess: Option<Vec<Tensor>>,
    /// `J_M^i = F^i Y` (`M x n`) for the measurements in `y`.
    pub mean_jac: Vec<DMatrix<f64>>,
    /// `H_M^{ij} = G^{ij} Y` (`[M, n, n]`) for the measurements in `y`.
    pub mean_hess: Vec<Tensor>,
    /// Measurements the mean derivatives were instantiated with.
    pub y: DVector<f64>,
}

impl DenseOperators {
    /// Bundle the measurement-independent tensors and contract `F` and `G`
    /// with `y`.
    pub fn new(
        f: Vec<Tensor>,
        g: Vec<Tensor>,
        cov_jac: Vec<Tensor>,
        cov_hess: Option<Vec<Tensor>>,
        y: &DVector<f64>,
    ) -> Self {
        let mean_jac = f
            .iter()
            .map(|fi| {
                let (m, n) = (fi.shape()[0], fi.shape()[1]);
                DMatrix::from_row_slice(m, n, fi.contract_last(y.as_slice()).data())
            })
            .collect();
        let mean_hess = g.par_iter().map(|gij| gij.contract_last(y.as_slice())).collect();
        DenseOperators {
            f,
            g,
            cov_jac,
            cov_hess,
            mean_jac,
            mean_hess,
            y: y.clone(),
        }
    }
}

/// Everything the online correction needs, computed once per trained model
/// and independent of the measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionOperators {
    policy: StoragePolicy,
    slices: KernelGradSlices,
    dense: Option<DenseOperators>,
}

impl CorrectionOperators {
    /// Resolved policy: `Dense` or `Lazy`, never `Auto`.
    pub fn policy(&self) -> StoragePolicy {
        self.policy
    }

    pub fn slices(&self) -> &KernelGradSlices {
        &self.slices
    }

    pub fn dense(&self) -> Option<&DenseOperators> {
        self.dense.as_ref()
    }

    #[doc(hidden)]
    pub fn slices_mut(&mut self) -> &mut KernelGradSlices {
        &mut self.slices
    }

    /// Number of `f64` values held.
    pub fn scalar_count(&self) -> usize {
        let dense = self.dense.as_ref().map_or(0, |d| {
            let sum = |v: &Vec<Tensor>| v.iter().map(Tensor::len).sum::<usize>();
            sum(&d.f)
                + sum(&d.g)
                + sum(&d.cov_jac)
                + d.cov_hess.as_ref().map_or(0, sum)
                + d.mean_jac.iter().map(|j| j.len()).sum::<usize>()
                + sum(&d.mean_hess)
                + d.y.len()
        });
        self.slices.scalar_count() + dense
    }

    pub(crate) fn from_parts(policy: StoragePolicy, slices: KernelGradSlices, dense: Option<DenseOperators>) -> Self {
        CorrectionOperators { policy, slices, dense }
    }
}

/// Scalars a dense bundle for this model would store.
pub fn dense_scalar_count(t: usize, m: usize, n: usize) -> usize {
    let f = t * m * n * t;
    let g = t * t * m * n * n * t;
    let cj = t * m * m * n;
    let ch = if m <= DENSE_COV_HESSIAN_MAX_M {
        t * t * m * m * n * n
    } else {
        0
    };
    let instantiated = t * m * n + t * t * m * n * n + t;
    f + g + cj + ch + instantiated
}

pub fn precompute(model: &TrainedModel, policy: StoragePolicy) -> Result<CorrectionOperators> {
    precompute_with_budget(model, policy, DEFAULT_BUDGET)
}

/// Build the operator bundle. `Dense` fails with [`Error::BudgetExceeded`]
/// when the dense tensors would exceed `budget` scalars.
pub fn precompute_with_budget(
    model: &TrainedModel,
    policy: StoragePolicy,
    budget: usize,
) -> Result<CorrectionOperators> {
    let (t, m, n) = (model.t(), model.m(), model.n());
    let required = dense_scalar_count(t, m, n);
    let resolved = match policy {
        StoragePolicy::Auto if required <= budget => StoragePolicy::Dense,
        StoragePolicy::Auto => StoragePolicy::Lazy,
        p => p,
    };
    if resolved == StoragePolicy::Dense && required > budget {
        return Err(Error::BudgetExceeded { required, budget });
    }
    let slices = build_kernel_grad_slices(model)?;
    let dense = if resolved == StoragePolicy::Dense {
        let (f, g) = build_structural_tensors(model, &slices, budget)?;
        let cov_jac = (0..t)
            .into_par_iter()
            .map(|i| cov_jacobian(model, &slices, i))
            .collect::<Result<Vec<_>>>()?;
        let cov_hess = if m <= DENSE_COV_HESSIAN_MAX_M {
            Some(
                (0..t * t)
                    .into_par_iter()
                    .map(|ij| cov_hessian(model, &slices, ij / t, ij % t))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Some(DenseOperators::new(
            f,
            g,
            cov_jac,
            cov_hess,
            model.training().measurements(),
        ))
    } else {
        None
    };
    Ok(CorrectionOperators {
        policy: resolved,
        slices,
        dense,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{train, TestGrid, TrainingSet};
    use crate::kernel::Hyperparams;
    use nalgebra::DVector;

    fn model_1d() -> TrainedModel {
        let x = DMatrix::from_row_slice(4, 1, &[0.0, 0.3, 0.6, 1.0]);
        let y = DVector::from_vec(vec![0.2, -0.4, 0.9, 0.1]);
        let xe = DMatrix::from_row_slice(3, 1, &[0.1, 0.5, 0.8]);
        let hp = Hyperparams::new(1.0, 0.3, 0.1).unwrap();
        train(TrainingSet::new(x, y).unwrap(), TestGrid::new(xe).unwrap(), hp).unwrap()
    }

    #[test]
    fn slices_have_expected_shapes_and_zero_rows() {
        let model = model_1d();
        let s = build_kernel_grad_slices(&model).unwrap();
        assert_eq!(s.len(), 4);
        for i in 0..4 {
            assert_eq!(s.et(i).shape(), (3, 1));
            assert_eq!(s.tt(i).shape(), (4, 1));
            assert_eq!(s.tt(i)[(i, 0)], 0.0);
            assert_eq!(s.tt_hess(i).get(&[i, 0, 0]), 0.0);
        }
        let dense = s.tt_dense(1);
        for a in 0..4 {
            for b in 0..4 {
                if a != 1 && b != 1 {
                    assert_eq!(dense.get(&[a, b, 0]), 0.0);
                }
                assert_eq!(dense.get(&[a, b, 0]), dense.get(&[b, a, 0]));
            }
        }
    }

    #[test]
    fn jacobian_index_out_of_range() {
        let model = model_1d();
        let s = build_kernel_grad_slices(&model).unwrap();
        assert!(matches!(
            mean_jacobian(&model, &s, 4),
            Err(Error::IndexOutOfRange { index: 4, len: 4 })
        ));
        assert!(cov_hessian(&model, &s, 0, 9).is_err());
    }

    #[test]
    fn cov_jacobian_slabs_exactly_symmetric() {
        let model = model_1d();
        let s = build_kernel_grad_slices(&model).unwrap();
        let j = cov_jacobian(&model, &s, 2).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                assert_eq!(j.get(&[a, b, 0]), j.get(&[b, a, 0]));
            }
        }
    }

    #[test]
    fn structural_tensors_reproduce_jacobian_and_hessian() {
        let model = model_1d();
        let s = build_kernel_grad_slices(&model).unwrap();
        let (f, g) = build_structural_tensors(&model, &s, DEFAULT_BUDGET).unwrap();
        let y = model.training().measurements().as_slice();
        for i in 0..4 {
            let jm = mean_jacobian(&model, &s, i).unwrap();
            let fy = f[i].contract_last(y);
            let diff = (fy.to_matrix() - &jm).norm();
            assert!(diff <= 1e-12 * jm.norm().max(1.0), "F*Y mismatch at {i}: {diff}");
            for j in 0..4 {
                let hm = mean_hessian(&model, &s, i, j).unwrap();
                let gy = g[i * 4 + j].contract_last(y);
                assert!(gy.max_abs_diff(&hm) <= 1e-12 * hm.norm().max(1.0));
            }
        }
    }

    #[test]
    fn structural_budget_is_enforced() {
        let model = model_1d();
        let s = build_kernel_grad_slices(&model).unwrap();
        assert!(matches!(
            build_structural_tensors(&model, &s, 10),
            Err(Error::BudgetExceeded { .. })
        ));
        assert!(matches!(
            precompute_with_budget(&model, StoragePolicy::Dense, 10),
            Err(Error::BudgetExceeded { .. })
        ));
        let auto = precompute_with_budget(&model, StoragePolicy::Auto, 10).unwrap();
        assert_eq!(auto.policy(), StoragePolicy::Lazy);
        assert!(auto.dense().is_none());
    }

    #[test]
    fn hessian_blocks_transpose_pairwise() {
        let model = model_1d();
        let s = build_kernel_grad_slices(&model).unwrap();
        let h01 = mean_hessian(&model, &s, 0, 1).unwrap();
        let h10 = mean_hessian(&model, &s, 1, 0).unwrap();
        assert!(h01.max_abs_diff(&h10) < 1e-12);
        let c01 = cov_hessian(&model, &s, 0, 1).unwrap();
        let c10 = cov_hessian(&model, &s, 1, 0).unwrap();
        assert!(c01.max_abs_diff(&c10) < 1e-12);
    }
}
