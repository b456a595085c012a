//! Online Taylor correction of a trained model's posterior moments for known
//! training-location errors.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::derivatives::directional::{self, Direction};
use crate::derivatives::{precompute, read_cache, write_cache, CorrectionOperators, DenseOperators, StoragePolicy};
use crate::error::{check_dim, Error, Result};
use crate::gp::{symmetrize, TrainedModel};
use crate::instrument;
use crate::tensor::Tensor;

/// Taylor order of the correction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Order {
    First,
    Second,
}

impl Order {
    pub fn as_u8(self) -> u8 {
        match self {
            Order::First => 1,
            Order::Second => 2,
        }
    }

    fn second(self) -> bool {
        self == Order::Second
    }
}

impl TryFrom<u8> for Order {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Order::First),
            2 => Ok(Order::Second),
            _ => Err(Error::InvalidInput(format!("correction order must be 1 or 2, got {v}"))),
        }
    }
}

/// Known location errors for a subset of the training points. Points that are
/// not listed did not move.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSet {
    dim: usize,
    delta_max: f64,
    deltas: BTreeMap<usize, Vec<f64>>,
}

impl PerturbationSet {
    /// Empty set for `dim`-dimensional locations whose errors are bounded by
    /// `delta_max` in Euclidean norm.
    pub fn new(dim: usize, delta_max: f64) -> Result<Self> {
        if dim == 0 || !(delta_max >= 0.0) || !delta_max.is_finite() {
            return Err(Error::InvalidInput(format!(
                "perturbation set needs dim >= 1 and a finite delta_max >= 0 (got {dim}, {delta_max})"
            )));
        }
        Ok(PerturbationSet {
            dim,
            delta_max,
            deltas: BTreeMap::new(),
        })
    }

    /// One entry per row of `deltas` (`T x n`), skipping all-zero rows, with
    /// `delta_max` set to the largest row norm.
    pub fn from_rows(deltas: &DMatrix<f64>) -> Result<Self> {
        let delta_max = deltas.row_iter().map(|r| r.norm()).fold(0.0, f64::max);
        let mut set = PerturbationSet::new(deltas.ncols(), delta_max)?;
        for (i, row) in deltas.row_iter().enumerate() {
            if row.iter().any(|&v| v != 0.0) {
                set.insert(i, row.iter().copied().collect::<Vec<_>>().as_slice())?;
            }
        }
        Ok(set)
    }

    /// Set (or replace) the error of point `index`.
    pub fn insert(&mut self, index: usize, delta: &[f64]) -> Result<()> {
        check_dim("perturbation dimension", self.dim, delta.len())?;
        if delta.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "perturbation of point {index} is not finite"
            )));
        }
        let norm = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > self.delta_max {
            return Err(Error::InvalidInput(format!(
                "perturbation of point {index} has norm {norm:e} above the declared bound {:e}",
                self.delta_max
            )));
        }
        self.deltas.insert(index, delta.to_vec());
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn delta_max(&self) -> f64 {
        self.delta_max
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&[f64]> {
        self.deltas.get(&index).map(Vec::as_slice)
    }

    /// Entries in increasing index order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.deltas.iter().map(|(&i, d)| (i, d.as_slice()))
    }

    /// Dense `t x n` matrix of errors, zero for unlisted points.
    pub fn to_rows(&self, t: usize) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(t, self.dim);
        for (i, d) in self.iter() {
            if i < t {
                for (c, &v) in d.iter().enumerate() {
                    out[(i, c)] = v;
                }
            }
        }
        out
    }

    pub fn direction(&self) -> Direction {
        let indices: Vec<usize> = self.deltas.keys().copied().collect();
        let deltas = DMatrix::from_fn(indices.len(), self.dim, |a, c| self.deltas[&indices[a]][c]);
        Direction::new(indices, deltas).expect("map keys are unique")
    }

    fn validate(&self, model: &TrainedModel) -> Result<()> {
        check_dim("perturbation dimension", model.n(), self.dim)?;
        match self.deltas.keys().next_back() {
            Some(&last) if last >= model.t() => Err(Error::IndexOutOfRange {
                index: last,
                len: model.t(),
            }),
            _ => Ok(()),
        }
    }
}

/// Zeroth, first and second order contributions of a correction.
#[derive(Debug, Clone, PartialEq)]
pub struct TermBreakdown {
    pub mean: [DVector<f64>; 3],
    pub cov: [DMatrix<f64>; 3],
}

/// Corrected posterior moments.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectedPosterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub order_used: Order,
    pub terms: Option<TermBreakdown>,
    /// Smallest eigenvalue of the corrected covariance before any projection,
    /// when diagnostics were requested.
    pub min_eigenvalue: Option<f64>,
}

impl CorrectedPosterior {
    /// True when diagnostics found a negative eigenvalue.
    pub fn indefinite(&self) -> Option<bool> {
        self.min_eigenvalue.map(|v| v < 0.0)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CorrectionOptions {
    /// Clip negative eigenvalues of the corrected covariance to zero.
    pub psd_project: bool,
    /// Fill [`CorrectedPosterior::terms`] and `min_eigenvalue`.
    pub diagnostics: bool,
}

/// Check that `ops` was built for a model of this shape.
fn check_ops(ops: &CorrectionOperators, model: &TrainedModel) -> Result<()> {
    let s = ops.slices();
    let (m, n) = s.test_shape();
    let mismatch =
        s.len() != model.t() || s.is_empty() || (m, n) != (model.m(), model.n()) || s.k_inv().nrows() != model.t();
    if mismatch {
        return Err(Error::Contract(format!(
            "operators are for T={}, M={m}, n={n}; model has T={}, M={}, n={}",
            s.len(),
            model.t(),
            model.m(),
            model.n()
        )));
    }
    Ok(())
}

fn mean_increment_dense(
    dense: &DenseOperators,
    model: &TrainedModel,
    pert: &PerturbationSet,
    order: Order,
) -> DVector<f64> {
    let (t, m, n) = (model.t(), model.m(), model.n());
    let y = model.training().measurements();
    let mut inc = DVector::zeros(m);
    if *y == dense.y {
        let nn = n * n;
        let mut coef = vec![0.0; nn];
        for (i, di) in pert.iter() {
            instrument::record(i);
            let jm = &dense.mean_jac[i];
            for (p, &dp) in di.iter().enumerate() {
                inc.axpy(dp, &jm.column(p), 1.0);
            }
            if !order.second() {
                continue;
            }
            for (j, dj) in pert.iter() {
                for (pq, c) in coef.iter_mut().enumerate() {
                    *c = 0.5 * di[pq / n] * dj[pq % n];
                }
                let h = dense.mean_hess[i * t + j].data();
                let out = inc.as_mut_slice();
                for (pq, &c) in coef.iter().enumerate() {
                    if nn == 1 {
                        out.iter_mut().zip(h).for_each(|(dst, v)| *dst += c * v);
                    } else {
                        out.iter_mut()
                            .zip(h[pq..].iter().step_by(nn))
                            .for_each(|(dst, v)| *dst += c * v);
                    }
                }
            }
        }
        return inc;
    }
    // Other measurements: fold the perturbation into F and G first, then
    // contract the `M x T` result with Y once.
    let mut w = vec![0.0; m * t];
    let mut fold = |slab: &[f64], slots: usize, coef: &dyn Fn(usize) -> f64| {
        for r in 0..m {
            let dst = &mut w[r * t..(r + 1) * t];
            for slot in 0..slots {
                let c = coef(slot);
                if c != 0.0 {
                    let src = &slab[(r * slots + slot) * t..(r * slots + slot + 1) * t];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += c * s);
                }
            }
        }
    };
    for (i, di) in pert.iter() {
        instrument::record(i);
        fold(dense.f[i].data(), n, &|p| di[p]);
    }
    if order.second() {
        for (i, di) in pert.iter() {
            for (j, dj) in pert.iter() {
                fold(dense.g[i * t + j].data(), n * n, &|pq| 0.5 * di[pq / n] * dj[pq % n]);
            }
        }
    }
    for r in 0..m {
        inc[r] = w[r * t..(r + 1) * t].iter().zip(y.iter()).map(|(a, b)| a * b).sum();
    }
    inc
}

/// `out[a, b] += scale * sum_p slab[a, b, p] w[p]` for a slab that is
/// symmetric in `(a, b)`, walked in storage order.
fn add_contracted(out: &mut DMatrix<f64>, slab: &Tensor, w: &[f64], scale: f64) {
    let k = w.len();
    let data = slab.data();
    let out = out.as_mut_slice();
    for (p, &wp) in w.iter().enumerate() {
        let c = scale * wp;
        if c == 0.0 {
            continue;
        }
        if k == 1 {
            out.iter_mut().zip(data).for_each(|(dst, v)| *dst += c * v);
        } else {
            out.iter_mut()
                .zip(data[p..].iter().step_by(k))
                .for_each(|(dst, v)| *dst += c * v);
        }
    }
}

/// A covariance increment, either complete or as `Z` with increment `Z + Z^T`.
enum CovIncrement {
    Full(DMatrix<f64>),
    Half(DMatrix<f64>),
}

fn cov_increment(
    ops: &CorrectionOperators,
    model: &TrainedModel,
    pert: &PerturbationSet,
    order: Order,
) -> CovIncrement {
    let dense = match ops.dense() {
        Some(d) if !order.second() || d.cov_hess.is_some() => d,
        // without stored covariance Hessians the directional form is cheaper
        // than contracting the Jacobians and adding the lazy second order
        _ => {
            return CovIncrement::Half(directional::cov_increment_half(
                model,
                ops.slices(),
                &pert.direction(),
                order.second(),
            ))
        }
    };
    let (t, m, n) = (model.t(), model.m(), model.n());
    let mut inc = DMatrix::zeros(m, m);
    for (i, di) in pert.iter() {
        instrument::record(i);
        add_contracted(&mut inc, &dense.cov_jac[i], di, 1.0);
    }
    if let (true, Some(blocks)) = (order.second(), &dense.cov_hess) {
        let mut w = vec![0.0; n * n];
        for (i, di) in pert.iter() {
            for (j, dj) in pert.iter() {
                for (pq, v) in w.iter_mut().enumerate() {
                    *v = di[pq / n] * dj[pq % n];
                }
                add_contracted(&mut inc, &blocks[i * t + j], &w, 0.5);
            }
        }
    }
    CovIncrement::Full(inc)
}

fn apply_cov(base: &TrainedModel, inc: CovIncrement) -> DMatrix<f64> {
    let cov = base.cov_hat();
    match inc {
        CovIncrement::Full(d) => {
            let mut out = cov + d;
            symmetrize(&mut out);
            out
        }
        // exactly symmetric by construction
        CovIncrement::Half(z) => {
            let m = cov.nrows();
            let zs = z.as_slice();
            let mut out = cov.clone();
            for (b, col) in out.as_mut_slice().chunks_exact_mut(m).enumerate() {
                let zcol = &zs[b * m..(b + 1) * m];
                for (a, v) in col.iter_mut().enumerate() {
                    *v += zcol[a] + zs[a * m + b];
                }
            }
            out
        }
    }
}

/// Corrected mean `M_hat + sum_i J_M^i d_i (+ 1/2 sum_ij d_i^T H_M^ij d_j)`,
/// summing only over the listed points.
pub fn correct_mean(
    ops: &CorrectionOperators,
    base: &TrainedModel,
    pert: &PerturbationSet,
    order: Order,
) -> Result<DVector<f64>> {
    check_ops(ops, base)?;
    pert.validate(base)?;
    if pert.is_empty() {
        return Ok(base.mean_hat().clone());
    }
    let inc = match ops.dense() {
        Some(dense) => mean_increment_dense(dense, base, pert, order),
        None => directional::mean_increment(base, ops.slices(), &pert.direction(), order.second()),
    };
    Ok(base.mean_hat() + inc)
}

/// Corrected covariance, symmetrized. No positive-semidefinite projection is
/// applied here; see [`correct`].
pub fn correct_cov(
    ops: &CorrectionOperators,
    base: &TrainedModel,
    pert: &PerturbationSet,
    order: Order,
) -> Result<DMatrix<f64>> {
    check_ops(ops, base)?;
    pert.validate(base)?;
    if pert.is_empty() {
        return Ok(base.cov_hat().clone());
    }
    Ok(apply_cov(base, cov_increment(ops, base, pert, order)))
}

/// Clip negative eigenvalues to zero.
pub fn project_psd(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(cov.clone());
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let mut out = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    symmetrize(&mut out);
    out
}

fn min_eigenvalue(cov: &DMatrix<f64>) -> f64 {
    cov.symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

fn breakdown(ops: &CorrectionOperators, base: &TrainedModel, pert: &PerturbationSet) -> TermBreakdown {
    let (m, t) = (base.m(), base.t());
    if pert.is_empty() {
        return TermBreakdown {
            mean: [base.mean_hat().clone(), DVector::zeros(m), DVector::zeros(m)],
            cov: [base.cov_hat().clone(), DMatrix::zeros(m, m), DMatrix::zeros(m, m)],
        };
    }
    let s = ops.slices();
    let dir = pert.direction();
    let c = DMatrix::from_column_slice(t, 1, base.c().as_slice());
    let m1 = directional::mean_first(base, s, &dir, &c).column(0).into_owned();
    let m2 = directional::mean_second_quadratic(base, s, &dir, &c)
        .column(0)
        .into_owned()
        * 0.5;
    let s1 = directional::cov_first(base, s, &dir);
    let s2 = directional::cov_second_quadratic(base, s, &dir) * 0.5;
    TermBreakdown {
        mean: [base.mean_hat().clone(), m1, m2],
        cov: [base.cov_hat().clone(), s1, s2],
    }
}

/// Both corrected moments plus optional projection and diagnostics. With
/// default options the moments equal [`correct_mean`] and [`correct_cov`]
/// bit for bit.
pub fn correct(
    ops: &CorrectionOperators,
    base: &TrainedModel,
    pert: &PerturbationSet,
    order: Order,
    opts: &CorrectionOptions,
) -> Result<CorrectedPosterior> {
    let (mean, mut cov) = if ops.dense().is_none() && !pert.is_empty() {
        // one pass builds the factors both moments share
        check_ops(ops, base)?;
        pert.validate(base)?;
        let (dm, z) = directional::increments(base, ops.slices(), &pert.direction(), order.second());
        (base.mean_hat() + dm, apply_cov(base, CovIncrement::Half(z)))
    } else {
        (
            correct_mean(ops, base, pert, order)?,
            correct_cov(ops, base, pert, order)?,
        )
    };
    let (terms, min_eig) = if opts.diagnostics {
        (Some(breakdown(ops, base, pert)), Some(min_eigenvalue(&cov)))
    } else {
        (None, None)
    };
    if opts.psd_project {
        cov = project_psd(&cov);
    }
    Ok(CorrectedPosterior {
        mean,
        cov,
        order_used: order,
        terms,
        min_eigenvalue: min_eig,
    })
}

/// Wall-clock split between operator construction and the correction itself.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseTiming {
    pub offline: Duration,
    pub online: Duration,
    pub cache_hit: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub policy: StoragePolicy,
    /// Operator cache: loaded if it exists and matches the model, written
    /// otherwise.
    pub cache: Option<PathBuf>,
    pub correction: CorrectionOptions,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            policy: StoragePolicy::Auto,
            cache: None,
            correction: CorrectionOptions::default(),
        }
    }
}

/// Full pipeline: build (or load) the operators, then correct.
pub fn run_correction(
    base: &TrainedModel,
    pert: &PerturbationSet,
    order: Order,
    opts: &RunOptions,
) -> Result<(CorrectedPosterior, PhaseTiming)> {
    let start = Instant::now();
    let mut cache_hit = false;
    let ops = match &opts.cache {
        Some(path) if path.exists() => {
            cache_hit = true;
            read_cache(path, base)?
        }
        Some(path) => {
            let ops = precompute(base, opts.policy)?;
            write_cache(&ops, base, path)?;
            ops
        }
        None => precompute(base, opts.policy)?,
    };
    let offline = start.elapsed();
    let start = Instant::now();
    let post = correct(&ops, base, pert, order, &opts.correction)?;
    let online = start.elapsed();
    Ok((
        post,
        PhaseTiming {
            offline,
            online,
            cache_hit,
        },
    ))
}
