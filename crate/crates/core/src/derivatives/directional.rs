//! Directional first and second derivatives of the GP moments with respect to
//! the training locations.
//!
//! A [`Direction`] moves a subset `K` of the training points. Differentiating a
//! kernel matrix along it only touches the columns (and, for `K_TT`, rows) of
//! the moved points, so every derivative below is assembled from `T x K` and
//! `M x K` factors:
//!
//! ```text
//! A' = G E^T                       (A = K_eT, G[:, a] = grad_z k(X_e, x_a) . d_a)
//! K' = R E^T + E R^T               (R[:, a]  = grad_z k(X_hat, x_a) . d_a)
//! m' = A' c - P K' c               S' = -(H P_K^T + P_K H^T),  H = G - P R
//! ```
//!
//! and the second derivatives follow from `d(K^-1) = -K^-1 dK K^-1` applied
//! twice. Nothing of size `T x T x n` is ever formed.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::gp::TrainedModel;

use super::KernelGradSlices;

/// A perturbation of a subset of training points: point `indices[a]` moves by
/// row `a` of `deltas`.
#[derive(Debug, Clone, PartialEq)]
pub struct Direction {
    indices: Vec<usize>,
    deltas: DMatrix<f64>,
    /// `deltas` in row-major order.
    rows: Vec<f64>,
}

fn row_major(deltas: &DMatrix<f64>) -> Vec<f64> {
    deltas.transpose().as_slice().to_vec()
}

impl Direction {
    pub fn new(indices: Vec<usize>, deltas: DMatrix<f64>) -> Result<Self> {
        check_dim("direction rows", indices.len(), deltas.nrows())?;
        let mut seen = indices.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidInput("direction lists a training point twice".into()));
        }
        let rows = row_major(&deltas);
        Ok(Direction { indices, deltas, rows })
    }

    /// Unit move of coordinate `coord` of point `index`.
    pub fn unit(index: usize, coord: usize, n: usize) -> Self {
        let mut deltas = DMatrix::zeros(1, n);
        deltas[(0, coord)] = 1.0;
        Direction {
            indices: vec![index],
            rows: row_major(&deltas),
            deltas,
        }
    }

    /// Every point moves by the matching row of `deltas` (`T x n`).
    pub fn dense(deltas: DMatrix<f64>) -> Self {
        Direction {
            indices: (0..deltas.nrows()).collect(),
            rows: row_major(&deltas),
            deltas,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn deltas(&self) -> &DMatrix<f64> {
        &self.deltas
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    fn delta(&self, a: usize) -> &[f64] {
        let n = self.deltas.ncols();
        &self.rows[a * n..(a + 1) * n]
    }
}

/// First-order factors of a direction.
struct Lifted<'a> {
    dir: &'a Direction,
    /// `T x K`, column `a` is `R_{k_a} d_a`.
    r: DMatrix<f64>,
    /// `M x K`, column `a` is `G_{k_a} d_a`.
    g: DMatrix<f64>,
    /// `P R`.
    pr: DMatrix<f64>,
    /// `G - P R`.
    h: DMatrix<f64>,
    /// Columns of `P` at the moved points.
    p_k: DMatrix<f64>,
}

impl<'a> Lifted<'a> {
    fn new(model: &TrainedModel, slices: &KernelGradSlices, dir: &'a Direction) -> Self {
        let (t, m, k) = (model.t(), model.m(), dir.len());
        let mut r = DMatrix::zeros(t, k);
        let mut g = DMatrix::zeros(m, k);
        for (a, &i) in dir.indices.iter().enumerate() {
            let d = dir.deltas.row(a).transpose();
            r.set_column(a, &(slices.tt(i) * &d));
            g.set_column(a, &(slices.et(i) * &d));
        }
        let pr = model.p() * &r;
        let h = &g - &pr;
        let p_k = model.p().select_columns(dir.indices.iter());
        Lifted { dir, r, g, pr, h, p_k }
    }

    fn idx(&self) -> &[usize] {
        &self.dir.indices
    }
}

/// Own-point curvature terms for two directions over their shared points:
/// `(G2, Q, shared)` with `G2[:, s] = d1^T H22(X_e, x_k) d2` and
/// `Q[:, s] = d1^T H22(X_hat, x_k) d2` for shared point `k = shared[s]`.
fn own_curvature(
    model: &TrainedModel,
    slices: &KernelGradSlices,
    d1: &Direction,
    d2: &Direction,
) -> (DMatrix<f64>, DMatrix<f64>, Vec<usize>) {
    let (t, m, n) = (model.t(), model.m(), model.n());
    let pairs: Vec<(usize, usize, usize)> = if d1.indices == d2.indices {
        d1.indices.iter().enumerate().map(|(a, &i)| (i, a, a)).collect()
    } else {
        d1.indices
            .iter()
            .enumerate()
            .filter_map(|(a, &i)| d2.indices.iter().position(|&j| j == i).map(|b| (i, a, b)))
            .collect()
    };
    let mut g2 = DMatrix::zeros(m, pairs.len());
    let mut q = DMatrix::zeros(t, pairs.len());
    let mut shared = Vec::with_capacity(pairs.len());
    let mut uv = vec![0.0; n * n];
    for (s, &(i, a, b)) in pairs.iter().enumerate() {
        outer(d1.delta(a), d2.delta(b), &mut uv);
        contract_blocks(
            slices.et_hess(i).data(),
            &uv,
            &mut g2.as_mut_slice()[s * m..(s + 1) * m],
        );
        contract_blocks(slices.tt_hess(i).data(), &uv, &mut q.as_mut_slice()[s * t..(s + 1) * t]);
        shared.push(i);
    }
    (g2, q, shared)
}

/// `uv[p * n + q] = u[p] v[q]`.
#[inline]
fn outer(u: &[f64], v: &[f64], uv: &mut [f64]) {
    let n = v.len();
    for (p, &up) in u.iter().enumerate() {
        for (q, &vq) in v.iter().enumerate() {
            uv[p * n + q] = up * vq;
        }
    }
}

/// `out[r] = <blocks[r], uv>` for consecutive `n x n` blocks.
#[inline]
fn contract_blocks(blocks: &[f64], uv: &[f64], out: &mut [f64]) {
    for (dst, block) in out.iter_mut().zip(blocks.chunks_exact(uv.len())) {
        *dst = block.iter().zip(uv).map(|(x, y)| x * y).sum();
    }
}

/// Cross curvature `X[a, b] = d1_a^T H12(x_{k_a}, x_{k_b}) d2_b` for distinct
/// points; zero where the two entries name the same point.
fn cross_curvature(slices: &KernelGradSlices, d1: &Direction, d2: &Direction, n: usize) -> DMatrix<f64> {
    let (k1, k2) = (d1.len(), d2.len());
    let mut x = DMatrix::zeros(k1, k2);
    let mut uv = vec![0.0; n * n];
    let nn = n * n;
    let out = x.as_mut_slice();
    for (b, &j) in d2.indices.iter().enumerate() {
        let v = d2.delta(b);
        let cross = slices.tt_cross(j).data();
        for (a, &i) in d1.indices.iter().enumerate() {
            if i != j {
                outer(d1.delta(a), v, &mut uv);
                out[b * k1 + a] = cross[i * nn..(i + 1) * nn].iter().zip(&uv).map(|(x, y)| x * y).sum();
            }
        }
    }
    x
}

fn rows_at(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    m.select_rows(idx.iter())
}

fn sub(w: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |a, b| w[(rows[a], cols[b])])
}

/// `m'[d]` for every column of `coef` standing in for `c = K^-1 Y` (`T x r`).
pub fn mean_first(
    model: &TrainedModel,
    slices: &KernelGradSlices,
    dir: &Direction,
    coef: &DMatrix<f64>,
) -> DMatrix<f64> {
    if dir.is_empty() {
        return DMatrix::zeros(model.m(), coef.ncols());
    }
    let l = Lifted::new(model, slices, dir);
    mean_first_lifted(&l, coef)
}

fn mean_first_lifted(l: &Lifted, coef: &DMatrix<f64>) -> DMatrix<f64> {
    &l.h * rows_at(coef, l.idx()) - &l.p_k * (l.r.transpose() * coef)
}

/// `S'[d] = -(H P_K^T + P_K H^T)`.
pub fn cov_first(model: &TrainedModel, slices: &KernelGradSlices, dir: &Direction) -> DMatrix<f64> {
    if dir.is_empty() {
        return DMatrix::zeros(model.m(), model.m());
    }
    let l = Lifted::new(model, slices, dir);
    let z = -(&l.h * l.p_k.transpose());
    &z + z.transpose()
}

/// Mixed second derivative `m''[d1, d2]` for each column of `coef`.
pub fn mean_second(
    model: &TrainedModel,
    slices: &KernelGradSlices,
    d1: &Direction,
    d2: &Direction,
    coef: &DMatrix<f64>,
) -> DMatrix<f64> {
    if d1.is_empty() || d2.is_empty() {
        return DMatrix::zeros(model.m(), coef.ncols());
    }
    let w = slices.k_inv();
    let l1 = Lifted::new(model, slices, d1);
    let l2 = Lifted::new(model, slices, d2);
    let (g12, q, shared) = own_curvature(model, slices, d1, d2);
    let x12 = cross_curvature(slices, d1, d2, model.n());

    // omega_a = K^-1 K'_a C
    let omega = |l: &Lifted| -> DMatrix<f64> {
        let s = w * &l.r;
        s * rows_at(coef, l.idx()) + w.select_columns(l.idx().iter()) * (l.r.transpose() * coef)
    };
    let om1 = omega(&l1);
    let om2 = omega(&l2);

    let mut out = &g12 * rows_at(coef, &shared);
    if !shared.is_empty() {
        let pq = model.p() * &q;
        out -= pq * rows_at(coef, &shared);
        out -= model.p().select_columns(shared.iter()) * (q.transpose() * coef);
    }
    out -= &l1.h * rows_at(&om2, l1.idx());
    out -= &l2.h * rows_at(&om1, l2.idx());
    out += &l1.p_k * (l1.r.transpose() * &om2 - &x12 * rows_at(coef, l2.idx()));
    out += &l2.p_k * (l2.r.transpose() * &om1 - x12.transpose() * rows_at(coef, l1.idx()));
    out
}

/// Mixed second derivative `S''[d1, d2]` of the posterior covariance.
pub fn cov_second(model: &TrainedModel, slices: &KernelGradSlices, d1: &Direction, d2: &Direction) -> DMatrix<f64> {
    let m = model.m();
    if d1.is_empty() || d2.is_empty() {
        return DMatrix::zeros(m, m);
    }
    let w = slices.k_inv();
    let l1 = Lifted::new(model, slices, d1);
    let l2 = Lifted::new(model, slices, d2);
    let (g12, q, shared) = own_curvature(model, slices, d1, d2);
    let x12 = cross_curvature(slices, d1, d2, model.n());

    let s1 = w * &l1.r;
    let s2 = w * &l2.r;
    let s1_at2 = rows_at(&s1, l2.idx());
    let s2_at1 = rows_at(&s2, l1.idx());
    let w12 = sub(w, l1.idx(), l2.idx());
    let w21 = w12.transpose();

    // S'' = Z + Z^T with Z grouped by its right-hand factor.
    let mut z = &l1.g * &w12 * (-&l2.g.transpose());
    z += (&l1.h * &w12 - &l1.p_k * s1_at2.transpose()) * l2.pr.transpose();
    z += (&l1.h * &s2_at1 - &l1.p_k * (l1.r.transpose() * &s2 - &x12)) * l2.p_k.transpose();
    z += &l2.g * &w21 * l1.pr.transpose();
    z += &l2.g * &s1_at2 * l1.p_k.transpose();
    if !shared.is_empty() {
        let pq = model.p() * &q;
        z += (pq - &g12) * model.p().select_columns(shared.iter()).transpose();
    }
    &z + z.transpose()
}

/// Pieces shared by the quadratic (`d1 = d2 = d`) second-order terms.
struct Quadratic<'a> {
    l: Lifted<'a>,
    g2: DMatrix<f64>,
    q: DMatrix<f64>,
    x: DMatrix<f64>,
    /// `K^-1 R`.
    s: DMatrix<f64>,
    /// `P Q`.
    pq: DMatrix<f64>,
}

impl<'a> Quadratic<'a> {
    fn new(model: &TrainedModel, slices: &KernelGradSlices, dir: &'a Direction) -> Self {
        let l = Lifted::new(model, slices, dir);
        let (g2, q, _) = own_curvature(model, slices, dir, dir);
        let x = cross_curvature(slices, dir, dir, model.n());
        let s = slices.k_inv() * &l.r;
        let pq = model.p() * &q;
        Quadratic { l, g2, q, x, s, pq }
    }

    fn mean(&self, slices: &KernelGradSlices, coef: &DMatrix<f64>) -> DMatrix<f64> {
        let l = &self.l;
        let idx = l.idx();
        let c_k = rows_at(coef, idx);
        let rt_c = l.r.transpose() * coef;
        let omega = &self.s * &c_k + slices.k_inv().select_columns(idx.iter()) * &rt_c;
        let mut out = &self.g2 * &c_k - &self.pq * &c_k - &l.p_k * (self.q.transpose() * coef);
        out -= (&l.h * rows_at(&omega, idx)) * 2.0;
        out += (&l.p_k * (l.r.transpose() * &omega - &self.x * &c_k)) * 2.0;
        out
    }

    /// Left factors `(L_P, L_H, L_PR)` with `S''[d, d] = Z + Z^T`,
    /// `Z = L_P P_K^T + L_H H^T + L_PR (P R)^T`.
    fn cov_factors(&self, slices: &KernelGradSlices) -> [DMatrix<f64>; 3] {
        let l = &self.l;
        let idx = l.idx();
        let s_k = rows_at(&self.s, idx);
        let w_kk = sub(slices.k_inv(), idx, idx);
        let lp = &self.pq - &self.g2 + (&l.g + &l.h) * &s_k - &l.p_k * (l.r.transpose() * &self.s - &self.x);
        let lh = -(&l.g * &w_kk);
        let lpr = &l.h * &w_kk - &l.p_k * s_k.transpose();
        [lp, lh, lpr]
    }
}

/// `m''[d, d]` for each column of `coef`.
pub fn mean_second_quadratic(
    model: &TrainedModel,
    slices: &KernelGradSlices,
    dir: &Direction,
    coef: &DMatrix<f64>,
) -> DMatrix<f64> {
    if dir.is_empty() {
        return DMatrix::zeros(model.m(), coef.ncols());
    }
    Quadratic::new(model, slices, dir).mean(slices, coef)
}

/// `S''[d, d]`.
pub fn cov_second_quadratic(model: &TrainedModel, slices: &KernelGradSlices, dir: &Direction) -> DMatrix<f64> {
    if dir.is_empty() {
        return DMatrix::zeros(model.m(), model.m());
    }
    let quad = Quadratic::new(model, slices, dir);
    let [lp, lh, lpr] = quad.cov_factors(slices);
    let l = &quad.l;
    let z = lp * l.p_k.transpose() + lh * l.h.transpose() + lpr * l.pr.transpose();
    &z + z.transpose()
}

/// Taylor increments of both moments along `dir`: the mean increment and a
/// matrix `Z` such that the covariance increment is `Z + Z^T`. The second
/// order factors are built once and shared.
pub(crate) fn increments(
    model: &TrainedModel,
    slices: &KernelGradSlices,
    dir: &Direction,
    second_order: bool,
) -> (DVector<f64>, DMatrix<f64>) {
    let coef = DMatrix::from_column_slice(model.t(), 1, model.c().as_slice());
    if !second_order {
        let l = Lifted::new(model, slices, dir);
        let mean = mean_first_lifted(&l, &coef).column(0).into_owned();
        return (mean, -(&l.h * l.p_k.transpose()));
    }
    let quad = Quadratic::new(model, slices, dir);
    let mean = mean_first_lifted(&quad.l, &coef) + quad.mean(slices, &coef) * 0.5;
    (mean.column(0).into_owned(), half_cov_second(model, slices, &quad))
}

pub(crate) fn mean_increment(
    model: &TrainedModel,
    slices: &KernelGradSlices,
    dir: &Direction,
    second_order: bool,
) -> DVector<f64> {
    let coef = DMatrix::from_column_slice(model.t(), 1, model.c().as_slice());
    let inc = if second_order {
        let quad = Quadratic::new(model, slices, dir);
        mean_first_lifted(&quad.l, &coef) + quad.mean(slices, &coef) * 0.5
    } else {
        mean_first_lifted(&Lifted::new(model, slices, dir), &coef)
    };
    inc.column(0).into_owned()
}

/// `Z` with covariance increment `Z + Z^T`.
pub(crate) fn cov_increment_half(
    model: &TrainedModel,
    slices: &KernelGradSlices,
    dir: &Direction,
    second_order: bool,
) -> DMatrix<f64> {
    if !second_order {
        let l = Lifted::new(model, slices, dir);
        return -(&l.h * l.p_k.transpose());
    }
    half_cov_second(model, slices, &Quadratic::new(model, slices, dir))
}

/// `Z = A P_K^T + B H^T + C (P R)^T` for the order-two increment
/// `S' + S''/2`. When the direction covers most points the same product is
/// regrouped as `U P^T + B G^T`, whose inner dimension is `T + K` rather
/// than `3K`.
fn half_cov_second(model: &TrainedModel, slices: &KernelGradSlices, quad: &Quadratic) -> DMatrix<f64> {
    let l = &quad.l;
    let [lp, lh, lpr] = quad.cov_factors(slices);
    let (m, t, k) = (model.m(), model.t(), l.dir.len());
    let a = lp * 0.5 - &l.h;
    let b = lh * 0.5;
    let c = lpr * 0.5;
    if t < 2 * k {
        let mut u = (c - &b) * l.r.transpose();
        for (col, &i) in l.idx().iter().enumerate() {
            let mut dst = u.column_mut(i);
            dst += a.column(col);
        }
        return u * model.p().transpose() + b * l.g.transpose();
    }
    let mut left = DMatrix::zeros(m, 3 * k);
    let mut right = DMatrix::zeros(m, 3 * k);
    left.columns_mut(0, k).copy_from(&a);
    left.columns_mut(k, k).copy_from(&b);
    left.columns_mut(2 * k, k).copy_from(&c);
    right.columns_mut(0, k).copy_from(&l.p_k);
    right.columns_mut(k, k).copy_from(&l.h);
    right.columns_mut(2 * k, k).copy_from(&l.pr);
    left * right.transpose()
}
