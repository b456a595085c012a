//! Taylor remainder bounds and the smallest order meeting a requested
//! accuracy.
//!
//! With every training point moved by at most `delta_max`, the stacked move
//! has norm at most `delta_max * sqrt(T)`, and an order-`N` expansion of the
//! posterior mean is off by at most `M_{N+1} beta^{N+1} / (N+1)!`, where
//! `M_{N+1}` bounds the `(N+1)`-th derivative. Nothing here certifies
//! `M_{N+1}`; [`estimate_gradient_norm`] samples it.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gp::{predict_mean_at, TrainedModel};

/// Highest order [`min_order`] considers.
pub const DEFAULT_MAX_ORDER: usize = 20;

pub fn stacked_delta_bound(delta_max: f64, t: usize) -> Result<f64> {
    if !(delta_max >= 0.0) || !delta_max.is_finite() || t == 0 {
        return Err(Error::InvalidInput(format!(
            "stacked bound needs delta_max >= 0 and T >= 1 (got {delta_max}, {t})"
        )));
    }
    Ok(delta_max * (t as f64).sqrt())
}

fn ln_factorial(k: usize) -> f64 {
    (2..=k).map(|v| (v as f64).ln()).sum()
}

/// `m_next * beta^(N+1) / (N+1)!`, evaluated in log space.
pub fn remainder_bound(order: usize, beta_total: f64, m_next: f64) -> Result<f64> {
    if !(beta_total >= 0.0) || !(m_next >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "remainder bound needs beta >= 0 and M >= 0 (got {beta_total}, {m_next})"
        )));
    }
    if beta_total == 0.0 || m_next == 0.0 {
        return Ok(0.0);
    }
    let k = order + 1;
    Ok((m_next.ln() + k as f64 * beta_total.ln() - ln_factorial(k)).exp())
}

/// Smallest `N <= DEFAULT_MAX_ORDER` whose remainder bound is at most
/// `epsilon`. `m_bounds[k]` bounds the `k`-th derivative.
pub fn min_order(epsilon: f64, beta_total: f64, m_bounds: &[f64]) -> Result<usize> {
    min_order_capped(epsilon, beta_total, m_bounds, DEFAULT_MAX_ORDER)
}

pub fn min_order_capped(epsilon: f64, beta_total: f64, m_bounds: &[f64], max_order: usize) -> Result<usize> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidInput(format!("epsilon must be positive (got {epsilon})")));
    }
    if m_bounds.len() < max_order + 2 {
        return Err(Error::InvalidInput(format!(
            "need derivative bounds up to order {} (got {})",
            max_order + 1,
            m_bounds.len().saturating_sub(1)
        )));
    }
    let mut best = f64::INFINITY;
    for n in 0..=max_order {
        let b = remainder_bound(n, beta_total, m_bounds[n + 1])?;
        if b <= epsilon {
            return Ok(n);
        }
        best = best.min(b);
    }
    Err(Error::BoundUnsatisfiable {
        max_order,
        best_bound: best,
    })
}

/// Inputs of a remainder-bound query for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct RemainderBudget {
    pub epsilon: f64,
    pub delta_max: f64,
    pub t: usize,
    pub beta_total: f64,
    pub m_bounds: Vec<f64>,
}

impl RemainderBudget {
    pub fn new(epsilon: f64, delta_max: f64, t: usize, m_bounds: Vec<f64>) -> Result<Self> {
        if m_bounds.iter().any(|&m| !(m >= 0.0)) {
            return Err(Error::InvalidInput("derivative bounds must be non-negative".into()));
        }
        Ok(RemainderBudget {
            epsilon,
            delta_max,
            t,
            beta_total: stacked_delta_bound(delta_max, t)?,
            m_bounds,
        })
    }

    pub fn min_order(&self) -> Result<usize> {
        let cap = self.m_bounds.len().saturating_sub(2).min(DEFAULT_MAX_ORDER);
        min_order_capped(self.epsilon, self.beta_total, &self.m_bounds, cap)
    }

    /// Remainder bound at `order`, if `m_bounds` reaches `order + 1`.
    pub fn bound(&self, order: usize) -> Result<f64> {
        let m = self
            .m_bounds
            .get(order + 1)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("no derivative bound for order {}", order + 1)))?;
        remainder_bound(order, self.beta_total, m)
    }
}

fn fd_step(model: &TrainedModel, order: u8) -> f64 {
    let beta = model.hyperparams().beta;
    match order {
        1 => 1e-4 * beta,
        2 => 1e-3 * beta,
        _ => 1e-2 * beta,
    }
}

/// Finite-difference `order`-th derivative (1 to 3) of the posterior mean
/// along `dir`, with training locations at `at` (both `T x n`).
pub fn fd_directional_derivative(
    model: &TrainedModel,
    at: &DMatrix<f64>,
    dir: &DMatrix<f64>,
    order: u8,
) -> Result<DVector<f64>> {
    let h = fd_step(model, order);
    let f = |s: f64| predict_mean_at(model, &(at + dir * s));
    Ok(match order {
        1 => (f(h)? - f(-h)?) / (2.0 * h),
        2 => (f(h)? - f(0.0)? * 2.0 + f(-h)?) / (h * h),
        3 => (f(2.0 * h)? - f(h)? * 2.0 + f(-h)? * 2.0 - f(-2.0 * h)?) / (2.0 * h * h * h),
        _ => {
            return Err(Error::InvalidInput(format!(
                "directional derivative order must be 1..=3, got {order}"
            )))
        }
    })
}

/// Sampled estimate of the largest `order`-th directional derivative of the
/// posterior mean (as a function of all stacked training locations) over the
/// box `X_hat +/- radius`.
///
/// Probe 0 sits at the training locations; the others are uniform in the
/// box. Each probe uses its own random unit direction and its own random
/// stream derived from `seed`. The result is a lower estimate of the true
/// supremum, not a certified bound.
pub fn estimate_gradient_norm(model: &TrainedModel, order: u8, probes: usize, seed: u64, radius: f64) -> Result<f64> {
    if !(1..=3).contains(&order) || probes == 0 || !(radius >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "gradient-norm estimate needs order in 1..=3, probes >= 1, radius >= 0 (got {order}, {probes}, {radius})"
        )));
    }
    let base = model.training().locations();
    let (t, n) = base.shape();
    let norms = (0..probes)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let mut kappa = base.clone();
            if k > 0 {
                let u = Uniform::new_inclusive(-radius, radius);
                kappa.iter_mut().for_each(|v| *v += u.sample(&mut rng));
            }
            let mut dir = DMatrix::from_fn(t, n, |_, _| StandardNormal.sample(&mut rng));
            let norm = dir.norm();
            dir /= norm;
            Ok(fd_directional_derivative(model, &kappa, &dir, order)?.norm())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(norms.into_iter().fold(0.0, f64::max))
}
