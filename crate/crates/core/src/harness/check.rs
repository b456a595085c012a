//! Analytic derivatives against finite differences over random instances.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::derivatives::{build_kernel_grad_slices, cov_hessian, cov_jacobian, mean_hessian, mean_jacobian};
use crate::error::Result;
use crate::gp::{train, TestGrid, TrainedModel, TrainingSet};
use crate::kernel::Hyperparams;
use crate::oracle::{
    compare, fd_cov_hessian, fd_cov_jacobian, fd_mean_hessian, fd_mean_jacobian, Comparison, FdConfig,
};

use super::experiment::trial_rng;

pub const KINDS: [&str; 4] = ["mean_jacobian", "cov_jacobian", "mean_hessian", "cov_hessian"];

#[derive(Debug, Clone, PartialEq)]
pub struct CheckConfig {
    pub instances: usize,
    pub seed: u64,
    /// Step and first-order tolerances.
    pub fd: FdConfig,
    pub hessian_rtol: f64,
    pub hessian_atol: f64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            instances: 60,
            seed: 1,
            fd: FdConfig::default(),
            hessian_rtol: 1e-5,
            hessian_atol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KindReport {
    pub name: &'static str,
    pub checked: usize,
    pub failures: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// Largest error relative to the allowed tolerance; passing means <= 1.
    pub worst_ratio: f64,
    /// Description of the first failing block, if any.
    pub first_failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub instances: usize,
    pub kinds: Vec<KindReport>,
}

impl GradientReport {
    pub fn passed(&self) -> bool {
        self.kinds.iter().all(|k| k.failures == 0)
    }

    pub fn failing_kinds(&self) -> Vec<&'static str> {
        self.kinds.iter().filter(|k| k.failures > 0).map(|k| k.name).collect()
    }
}

impl fmt::Display for GradientReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "gradient check over {} random instances", self.instances)?;
        for k in &self.kinds {
            writeln!(
                f,
                "{:<14} {} blocks={:<5} failures={:<4} max_abs_err={:.3e} max_rel_err={:.3e} worst_tol_ratio={:.3e}",
                k.name,
                if k.failures == 0 { "PASS" } else { "FAIL" },
                k.checked,
                k.failures,
                k.max_abs_err,
                k.max_rel_err,
                k.worst_ratio
            )?;
            if let Some(msg) = &k.first_failure {
                writeln!(f, "  first failure: {msg}")?;
            }
        }
        write!(f, "overall: {}", if self.passed() { "PASS" } else { "FAIL" })
    }
}

/// A small random, well-conditioned instance.
fn instance(seed: u64, k: usize) -> Result<TrainedModel> {
    let mut rng = trial_rng(seed, k as u64);
    let t = rng.gen_range(1..=6);
    let n = rng.gen_range(1..=3);
    let m = rng.gen_range(1..=5);
    let hp = Hyperparams::new(
        rng.gen_range(0.5..1.5),
        rng.gen_range(0.2..0.6),
        rng.gen_range(0.1..0.5),
    )?;
    let x = DMatrix::from_fn(t, n, |_, _| rng.gen_range(0.0..1.0));
    let xe = DMatrix::from_fn(m, n, |_, _| rng.gen_range(0.0..1.0));
    let y = DVector::from_fn(t, |_, _| rng.gen_range(-1.0..1.0));
    train(TrainingSet::new(x, y)?, TestGrid::new(xe)?, hp)
}

type Outcome = (usize, Comparison, String);

fn check_instance(cfg: &CheckConfig, k: usize, fault: Option<usize>) -> Result<Vec<Outcome>> {
    let model = instance(cfg.seed, k)?;
    let mut slices = build_kernel_grad_slices(&model)?;
    if let Some(i) = fault {
        if i < model.t() {
            slices.corrupt_sign(i);
        }
    }
    let fd = &cfg.fd;
    let (r1, a1) = (fd.rtol, fd.atol);
    let (r2, a2) = (cfg.hessian_rtol, cfg.hessian_atol);
    let mut out = Vec::new();
    let tag = |what: &str| {
        format!(
            "instance {k} (T={}, M={}, n={}) {what}",
            model.t(),
            model.m(),
            model.n()
        )
    };
    for i in 0..model.t() {
        let a = mean_jacobian(&model, &slices, i)?;
        let b = fd_mean_jacobian(&model, i, fd)?;
        out.push((
            0,
            compare(a.as_slice(), b.as_slice(), r1, a1),
            tag(&format!("point {i}")),
        ));
        let a = cov_jacobian(&model, &slices, i)?;
        let b = fd_cov_jacobian(&model, i, fd)?;
        out.push((1, compare(a.data(), b.data(), r1, a1), tag(&format!("point {i}"))));
        for j in 0..model.t() {
            let a = mean_hessian(&model, &slices, i, j)?;
            let b = fd_mean_hessian(&model, i, j, fd)?;
            out.push((
                2,
                compare(a.data(), b.data(), r2, a2),
                tag(&format!("block ({i}, {j})")),
            ));
            let a = cov_hessian(&model, &slices, i, j)?;
            let b = fd_cov_hessian(&model, i, j, fd)?;
            out.push((
                3,
                compare(a.data(), b.data(), r2, a2),
                tag(&format!("block ({i}, {j})")),
            ));
        }
    }
    Ok(out)
}

fn run(cfg: &CheckConfig, fault: Option<usize>) -> Result<GradientReport> {
    cfg.fd.validate()?;
    let per_instance = (0..cfg.instances)
        .into_par_iter()
        .map(|k| check_instance(cfg, k, fault))
        .collect::<Result<Vec<_>>>()?;
    let mut kinds: Vec<KindReport> = KINDS
        .iter()
        .map(|&name| KindReport {
            name,
            checked: 0,
            failures: 0,
            max_abs_err: 0.0,
            max_rel_err: 0.0,
            worst_ratio: 0.0,
            first_failure: None,
        })
        .collect();
    for (kind, cmp, what) in per_instance.into_iter().flatten() {
        let r = &mut kinds[kind];
        r.checked += 1;
        r.max_abs_err = r.max_abs_err.max(cmp.max_abs_err);
        r.max_rel_err = r.max_rel_err.max(cmp.max_rel_err);
        r.worst_ratio = r.worst_ratio.max(cmp.worst_ratio);
        if !cmp.passed {
            r.failures += 1;
            r.first_failure.get_or_insert(what);
        }
    }
    Ok(GradientReport {
        instances: cfg.instances,
        kinds,
    })
}

/// Compare all four analytic derivative kinds with their finite-difference
/// references on `cfg.instances` random instances. Deterministic for a seed.
pub fn check_gradients(cfg: &CheckConfig) -> Result<GradientReport> {
    run(cfg, None)
}

/// Same as [`check_gradients`] with the sign of the `K_eT` gradient slice of
/// point `point` flipped in every instance.
#[doc(hidden)]
pub fn check_gradients_with_fault(cfg: &CheckConfig, point: usize) -> Result<GradientReport> {
    run(cfg, Some(point))
}
