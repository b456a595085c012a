//! Wall-clock comparison of retraining against the online correction.

use std::time::Instant;

use crate::correction::{correct, CorrectionOptions, PerturbationSet};
use crate::derivatives::precompute;
use crate::error::Result;
use crate::gp::predict_at;

use super::config::ExperimentConfig;
use super::experiment::{build_model, scenario, trial_rng, DeltaSource};

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub scenario: String,
    pub t: usize,
    pub m: usize,
    pub n: usize,
    pub perturbed_points: usize,
    pub order: u8,
    /// Storage policy actually used.
    pub storage: String,
    pub repeats: usize,
    pub offline_s: f64,
    pub median_retrain_s: f64,
    pub median_correction_s: f64,
}

impl TimingRow {
    pub fn speedup(&self) -> f64 {
        self.median_retrain_s / self.median_correction_s
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Time `cfg.trials` repetitions of a full retrain at the true locations and
/// of the online correction (both moments) on one trained model, each after
/// one warm-up call. Operator construction is timed once and reported
/// separately. Runs sequentially.
pub fn run_timing(cfg: &ExperimentConfig) -> Result<TimingRow> {
    cfg.validate()?;
    let sc = scenario(cfg);
    let source = DeltaSource::new(cfg)?;
    let base_deltas = source.draw(&mut trial_rng(cfg.seed, 0));
    let (model, _) = build_model(cfg, &sc, &base_deltas)?;

    let start = Instant::now();
    let ops = precompute(&model, cfg.storage)?;
    let offline_s = start.elapsed().as_secs_f64();

    let opts = CorrectionOptions {
        psd_project: cfg.psd_project,
        diagnostics: false,
    };
    // repeat 0 reuses the operators' own draw and serves as warm-up
    let draws = (0..=cfg.trials)
        .map(|rep| {
            let deltas = if rep == 0 {
                base_deltas.clone()
            } else {
                source.draw(&mut trial_rng(cfg.seed, rep as u64))
            };
            let pert = PerturbationSet::from_rows(&deltas)?;
            Ok((model.training().locations() + &deltas, pert))
        })
        .collect::<Result<Vec<_>>>()?;

    // Each phase runs over all repeats on its own so neither pays for the
    // other's cache footprint.
    let mut retrain = Vec::with_capacity(cfg.trials);
    for (rep, (target, _)) in draws.iter().enumerate() {
        let start = Instant::now();
        let out = predict_at(&model, target)?;
        let elapsed = start.elapsed().as_secs_f64();
        std::hint::black_box(&out);
        if rep > 0 {
            retrain.push(elapsed);
        }
    }
    let mut online = Vec::with_capacity(cfg.trials);
    for (rep, (_, pert)) in draws.iter().enumerate() {
        let start = Instant::now();
        let post = correct(&ops, &model, pert, cfg.order, &opts)?;
        let elapsed = start.elapsed().as_secs_f64();
        std::hint::black_box(&post);
        if rep > 0 {
            online.push(elapsed);
        }
    }
    let perturbed = draws.last().map_or(0, |(_, p)| p.len());
    Ok(TimingRow {
        scenario: format!("{:?}", cfg.kind),
        t: model.t(),
        m: model.m(),
        n: model.n(),
        perturbed_points: perturbed,
        order: cfg.order.as_u8(),
        storage: format!("{:?}", ops.policy()),
        repeats: cfg.trials,
        offline_s,
        median_retrain_s: median(retrain),
        median_correction_s: median(online),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn single_repeat_is_well_formed() {
        let mut cfg = ExperimentConfig::one_d();
        cfg.trials = 1;
        let row = run_timing(&cfg).unwrap();
        assert_eq!(row.repeats, 1);
        assert_eq!((row.t, row.m, row.n), (11, 100, 1));
        assert!(row.median_retrain_s > 0.0 && row.median_correction_s > 0.0);
    }
}
