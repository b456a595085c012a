#![allow(dead_code)]

use gpcorr::gp::{train, TestGrid, TrainedModel, TrainingSet};
use gpcorr::kernel::Hyperparams;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small random model with points spread over the unit cube.
pub fn random_model(seed: u64, t: usize, m: usize, n: usize) -> TrainedModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(t, n, |_, _| rng.gen_range(0.0..1.0));
    let xe = DMatrix::from_fn(m, n, |_, _| rng.gen_range(0.0..1.0));
    let y = DVector::from_fn(t, |_, _| rng.gen_range(-1.0..1.0));
    let hp = Hyperparams::new(
        rng.gen_range(0.7..1.5),
        rng.gen_range(0.3..0.6),
        rng.gen_range(0.1..0.4),
    )
    .unwrap();
    train(TrainingSet::new(x, y).unwrap(), TestGrid::new(xe).unwrap(), hp).unwrap()
}

pub fn random_deltas(seed: u64, rows: usize, n: usize, scale: f64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(rows, n, |_, _| rng.gen_range(-scale..scale))
}

pub fn assert_close(what: &str, got: &[f64], want: &[f64], rtol: f64, atol: f64) {
    let cmp = gpcorr::oracle::compare(got, want, rtol, atol);
    assert!(
        cmp.passed,
        "{what}: max abs err {:.3e}, worst ratio {:.3}",
        cmp.max_abs_err, cmp.worst_ratio
    );
}
