mod common;

use common::{random_deltas, random_model};
use gpcorr::bounds::min_order;
use gpcorr::correction::{correct, correct_mean, CorrectionOptions, Order, PerturbationSet};
use gpcorr::derivatives::{precompute, StoragePolicy};
use gpcorr::gp::{train, TestGrid, TrainingSet};
use gpcorr::kernel::{kernel_eval, Hyperparams};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    let scale = a.iter().chain(b).fold(1.0, |m: f64, v| m.max(v.abs()));
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * scale)
}

fn policy(dense: bool) -> StoragePolicy {
    if dense {
        StoragePolicy::Dense
    } else {
        StoragePolicy::Lazy
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn kernel_is_symmetric(
        a in prop::collection::vec(-2.0..2.0f64, 3),
        b in prop::collection::vec(-2.0..2.0f64, 3),
        beta in 0.05..2.0f64,
    ) {
        let hp = Hyperparams::new(1.3, beta, 0.1).unwrap();
        prop_assert_eq!(kernel_eval(&a, &b, &hp).unwrap(), kernel_eval(&b, &a, &hp).unwrap());
    }

    #[test]
    fn corrected_covariance_is_exactly_symmetric(seed in 0..1000u64, dense: bool, second: bool) {
        let model = random_model(seed, 5, 4, 2);
        let ops = precompute(&model, policy(dense)).unwrap();
        let pert = PerturbationSet::from_rows(&random_deltas(seed + 1, 5, 2, 0.05)).unwrap();
        let order = if second { Order::Second } else { Order::First };
        let post = correct(&ops, &model, &pert, order, &CorrectionOptions::default()).unwrap();
        prop_assert_eq!(&post.cov, &post.cov.transpose());
    }

    #[test]
    fn mean_correction_is_linear_in_measurements(seed in 0..1000u64, a in -3.0..3.0f64, b in -3.0..3.0f64, dense: bool) {
        let m1 = random_model(seed, 5, 4, 2);
        let y2 = DVector::from_fn(5, |r, _| ((r + seed as usize) as f64).sin());
        let m2 = m1.with_measurements(y2.clone()).unwrap();
        let mix = m1.with_measurements(m1.training().measurements() * a + &y2 * b).unwrap();
        let pert = PerturbationSet::from_rows(&random_deltas(seed + 7, 5, 2, 0.05)).unwrap();
        let inc = |m: &gpcorr::gp::TrainedModel| {
            let ops = precompute(m, policy(dense)).unwrap();
            correct_mean(&ops, m, &pert, Order::Second).unwrap() - m.mean_hat()
        };
        let want = inc(&m1) * a + inc(&m2) * b;
        prop_assert!(close(inc(&mix).as_slice(), want.as_slice(), 1e-10));
    }

    #[test]
    fn first_order_terms_add(seed in 0..1000u64, dense: bool) {
        let model = random_model(seed, 6, 4, 2);
        let ops = precompute(&model, policy(dense)).unwrap();
        let d1 = random_deltas(seed + 3, 6, 2, 0.05);
        let d2 = random_deltas(seed + 4, 6, 2, 0.05);
        let inc = |d: &DMatrix<f64>| {
            let pert = PerturbationSet::from_rows(d).unwrap();
            let post = correct(&ops, &model, &pert, Order::First, &CorrectionOptions::default()).unwrap();
            (post.mean - model.mean_hat(), post.cov - model.cov_hat())
        };
        let (sm, sc) = inc(&(&d1 + &d2));
        let ((m1, c1), (m2, c2)) = (inc(&d1), inc(&d2));
        prop_assert!(close(sm.as_slice(), (m1 + m2).as_slice(), 1e-10));
        prop_assert!(close(sc.as_slice(), (c1 + c2).as_slice(), 1e-10));
    }

    #[test]
    fn relabelling_training_points_changes_nothing(seed in 0..1000u64, shift in 1..5usize, second: bool) {
        let model = random_model(seed, 5, 4, 2);
        let deltas = random_deltas(seed + 9, 5, 2, 0.05);
        let perm: Vec<usize> = (0..5).map(|r| (r + shift) % 5).collect();
        let x = model.training().locations();
        let y = model.training().measurements();
        let px = DMatrix::from_fn(5, 2, |r, c| x[(perm[r], c)]);
        let py = DVector::from_fn(5, |r, _| y[perm[r]]);
        let pd = DMatrix::from_fn(5, 2, |r, c| deltas[(perm[r], c)]);
        let permuted = train(
            TrainingSet::new(px, py).unwrap(),
            TestGrid::new(model.test_grid().locations().clone()).unwrap(),
            *model.hyperparams(),
        )
        .unwrap();
        let order = if second { Order::Second } else { Order::First };
        let run = |m: &gpcorr::gp::TrainedModel, d: &DMatrix<f64>| {
            let ops = precompute(m, StoragePolicy::Lazy).unwrap();
            correct(&ops, m, &PerturbationSet::from_rows(d).unwrap(), order, &CorrectionOptions::default()).unwrap()
        };
        let (a, b) = (run(&model, &deltas), run(&permuted, &pd));
        prop_assert!(close(a.mean.as_slice(), b.mean.as_slice(), 1e-10));
        prop_assert!(close(a.cov.as_slice(), b.cov.as_slice(), 1e-10));
    }

    #[test]
    fn tighter_accuracy_never_lowers_the_order(e1 in 1e-6..10.0f64, e2 in 1e-6..10.0f64, beta in 0.1..3.0f64) {
        let ones = vec![1.0; 22];
        let (lo, hi) = if e1 < e2 { (e1, e2) } else { (e2, e1) };
        prop_assert!(min_order(lo, beta, &ones).unwrap() >= min_order(hi, beta, &ones).unwrap());
    }
}
