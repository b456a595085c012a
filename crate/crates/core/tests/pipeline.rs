use std::fs;
use std::process::Command;

use gpcorr::correction::{run_correction, Order, PerturbationSet, RunOptions};
use gpcorr::derivatives::StoragePolicy;
use gpcorr::harness::{run_experiment, trial_setup, ExperimentConfig, Field, PerturbationModel};

fn small_1d(trials: usize) -> ExperimentConfig {
    ExperimentConfig {
        trials,
        ..ExperimentConfig::one_d()
    }
}

#[test]
fn cached_operators_give_the_same_correction() {
    let dir = tempfile::tempdir().unwrap();
    let setup = trial_setup(&small_1d(1), 0).unwrap();
    let pert = PerturbationSet::from_rows(&setup.deltas).unwrap();
    for policy in [StoragePolicy::Dense, StoragePolicy::Lazy] {
        let opts = RunOptions {
            policy,
            cache: Some(dir.path().join(format!("{policy:?}.gprc"))),
            ..RunOptions::default()
        };
        let (first, t1) = run_correction(&setup.model, &pert, Order::Second, &opts).unwrap();
        let (second, t2) = run_correction(&setup.model, &pert, Order::Second, &opts).unwrap();
        assert!(!t1.cache_hit && t2.cache_hit);
        assert_eq!(first, second);
    }
}

#[test]
fn experiment_csvs_are_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [&a, &b] {
        let cfg = ExperimentConfig {
            out: Some(dir.path().to_path_buf()),
            ..small_1d(12)
        };
        run_experiment(&cfg).unwrap();
    }
    for name in ["points.csv", "trials.csv", "summary.csv"] {
        let x = fs::read(a.path().join(name)).unwrap();
        assert!(!x.is_empty(), "{name} is empty");
        assert_eq!(x, fs::read(b.path().join(name)).unwrap(), "{name} differs between runs");
    }
}

#[test]
fn swapped_field_with_swapped_bias_also_improves() {
    let cfg = ExperimentConfig {
        field: Field::CosSine2d,
        perturbation: PerturbationModel::ConstantOffset { offset: vec![0.0, 0.1] },
        ..ExperimentConfig::two_d()
    };
    let report = run_experiment(&cfg).unwrap();
    assert!(report.mean_norm_corrected() < report.mean_norm_corrupted());
}

#[test]
fn zero_location_noise_leaves_the_model_alone() {
    let cfg = ExperimentConfig {
        perturbation: PerturbationModel::IidGaussian { sigma: 0.0 },
        ..small_1d(4)
    };
    let report = run_experiment(&cfg).unwrap();
    for t in &report.trials {
        assert_eq!(t.perturbed_points, 0);
        assert_eq!(t.points.corrected, t.points.corrupted);
        assert!(!t.improvement_defined || t.improvement_pct == 0.0);
    }
}

fn gpcorr() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gpcorr"))
}

#[test]
fn cli_runs_and_reports_failures_by_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();

    let ok = gpcorr()
        .args(["experiment-1d", "--trials", "3", "--order", "1", "--out", out])
        .output()
        .unwrap();
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(dir.path().join("summary.csv").exists());

    let ok = gpcorr().args(["precompute-cache", "--out", out]).output().unwrap();
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(dir.path().join("operators.gprc").exists());

    let ok = gpcorr().args(["check-gradients", "--trials", "5"]).output().unwrap();
    assert!(ok.status.success());
    assert!(String::from_utf8_lossy(&ok.stdout).contains("overall: PASS"));

    let bad = gpcorr().args(["experiment-1d", "--order", "3"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "trials = 0\n").unwrap();
    let bad = gpcorr()
        .args(["experiment-1d", "--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}
