//! Survey experiments: train on wrong locations, correct, and compare against
//! the truth and against retraining at the right locations.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::correction::{correct, CorrectionOptions, PerturbationSet};
use crate::derivatives::{precompute, CorrectionOperators};
use crate::error::{Error, Result};
use crate::gp::{predict_at, train, TestGrid, TrainedModel, TrainingSet};

use super::config::{ExperimentConfig, GridRole, Kind, PerturbationModel};
use super::fields::unit_grid;
use super::output;

/// Stream reserved for drawing random scenario geometry.
const GEOMETRY_STREAM: u64 = u64::MAX;

/// Fixed locations of an experiment: the survey grid and the test points.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub grid: DMatrix<f64>,
    pub test: DMatrix<f64>,
}

pub fn scenario(cfg: &ExperimentConfig) -> Scenario {
    match cfg.kind {
        Kind::OneD | Kind::TwoD => Scenario {
            grid: unit_grid(cfg.train_per_axis, cfg.n),
            test: unit_grid(cfg.test_per_axis, cfg.n),
        },
        Kind::Custom => {
            let mut rng = trial_rng(cfg.seed, GEOMETRY_STREAM);
            let grid = DMatrix::from_fn(cfg.t, cfg.n, |_, _| rng.gen_range(0.0..1.0));
            let test = DMatrix::from_fn(cfg.m, cfg.n, |_, _| rng.gen_range(0.0..1.0));
            Scenario { grid, test }
        }
    }
}

pub(crate) fn trial_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Read a `T x n` error file: comma-separated rows, `#` comments allowed.
pub fn read_deltas(path: &Path, t: usize, n: usize) -> Result<DMatrix<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    let mut values = Vec::with_capacity(t * n);
    let mut rows = 0;
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        if rec.len() != n {
            return Err(Error::Config(format!(
                "{}: row {} has {} values, expected {n}",
                path.display(),
                rows + 1,
                rec.len()
            )));
        }
        for field in rec.iter() {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Config(format!("{}: '{field}' is not a number", path.display())))?;
            values.push(v);
        }
        rows += 1;
    }
    if rows != t {
        return Err(Error::Config(format!("{}: {rows} rows, expected {t}", path.display())));
    }
    Ok(DMatrix::from_row_slice(t, n, &values))
}

/// Draws the per-trial location errors.
pub(crate) struct DeltaSource {
    model: PerturbationModel,
    file: Option<DMatrix<f64>>,
    corrected_points: Option<usize>,
    t: usize,
    n: usize,
}

impl DeltaSource {
    pub(crate) fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let file = match &cfg.perturbation {
            PerturbationModel::File { path } => Some(read_deltas(path, cfg.t, cfg.n)?),
            _ => None,
        };
        Ok(DeltaSource {
            model: cfg.perturbation.clone(),
            file,
            corrected_points: cfg.corrected_points,
            t: cfg.t,
            n: cfg.n,
        })
    }

    pub(crate) fn draw(&self, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let (t, n) = (self.t, self.n);
        let mut d = match (&self.model, &self.file) {
            (PerturbationModel::IidGaussian { sigma }, _) if *sigma > 0.0 => {
                let dist = Normal::new(0.0, *sigma).expect("validated sigma");
                DMatrix::from_fn(t, n, |_, _| dist.sample(rng))
            }
            (PerturbationModel::IidGaussian { .. }, _) => DMatrix::zeros(t, n),
            (PerturbationModel::ConstantOffset { offset }, _) => DMatrix::from_fn(t, n, |_, c| offset[c]),
            (PerturbationModel::File { .. }, Some(f)) => f.clone(),
            (PerturbationModel::File { .. }, None) => unreachable!("file deltas loaded at construction"),
        };
        if let Some(k) = self.corrected_points {
            let keep = sample(rng, t, k);
            let mut mask = vec![false; t];
            keep.iter().for_each(|i| mask[i] = true);
            for (i, keep) in mask.into_iter().enumerate() {
                if !keep {
                    d.row_mut(i).fill(0.0);
                }
            }
        }
        d
    }
}

/// Locations the model is given and the locations the measurements really
/// come from.
pub(crate) fn locations(
    cfg: &ExperimentConfig,
    grid: &DMatrix<f64>,
    deltas: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    match cfg.grid {
        GridRole::Planned => (grid.clone(), grid + deltas),
        GridRole::True => (grid - deltas, grid.clone()),
    }
}

pub(crate) fn build_model(
    cfg: &ExperimentConfig,
    sc: &Scenario,
    deltas: &DMatrix<f64>,
) -> Result<(TrainedModel, DMatrix<f64>)> {
    let (planned, truth) = locations(cfg, &sc.grid, deltas);
    let y = cfg.field.sample(&truth);
    let model = train(
        TrainingSet::new(planned, y)?,
        TestGrid::new(sc.test.clone())?,
        cfg.hyperparams,
    )?;
    Ok((model, truth))
}

/// Everything one trial starts from: the model trained at the planned
/// locations, the known errors and the true locations.
#[derive(Debug, Clone)]
pub struct TrialSetup {
    pub model: TrainedModel,
    /// `T x n`; planned plus errors gives the true locations.
    pub deltas: DMatrix<f64>,
    pub truth: DMatrix<f64>,
}

/// The starting point of trial `trial`, drawn from the same stream that
/// [`run_experiment`] uses.
pub fn trial_setup(cfg: &ExperimentConfig, trial: usize) -> Result<TrialSetup> {
    cfg.validate()?;
    let sc = scenario(cfg);
    let deltas = DeltaSource::new(cfg)?.draw(&mut trial_rng(cfg.seed, trial as u64));
    let (model, truth) = build_model(cfg, &sc, &deltas)?;
    Ok(TrialSetup { model, deltas, truth })
}

/// Per-test-point values of one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct PointRows {
    pub y_true: DVector<f64>,
    pub corrupted: DVector<f64>,
    pub corrected: DVector<f64>,
    pub ideal: DVector<f64>,
    pub std_corrupted: DVector<f64>,
    pub std_corrected: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub trial: usize,
    pub perturbed_points: usize,
    pub delta_max: f64,
    pub norm_corrupted: f64,
    pub norm_corrected: f64,
    pub norm_ideal: f64,
    /// `100 (corrupted - corrected) / corrupted`; 0 when the corrupted norm is 0.
    pub improvement_pct: f64,
    /// False when the corrupted norm was 0 and the percentage is undefined.
    pub improvement_defined: bool,
    pub min_eigenvalue: f64,
    pub points: PointRows,
}

pub fn improvement_pct(norm_corrupted: f64, norm_corrected: f64) -> (f64, bool) {
    if norm_corrupted == 0.0 {
        (0.0, false)
    } else {
        (100.0 * (norm_corrupted - norm_corrected) / norm_corrupted, true)
    }
}

fn std_dev(cov: &DMatrix<f64>) -> DVector<f64> {
    cov.diagonal().map(|v| v.max(0.0).sqrt())
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub test_locations: DMatrix<f64>,
    pub trials: Vec<TrialResult>,
}

impl ExperimentReport {
    pub fn mean_improvement_pct(&self) -> f64 {
        self.trials.iter().map(|t| t.improvement_pct).sum::<f64>() / self.trials.len() as f64
    }

    /// Trials where the corrected mean is strictly closer to the truth.
    pub fn trials_improved(&self) -> usize {
        self.trials
            .iter()
            .filter(|t| t.norm_corrected < t.norm_corrupted)
            .count()
    }

    pub fn mean_norm_corrupted(&self) -> f64 {
        self.trials.iter().map(|t| t.norm_corrupted).sum::<f64>() / self.trials.len() as f64
    }

    pub fn mean_norm_corrected(&self) -> f64 {
        self.trials.iter().map(|t| t.norm_corrected).sum::<f64>() / self.trials.len() as f64
    }
}

fn run_trial(
    cfg: &ExperimentConfig,
    sc: &Scenario,
    source: &DeltaSource,
    template: &(TrainedModel, CorrectionOperators),
    trial: usize,
) -> Result<TrialResult> {
    let mut rng = trial_rng(cfg.seed, trial as u64);
    let deltas = source.draw(&mut rng);
    let (model, truth) = build_model(cfg, sc, &deltas)?;
    let rebuilt;
    let ops = if model.training().locations() == template.0.training().locations() {
        &template.1
    } else {
        rebuilt = precompute(&model, cfg.storage)?;
        &rebuilt
    };
    let pert = PerturbationSet::from_rows(&deltas)?;
    let opts = CorrectionOptions {
        psd_project: cfg.psd_project,
        diagnostics: true,
    };
    let post = correct(ops, &model, &pert, cfg.order, &opts)?;
    let (ideal, _) = predict_at(&model, &truth)?;

    let y_true = cfg.field.sample(&sc.test);
    let norm_corrupted = (&y_true - model.mean_hat()).norm();
    let norm_corrected = (&y_true - &post.mean).norm();
    let norm_ideal = (&y_true - &ideal).norm();
    let (improvement_pct, improvement_defined) = improvement_pct(norm_corrupted, norm_corrected);
    Ok(TrialResult {
        trial,
        perturbed_points: pert.len(),
        delta_max: pert.delta_max(),
        norm_corrupted,
        norm_corrected,
        norm_ideal,
        improvement_pct,
        improvement_defined,
        min_eigenvalue: post.min_eigenvalue.unwrap_or(f64::NAN),
        points: PointRows {
            corrupted: model.mean_hat().clone(),
            std_corrupted: std_dev(model.cov_hat()),
            corrected: post.mean,
            std_corrected: std_dev(&post.cov),
            ideal,
            y_true,
        },
    })
}

/// Run every trial of `cfg` (in parallel, each on its own random stream) and
/// write the CSV outputs when `cfg.out` is set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let sc = scenario(cfg);
    let source = DeltaSource::new(cfg)?;
    // Operators do not depend on the measurements, so one bundle serves every
    // trial that shares the trial-0 training locations.
    let first = source.draw(&mut trial_rng(cfg.seed, 0));
    let (model0, _) = build_model(cfg, &sc, &first)?;
    let ops0 = precompute(&model0, cfg.storage)?;
    let template = (model0, ops0);

    let trials = (0..cfg.trials)
        .into_par_iter()
        .map(|k| run_trial(cfg, &sc, &source, &template, k))
        .collect::<Result<Vec<_>>>()?;
    let report = ExperimentReport {
        config: cfg.clone(),
        test_locations: sc.test,
        trials,
    };
    if let Some(dir) = &cfg.out {
        output::write_experiment(&report, dir)?;
    }
    Ok(report)
}

fn require_kind(cfg: &ExperimentConfig, kind: Kind) -> Result<()> {
    if cfg.kind == kind {
        Ok(())
    } else {
        Err(Error::Config(format!("expected a {kind:?} config, got {:?}", cfg.kind)))
    }
}

/// The line survey: `2 + sin(2 pi x)` sampled at eleven points whose true
/// locations carry Gaussian noise.
pub fn run_experiment_1d(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    require_kind(cfg, Kind::OneD)?;
    run_experiment(cfg)
}

/// The grid survey with a constant location bias.
pub fn run_experiment_2d(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    require_kind(cfg, Kind::TwoD)?;
    run_experiment(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn improvement_formula() {
        assert_eq!(improvement_pct(2.0, 1.0), (50.0, true));
        assert_eq!(improvement_pct(0.0, 0.0), (0.0, false));
        assert_eq!(improvement_pct(1.0, 1.0), (0.0, true));
    }

    #[test]
    fn zero_noise_leaves_prediction_unchanged() {
        let mut cfg = ExperimentConfig::one_d();
        cfg.trials = 2;
        cfg.perturbation = PerturbationModel::IidGaussian { sigma: 0.0 };
        let r = run_experiment_1d(&cfg).unwrap();
        for t in &r.trials {
            assert_eq!(t.perturbed_points, 0);
            assert_eq!(t.points.corrupted, t.points.corrected);
            assert_eq!(t.points.corrupted, t.points.ideal);
            assert_eq!(t.improvement_pct, 0.0);
        }
    }

    #[test]
    fn corrected_points_limits_perturbation() {
        let mut cfg = ExperimentConfig::custom();
        cfg.t = 30;
        cfg.m = 10;
        cfg.trials = 3;
        cfg.corrected_points = Some(2);
        let r = run_experiment(&cfg).unwrap();
        assert!(r.trials.iter().all(|t| t.perturbed_points == 2));
    }

    #[test]
    fn wrong_kind_rejected() {
        assert!(run_experiment_2d(&ExperimentConfig::one_d()).is_err());
    }
}
