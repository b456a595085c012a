//! GP regression with a fixed test grid: baseline posterior moments and the
//! full-retrain reference `predict_at`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{check_dim, Error, Result};
use crate::kernel::{self, Hyperparams};

/// Relative jitter added to the Gram diagonal when the first factorization fails.
pub const JITTER_FACTOR: f64 = 1e-10;

/// Planned measurement locations (one row per point) and the measurements
/// associated with them.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    locations: DMatrix<f64>,
    measurements: DVector<f64>,
}

impl TrainingSet {
    pub fn new(locations: DMatrix<f64>, measurements: DVector<f64>) -> Result<Self> {
        if locations.nrows() == 0 {
            return Err(Error::InvalidInput("training set needs at least one point".into()));
        }
        if locations.ncols() == 0 {
            return Err(Error::InvalidInput("locations need dimension n >= 1".into()));
        }
        check_dim("training measurements", locations.nrows(), measurements.len())?;
        if locations.iter().chain(measurements.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("training data contains non-finite values".into()));
        }
        Ok(TrainingSet {
            locations,
            measurements,
        })
    }

    pub fn locations(&self) -> &DMatrix<f64> {
        &self.locations
    }

    pub fn measurements(&self) -> &DVector<f64> {
        &self.measurements
    }

    pub fn len(&self) -> usize {
        self.locations.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.locations.ncols()
    }
}

/// Fixed test locations `X_e`, one row per point.
#[derive(Debug, Clone, PartialEq)]
pub struct TestGrid {
    locations: DMatrix<f64>,
}

impl TestGrid {
    pub fn new(locations: DMatrix<f64>) -> Result<Self> {
        if locations.nrows() == 0 || locations.ncols() == 0 {
            return Err(Error::InvalidInput(
                "test grid needs M >= 1 points of dimension >= 1".into(),
            ));
        }
        if locations.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("test grid contains non-finite values".into()));
        }
        Ok(TestGrid { locations })
    }

    pub fn locations(&self) -> &DMatrix<f64> {
        &self.locations
    }

    pub fn len(&self) -> usize {
        self.locations.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.locations.ncols()
    }
}

/// A GP conditioned on a training set, with everything the correction needs
/// cached. Immutable once built.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    hp: Hyperparams,
    train: TrainingSet,
    test: TestGrid,
    k_ee: DMatrix<f64>,
    k_et: DMatrix<f64>,
    factor: Cholesky<f64, Dyn>,
    jitter: f64,
    c: DVector<f64>,
    p: DMatrix<f64>,
    mean_hat: DVector<f64>,
    cov_hat: DMatrix<f64>,
}

struct Posterior {
    k_et: DMatrix<f64>,
    factor: Cholesky<f64, Dyn>,
    jitter: f64,
    c: DVector<f64>,
    p: DMatrix<f64>,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

fn check_duplicates(z: &DMatrix<f64>) -> Result<()> {
    let rows = kernel::rows(z);
    for i in 0..rows.len() {
        for j in 0..i {
            if rows[i] == rows[j] {
                return Err(Error::Model(format!(
                    "training points {j} and {i} coincide and sigma_y = 0, so the Gram matrix is singular"
                )));
            }
        }
    }
    Ok(())
}

fn factorize(z: &DMatrix<f64>, hp: &Hyperparams) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if hp.sigma_y == 0.0 {
        check_duplicates(z)?;
    }
    let t = z.nrows();
    let mut k = kernel::gram(z, hp);
    for i in 0..t {
        k[(i, i)] += hp.noise_variance();
    }
    if let Some(f) = Cholesky::new(k.clone()) {
        return Ok((f, 0.0));
    }
    let jitter = JITTER_FACTOR * hp.signal_variance();
    for i in 0..t {
        k[(i, i)] += jitter;
    }
    Cholesky::new(k).map(|f| (f, jitter)).ok_or_else(|| {
        Error::Model(format!(
            "training Gram matrix (T = {t}) is not positive definite even with jitter {jitter:e}"
        ))
    })
}

fn posterior(
    hp: &Hyperparams,
    z: &DMatrix<f64>,
    y: &DVector<f64>,
    xe: &DMatrix<f64>,
    k_ee: &DMatrix<f64>,
) -> Result<Posterior> {
    let (factor, jitter) = factorize(z, hp)?;
    let k_et = kernel::cross_gram(xe, z, hp);
    let c = factor.solve(y);
    let p = factor.solve(&k_et.transpose()).transpose();
    let mean = &k_et * &c;
    let mut cov = k_ee - &p * k_et.transpose();
    symmetrize(&mut cov);
    Ok(Posterior {
        k_et,
        factor,
        jitter,
        c,
        p,
        mean,
        cov,
    })
}

/// In-place `(S + S^T) / 2`.
pub(crate) fn symmetrize(s: &mut DMatrix<f64>) {
    let m = s.nrows();
    for i in 0..m {
        for j in 0..i {
            let v = 0.5 * (s[(i, j)] + s[(j, i)]);
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
}

/// Condition the GP on `train` and evaluate the baseline moments at `test`.
pub fn train(train: TrainingSet, test: TestGrid, hp: Hyperparams) -> Result<TrainedModel> {
    hp.validate()?;
    check_dim("test grid dimension", train.dim(), test.dim())?;
    let k_ee = kernel::gram(test.locations(), &hp);
    let post = posterior(&hp, train.locations(), train.measurements(), test.locations(), &k_ee)?;
    Ok(TrainedModel {
        hp,
        train,
        test,
        k_ee,
        k_et: post.k_et,
        factor: post.factor,
        jitter: post.jitter,
        c: post.c,
        p: post.p,
        mean_hat: post.mean,
        cov_hat: post.cov,
    })
}

/// Mean and covariance at the model's test grid for training locations `z`
/// and the model's measurements, recomputed from scratch (the retraining
/// reference).
pub fn predict_at(model: &TrainedModel, z: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_dim("retrain locations (rows)", model.t(), z.nrows())?;
    check_dim("retrain locations (cols)", model.n(), z.ncols())?;
    let xe = model.test.locations();
    let k_ee = kernel::gram(xe, &model.hp);
    let post = posterior(&model.hp, z, model.train.measurements(), xe, &k_ee)?;
    Ok((post.mean, post.cov))
}

/// Posterior mean only, for training locations `z`; skips the covariance.
pub fn predict_mean_at(model: &TrainedModel, z: &DMatrix<f64>) -> Result<DVector<f64>> {
    check_dim("retrain locations (rows)", model.t(), z.nrows())?;
    check_dim("retrain locations (cols)", model.n(), z.ncols())?;
    let (factor, _) = factorize(z, &model.hp)?;
    let k_et = kernel::cross_gram(model.test.locations(), z, &model.hp);
    Ok(k_et * factor.solve(model.train.measurements()))
}

impl TrainedModel {
    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hp
    }

    pub fn training(&self) -> &TrainingSet {
        &self.train
    }

    pub fn test_grid(&self) -> &TestGrid {
        &self.test
    }

    /// Number of training points.
    pub fn t(&self) -> usize {
        self.train.len()
    }

    /// Number of test points.
    pub fn m(&self) -> usize {
        self.test.len()
    }

    /// Location dimension.
    pub fn n(&self) -> usize {
        self.train.dim()
    }

    pub fn k_ee(&self) -> &DMatrix<f64> {
        &self.k_ee
    }

    pub fn k_et(&self) -> &DMatrix<f64> {
        &self.k_et
    }

    pub fn factor(&self) -> &Cholesky<f64, Dyn> {
        &self.factor
    }

    /// Jitter that had to be added to the Gram diagonal (0.0 when none).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// `K^{-1} Y`.
    pub fn c(&self) -> &DVector<f64> {
        &self.c
    }

    /// `K_eT K^{-1}`.
    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn mean_hat(&self) -> &DVector<f64> {
        &self.mean_hat
    }

    pub fn cov_hat(&self) -> &DMatrix<f64> {
        &self.cov_hat
    }

    /// Same locations, test grid and hyperparameters with new measurements.
    pub fn with_measurements(&self, y: DVector<f64>) -> Result<TrainedModel> {
        let set = TrainingSet::new(self.train.locations().clone(), y)?;
        train(set, self.test.clone(), self.hp)
    }

    /// Same measurements, test grid and hyperparameters at new training locations.
    pub fn relocated(&self, z: DMatrix<f64>) -> Result<TrainedModel> {
        let set = TrainingSet::new(z, self.train.measurements().clone())?;
        train(set, self.test.clone(), self.hp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    #[test]
    fn noise_free_single_point_interpolates() {
        let hp = Hyperparams::new(1.0, 0.1, 0.0).unwrap();
        let set = TrainingSet::new(col(&[0.3]), DVector::from_element(1, 2.5)).unwrap();
        let model = train(set, TestGrid::new(col(&[0.3])).unwrap(), hp).unwrap();
        assert_eq!(model.mean_hat()[0], 2.5);
        assert_eq!(model.cov_hat()[(0, 0)], 0.0);
    }

    #[test]
    fn equal_noise_halves_the_datum() {
        let hp = Hyperparams::new(1.3, 0.2, 1.3).unwrap();
        let set = TrainingSet::new(col(&[0.0]), DVector::from_element(1, 3.0)).unwrap();
        let model = train(set, TestGrid::new(col(&[0.0])).unwrap(), hp).unwrap();
        assert!((model.mean_hat()[0] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn duplicates_without_noise_are_rejected() {
        let hp = Hyperparams::new(1.0, 0.1, 0.0).unwrap();
        let set = TrainingSet::new(col(&[0.0, 0.5, 0.0]), DVector::from_element(3, 1.0)).unwrap();
        let err = train(set, TestGrid::new(col(&[0.2])).unwrap(), hp).unwrap_err();
        assert!(matches!(err, Error::Model(ref msg) if msg.contains("coincide")));

        let noisy = Hyperparams::new(1.0, 0.1, 0.1).unwrap();
        let set = TrainingSet::new(col(&[0.0, 0.5, 0.0]), DVector::from_element(3, 1.0)).unwrap();
        assert!(train(set, TestGrid::new(col(&[0.2])).unwrap(), noisy).is_ok());
    }

    #[test]
    fn empty_or_inconsistent_sets_are_rejected() {
        assert!(TrainingSet::new(DMatrix::zeros(0, 1), DVector::zeros(0)).is_err());
        assert!(TrainingSet::new(col(&[0.0, 1.0]), DVector::zeros(3)).is_err());
        assert!(TestGrid::new(DMatrix::zeros(0, 2)).is_err());
        let hp = Hyperparams::new(1.0, 0.1, 0.0).unwrap();
        let set = TrainingSet::new(col(&[0.0]), DVector::zeros(1)).unwrap();
        let grid = TestGrid::new(DMatrix::zeros(1, 2)).unwrap();
        assert!(matches!(train(set, grid, hp), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn predict_at_planned_locations_reproduces_baseline() {
        let hp = Hyperparams::new(1.0, 0.3, 0.05).unwrap();
        let x = col(&[0.0, 0.2, 0.5, 0.9]);
        let set = TrainingSet::new(x.clone(), DVector::from_vec(vec![1.0, -0.5, 0.3, 2.0])).unwrap();
        let grid = TestGrid::new(col(&[0.1, 0.4, 0.7])).unwrap();
        let model = train(set, grid, hp).unwrap();
        let (m, s) = predict_at(&model, &x).unwrap();
        assert_eq!(&m, model.mean_hat());
        assert_eq!(&s, model.cov_hat());
        assert!(predict_at(&model, &col(&[0.0, 0.1])).is_err());
    }

    #[test]
    fn swapping_symmetric_pair_leaves_midpoint_mean() {
        let hp = Hyperparams::new(1.0, 0.2, 0.01).unwrap();
        let set = TrainingSet::new(col(&[-0.1, 0.1]), DVector::from_element(2, 0.7)).unwrap();
        let model = train(set, TestGrid::new(col(&[0.0])).unwrap(), hp).unwrap();
        let (a, _) = predict_at(&model, &col(&[-0.1, 0.1])).unwrap();
        let (b, _) = predict_at(&model, &col(&[0.1, -0.1])).unwrap();
        assert!((a[0] - b[0]).abs() <= 1e-15 * a[0].abs());
    }
}
