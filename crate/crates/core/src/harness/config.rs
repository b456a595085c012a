//! Experiment configuration, read from a TOML file and overridable from the
//! command line. Every field is optional in the file; missing ones take the
//! defaults of the chosen `kind`.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::correction::Order;
use crate::derivatives::StoragePolicy;
use crate::error::{Error, Result};
use crate::kernel::Hyperparams;

use super::fields::Field;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    /// Eleven-point line survey of `2 + sin(2 pi x)` with random location noise.
    OneD,
    /// 6 x 6 grid survey of `sin(2 pi x) cos(2 pi y)` with a constant bias.
    TwoD,
    /// Random locations; sizes taken from `t`, `m`, `n`.
    Custom,
}

/// Which locations the regular grid describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridRole {
    /// The grid is where the model thinks the measurements were taken; the
    /// true locations are the grid plus the errors.
    Planned,
    /// The measurements really were taken on the grid; the model was given
    /// the grid minus the errors.
    True,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case", deny_unknown_fields)]
pub enum PerturbationModel {
    /// Independent `N(0, sigma^2)` error in every coordinate, drawn per trial.
    IidGaussian { sigma: f64 },
    /// The same error vector for every point.
    ConstantOffset { offset: Vec<f64> },
    /// `T` rows of `n` comma-separated errors.
    File { path: PathBuf },
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    kind: Option<Kind>,
    field: Option<Field>,
    grid: Option<GridRole>,
    train_per_axis: Option<usize>,
    test_per_axis: Option<usize>,
    t: Option<usize>,
    m: Option<usize>,
    n: Option<usize>,
    alpha: Option<f64>,
    beta: Option<f64>,
    sigma_y: Option<f64>,
    perturbation: Option<PerturbationModel>,
    corrected_points: Option<usize>,
    trials: Option<usize>,
    seed: Option<u64>,
    order: Option<u8>,
    out: Option<PathBuf>,
    storage: Option<String>,
    psd_project: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub kind: Kind,
    pub field: Field,
    pub grid: GridRole,
    /// Grid points per axis (`one_d`, `two_d`).
    pub train_per_axis: usize,
    pub test_per_axis: usize,
    /// Sizes for `custom`; derived from the grids otherwise.
    pub t: usize,
    pub m: usize,
    pub n: usize,
    pub hyperparams: Hyperparams,
    pub perturbation: PerturbationModel,
    /// Perturb only this many randomly chosen points per trial.
    pub corrected_points: Option<usize>,
    pub trials: usize,
    pub seed: u64,
    pub order: Order,
    pub out: Option<PathBuf>,
    pub storage: StoragePolicy,
    pub psd_project: bool,
}

impl ExperimentConfig {
    pub fn one_d() -> Self {
        ExperimentConfig {
            kind: Kind::OneD,
            field: Field::Sine1d,
            grid: GridRole::Planned,
            train_per_axis: 11,
            test_per_axis: 100,
            t: 11,
            m: 100,
            n: 1,
            hyperparams: Hyperparams {
                alpha: 1.0,
                beta: 0.1,
                sigma_y: 0.01,
            },
            perturbation: PerturbationModel::IidGaussian { sigma: 0.01 },
            corrected_points: None,
            trials: 100,
            seed: 1,
            order: Order::Second,
            out: None,
            storage: StoragePolicy::Auto,
            psd_project: false,
        }
    }

    pub fn two_d() -> Self {
        ExperimentConfig {
            kind: Kind::TwoD,
            field: Field::SineCos2d,
            grid: GridRole::True,
            train_per_axis: 6,
            test_per_axis: 10,
            t: 36,
            m: 100,
            n: 2,
            hyperparams: Hyperparams {
                alpha: 1.0,
                beta: 0.2,
                sigma_y: 0.01,
            },
            perturbation: PerturbationModel::ConstantOffset { offset: vec![0.1, 0.0] },
            trials: 1,
            ..Self::one_d()
        }
    }

    /// Many random points with a single one corrected.
    pub fn custom() -> Self {
        ExperimentConfig {
            kind: Kind::Custom,
            field: Field::SineCos2d,
            grid: GridRole::Planned,
            train_per_axis: 0,
            test_per_axis: 0,
            t: 200,
            m: 100,
            n: 2,
            hyperparams: Hyperparams {
                alpha: 1.0,
                beta: 0.1,
                sigma_y: 0.01,
            },
            perturbation: PerturbationModel::IidGaussian { sigma: 0.01 },
            corrected_points: Some(1),
            trials: 20,
            ..Self::one_d()
        }
    }

    pub fn for_kind(kind: Kind) -> Self {
        match kind {
            Kind::OneD => Self::one_d(),
            Kind::TwoD => Self::two_d(),
            Kind::Custom => Self::custom(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::resolve(raw, None)
    }

    /// Load a config file; a `kind` given here wins over the file's when the
    /// file has none.
    pub fn load(path: &Path, fallback_kind: Option<Kind>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: RawConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::resolve(raw, fallback_kind)?;
        // relative perturbation files are resolved against the config's directory
        if let PerturbationModel::File { path: p } = &mut cfg.perturbation {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    fn resolve(raw: RawConfig, fallback_kind: Option<Kind>) -> Result<Self> {
        let kind = raw.kind.or(fallback_kind).unwrap_or(Kind::OneD);
        let mut cfg = Self::for_kind(kind);
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = raw.$f { cfg.$f = v; } )* };
        }
        take!(
            field,
            grid,
            train_per_axis,
            test_per_axis,
            t,
            m,
            n,
            perturbation,
            trials,
            seed,
            psd_project
        );
        if raw.corrected_points.is_some() {
            cfg.corrected_points = raw.corrected_points;
        }
        if raw.out.is_some() {
            cfg.out = raw.out;
        }
        if let Some(a) = raw.alpha {
            cfg.hyperparams.alpha = a;
        }
        if let Some(b) = raw.beta {
            cfg.hyperparams.beta = b;
        }
        if let Some(s) = raw.sigma_y {
            cfg.hyperparams.sigma_y = s;
        }
        if let Some(o) = raw.order {
            cfg.order = Order::try_from(o).map_err(|e| Error::Config(e.to_string()))?;
        }
        if let Some(s) = raw.storage {
            cfg.storage = s.parse()?;
        }
        cfg.finish()?;
        Ok(cfg)
    }

    /// Derive `t`, `m`, `n` from the grids and check consistency. Call after
    /// changing fields by hand.
    pub fn finish(&mut self) -> Result<()> {
        match self.kind {
            Kind::OneD => {
                self.n = 1;
                self.t = self.train_per_axis;
                self.m = self.test_per_axis;
            }
            Kind::TwoD => {
                self.n = 2;
                self.t = self.train_per_axis * self.train_per_axis;
                self.m = self.test_per_axis * self.test_per_axis;
            }
            Kind::Custom => {}
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if self.t == 0 || self.m == 0 || self.n == 0 {
            return bad(format!(
                "T, M and n must be positive (got {}, {}, {})",
                self.t, self.m, self.n
            ));
        }
        if self.field.dim() != self.n {
            return bad(format!(
                "field {:?} is {}-dimensional but n = {}",
                self.field,
                self.field.dim(),
                self.n
            ));
        }
        self.hyperparams.validate().map_err(|e| Error::Config(e.to_string()))?;
        match &self.perturbation {
            PerturbationModel::IidGaussian { sigma } if !(*sigma >= 0.0 && sigma.is_finite()) => {
                return bad(format!("perturbation sigma must be finite and >= 0 (got {sigma})"));
            }
            PerturbationModel::ConstantOffset { offset } if offset.len() != self.n => {
                return bad(format!("offset has {} entries but n = {}", offset.len(), self.n));
            }
            _ => {}
        }
        if let Some(k) = self.corrected_points {
            if k > self.t {
                return bad(format!("corrected_points = {k} exceeds T = {}", self.t));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_sizes() {
        let c = ExperimentConfig::from_toml("kind = \"two_d\"").unwrap();
        assert_eq!((c.t, c.m, c.n), (36, 100, 2));
        assert_eq!(c.hyperparams.beta, 0.2);
        let c = ExperimentConfig::from_toml("").unwrap();
        assert_eq!((c.t, c.m, c.n), (11, 100, 1));
        assert_eq!(c.trials, 100);
    }

    #[test]
    fn overrides_and_tables() {
        let c = ExperimentConfig::from_toml(
            "kind = \"one_d\"\ntrials = 3\norder = 1\nstorage = \"lazy\"\n[perturbation]\nmodel = \"iid_gaussian\"\nsigma = 0.0\n",
        )
        .unwrap();
        assert_eq!(c.trials, 3);
        assert_eq!(c.order, Order::First);
        assert_eq!(c.storage, StoragePolicy::Lazy);
        assert_eq!(c.perturbation, PerturbationModel::IidGaussian { sigma: 0.0 });
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(ExperimentConfig::from_toml("trials = 0").is_err());
        assert!(ExperimentConfig::from_toml("order = 3").is_err());
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
        assert!(ExperimentConfig::from_toml("storage = \"fast\"").is_err());
        assert!(ExperimentConfig::from_toml("kind = \"two_d\"\nfield = \"sine_1d\"").is_err());
        assert!(ExperimentConfig::from_toml(
            "kind = \"two_d\"\n[perturbation]\nmodel = \"constant_offset\"\noffset = [0.1]"
        )
        .is_err());
    }
}
