use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gpcorr::correction::Order;
use gpcorr::derivatives::{precompute, read_cache, write_cache, StoragePolicy};
use gpcorr::error::Error;
use gpcorr::harness::output::write_timing;
use gpcorr::harness::{
    check_gradients, run_experiment_1d, run_experiment_2d, run_timing, trial_setup, CheckConfig, ExperimentConfig,
    ExperimentReport, Kind,
};

/// Correct a trained Gaussian process for known errors in its training
/// locations, and run the accompanying experiments.
#[derive(Parser)]
#[command(name = "gpcorr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Line survey of 2 + sin(2 pi x) with Gaussian location noise.
    #[command(name = "experiment-1d")]
    Experiment1d(Common),
    /// Grid survey of sin(2 pi x) cos(2 pi y) with a constant location bias.
    #[command(name = "experiment-2d")]
    Experiment2d(Common),
    /// Retraining against online correction. Without --config, runs the
    /// 1D, 2D and a T=200 single-point scenario.
    Timing(Common),
    /// Compare every analytic derivative with finite differences on random
    /// small instances; --trials sets the instance count.
    #[command(name = "check-gradients")]
    CheckGradients(Common),
    /// Build the correction operators for a config, write them to
    /// <out>/operators.gprc and verify the file reads back.
    #[command(name = "precompute-cache")]
    PrecomputeCache(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, value_parser = parse_order)]
    order: Option<Order>,
    /// Output directory (default: results).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Operator storage: dense, lazy or auto.
    #[arg(long)]
    storage: Option<StoragePolicy>,
    /// Clip negative eigenvalues of the corrected covariance.
    #[arg(long)]
    psd_project: bool,
}

fn parse_order(s: &str) -> Result<Order, String> {
    let v: u8 = s.parse().map_err(|_| format!("order must be 1 or 2, got {s:?}"))?;
    Order::try_from(v).map_err(|e| e.to_string())
}

enum Failure {
    Tolerance(String),
    Input(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::BoundUnsatisfiable { .. } => Failure::Tolerance(e.to_string()),
            other => Failure::Input(other),
        }
    }
}

const DEFAULT_OUT: &str = "results";

impl Common {
    fn load(&self, kind: Kind) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path, Some(kind))?,
            None => ExperimentConfig::for_kind(kind),
        };
        self.apply(&mut cfg)?;
        Ok(cfg)
    }

    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<(), Error> {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.trials {
            cfg.trials = t;
        }
        if let Some(o) = self.order {
            cfg.order = o;
        }
        if let Some(s) = self.storage {
            cfg.storage = s;
        }
        if self.psd_project {
            cfg.psd_project = true;
        }
        if self.out.is_some() {
            cfg.out = self.out.clone();
        }
        if cfg.out.is_none() {
            cfg.out = Some(PathBuf::from(DEFAULT_OUT));
        }
        cfg.validate()
    }

    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }
}

fn summarize(report: &ExperimentReport) {
    let cfg = &report.config;
    println!(
        "{:?}: {} trials, T={}, M={}, n={}, order {}",
        cfg.kind,
        cfg.trials,
        cfg.t,
        cfg.m,
        cfg.n,
        cfg.order.as_u8()
    );
    println!(
        "mean error norm corrupted={:.6e} corrected={:.6e}",
        report.mean_norm_corrupted(),
        report.mean_norm_corrected()
    );
    println!(
        "mean improvement {:.3}%, improved in {}/{} trials",
        report.mean_improvement_pct(),
        report.trials_improved(),
        cfg.trials
    );
    if let Some(dir) = &cfg.out {
        println!("wrote {}", dir.display());
    }
}

fn experiment(args: &Common, kind: Kind) -> Result<(), Failure> {
    let cfg = args.load(kind)?;
    let report = match kind {
        Kind::TwoD => run_experiment_2d(&cfg)?,
        _ => run_experiment_1d(&cfg)?,
    };
    summarize(&report);
    Ok(())
}

fn timing(args: &Common) -> Result<(), Failure> {
    let configs = match &args.config {
        Some(_) => vec![args.load(Kind::OneD)?],
        None => [Kind::OneD, Kind::TwoD, Kind::Custom]
            .into_iter()
            .map(|k| args.load(k))
            .collect::<Result<Vec<_>, _>>()?,
    };
    let mut rows = Vec::new();
    for cfg in &configs {
        let row = run_timing(cfg)?;
        println!(
            "{:<7} T={:<4} M={:<4} n={} K={:<3} {:<5} offline={:.3e}s retrain={:.3e}s correction={:.3e}s speedup={:.1}x",
            row.scenario,
            row.t,
            row.m,
            row.n,
            row.perturbed_points,
            row.storage,
            row.offline_s,
            row.median_retrain_s,
            row.median_correction_s,
            row.speedup()
        );
        rows.push(row);
    }
    let path = args.out_dir().join("timing.csv");
    write_timing(&rows, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn gradients(args: &Common) -> Result<(), Failure> {
    let mut cfg = CheckConfig::default();
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(t) = args.trials {
        cfg.instances = t;
    }
    let report = check_gradients(&cfg)?;
    println!("{report}");
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Tolerance(format!(
            "derivative check failed for {}",
            report.failing_kinds().join(", ")
        )))
    }
}

fn cache(args: &Common) -> Result<(), Failure> {
    let cfg = args.load(Kind::OneD)?;
    let setup = trial_setup(&cfg, 0)?;
    let ops = precompute(&setup.model, cfg.storage)?;
    let dir = args.out_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Failure::Input(io_error(&dir, e)))?;
    let path = dir.join("operators.gprc");
    write_cache(&ops, &setup.model, &path)?;
    let back = read_cache(&path, &setup.model)?;
    if back != ops {
        return Err(Failure::Tolerance(format!(
            "{} does not read back identically",
            path.display()
        )));
    }
    println!(
        "wrote {} ({:?} storage, {} scalars, T={}, M={}, n={})",
        path.display(),
        ops.policy(),
        ops.scalar_count(),
        setup.model.t(),
        setup.model.m(),
        setup.model.n()
    );
    Ok(())
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Experiment1d(a) => experiment(a, Kind::OneD),
        Command::Experiment2d(a) => experiment(a, Kind::TwoD),
        Command::Timing(a) => timing(a),
        Command::CheckGradients(a) => gradients(a),
        Command::PrecomputeCache(a) => cache(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Tolerance(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Input(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
