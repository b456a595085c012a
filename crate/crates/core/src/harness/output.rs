//! CSV writers. Each file starts with a `#` comment naming its schema
//! version; bump the version whenever columns change.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::experiment::ExperimentReport;
use super::timing::TimingRow;

pub const SCHEMA_VERSION: u32 = 1;

fn open(path: &Path, what: &str) -> Result<csv::Writer<BufWriter<File>>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "# gpcorr {what}, schema v{SCHEMA_VERSION}").map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(w))
}

fn finish(mut w: csv::Writer<BufWriter<File>>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

fn row<I: IntoIterator<Item = String>>(w: &mut csv::Writer<BufWriter<File>>, path: &Path, fields: I) -> Result<()> {
    w.write_record(fields).map_err(|e| Error::csv(path, e))
}

/// Write `points.csv`, `trials.csv` and `summary.csv` into `dir`.
pub fn write_experiment(report: &ExperimentReport, dir: &Path) -> Result<()> {
    let n = report.test_locations.ncols();

    let path = dir.join("points.csv");
    let mut w = open(&path, "per-point results")?;
    let mut header = vec!["trial".to_string()];
    if n == 1 {
        header.push("X_test".into());
    } else {
        header.extend((0..n).map(|d| format!("X_test_{d}")));
    }
    header.extend(
        [
            "y_true",
            "y_pred_corrupted",
            "y_pred_corrected",
            "y_pred_ideal",
            "std_corrupted",
            "std_corrected",
            "error_corrupted",
            "error_corrected",
        ]
        .map(String::from),
    );
    row(&mut w, &path, header)?;
    for t in &report.trials {
        let p = &t.points;
        for (i, loc) in report.test_locations.row_iter().enumerate() {
            let mut rec = vec![t.trial.to_string()];
            rec.extend(loc.iter().map(|v| v.to_string()));
            rec.extend(
                [
                    p.y_true[i],
                    p.corrupted[i],
                    p.corrected[i],
                    p.ideal[i],
                    p.std_corrupted[i],
                    p.std_corrected[i],
                    p.y_true[i] - p.corrupted[i],
                    p.y_true[i] - p.corrected[i],
                ]
                .map(|v| v.to_string()),
            );
            row(&mut w, &path, rec)?;
        }
    }
    finish(w, &path)?;

    let path = dir.join("trials.csv");
    let mut w = open(&path, "per-trial results")?;
    row(
        &mut w,
        &path,
        [
            "trial",
            "perturbed_points",
            "delta_max",
            "norm_corrupted",
            "norm_corrected",
            "norm_ideal",
            "improvement_pct",
            "improvement_defined",
            "min_eigenvalue_corrected",
        ]
        .map(String::from),
    )?;
    for t in &report.trials {
        row(
            &mut w,
            &path,
            [
                t.trial.to_string(),
                t.perturbed_points.to_string(),
                t.delta_max.to_string(),
                t.norm_corrupted.to_string(),
                t.norm_corrected.to_string(),
                t.norm_ideal.to_string(),
                t.improvement_pct.to_string(),
                t.improvement_defined.to_string(),
                t.min_eigenvalue.to_string(),
            ],
        )?;
    }
    finish(w, &path)?;

    let cfg = &report.config;
    let path = dir.join("summary.csv");
    let mut w = open(&path, "experiment summary")?;
    row(
        &mut w,
        &path,
        [
            "kind",
            "trials",
            "T",
            "M",
            "n",
            "order",
            "mean_improvement_pct",
            "trials_improved",
            "mean_norm_corrupted",
            "mean_norm_corrected",
        ]
        .map(String::from),
    )?;
    row(
        &mut w,
        &path,
        [
            format!("{:?}", cfg.kind),
            cfg.trials.to_string(),
            cfg.t.to_string(),
            cfg.m.to_string(),
            cfg.n.to_string(),
            cfg.order.as_u8().to_string(),
            report.mean_improvement_pct().to_string(),
            report.trials_improved().to_string(),
            report.mean_norm_corrupted().to_string(),
            report.mean_norm_corrected().to_string(),
        ],
    )?;
    finish(w, &path)
}

pub fn write_timing(rows: &[TimingRow], path: &Path) -> Result<()> {
    let mut w = open(path, "timing")?;
    row(
        &mut w,
        path,
        [
            "scenario",
            "T",
            "M",
            "n",
            "perturbed_points",
            "order",
            "storage",
            "repeats",
            "offline_s",
            "median_retrain_s",
            "median_correction_s",
            "speedup",
        ]
        .map(String::from),
    )?;
    for r in rows {
        row(
            &mut w,
            path,
            [
                r.scenario.clone(),
                r.t.to_string(),
                r.m.to_string(),
                r.n.to_string(),
                r.perturbed_points.to_string(),
                r.order.to_string(),
                r.storage.clone(),
                r.repeats.to_string(),
                format!("{:.6e}", r.offline_s),
                format!("{:.6e}", r.median_retrain_s),
                format!("{:.6e}", r.median_correction_s),
                format!("{:.3}", r.speedup()),
            ],
        )?;
    }
    finish(w, path)
}
