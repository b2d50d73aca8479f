//! Side-by-side runs of several configs on one dataset and seed set.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{median, run_indexed, train, ExperimentConfig};
use crate::model::Arch;
use crate::optim::OptimizerKind;
use crate::{Error, Result};

/// Best-epoch metrics for one config, medians over the shared seed set.
/// Per-class entries follow the foreground class order.
#[derive(Debug, Clone)]
pub struct CompareRow {
    pub arch: Arch,
    pub optimizer: OptimizerKind,
    pub dice_per_class: Vec<f64>,
    pub dice_avg: Option<f64>,
    pub val_loss: Option<f64>,
    pub failures: Vec<(u64, String)>,
}

impl CompareRow {
    pub fn failed(&self) -> bool {
        self.dice_avg.is_none()
    }
}

/// One validation epoch of one (config, seed) run.
#[derive(Debug, Clone)]
pub struct CurvePoint {
    pub arch: Arch,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub epoch: usize,
    pub val_loss: f64,
    pub dice_avg: f64,
}

/// One row per config plus every run's validation curve.
#[derive(Debug, Clone)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
    pub curves: Vec<CurvePoint>,
}

/// Runs each config on each seed. All configs must share the data source;
/// per-config seeds are ignored in favor of the shared list, so every row
/// is measured on the same dataset and the same seed set.
pub fn compare(configs: &[ExperimentConfig], seeds: &[u64]) -> Result<CompareReport> {
    if configs.is_empty() {
        return Err(Error::InvalidExperiment("config list must be non-empty".into()));
    }
    if seeds.is_empty() {
        return Err(Error::InvalidExperiment("seed list must be non-empty".into()));
    }
    for cfg in configs {
        cfg.validate()?;
        if cfg.data != configs[0].data {
            return Err(Error::InvalidExperiment(
                "comparison runs must share one dataset config".into(),
            ));
        }
    }

    let runs = run_indexed(configs.len() * seeds.len(), |job| {
        let cfg_idx = job / seeds.len();
        let seed = seeds[job % seeds.len()];
        let mut cfg = configs[cfg_idx].clone();
        cfg.seed = seed;
        cfg.out_dir = None;
        (cfg_idx, seed, train(&cfg))
    });

    let mut rows = Vec::with_capacity(configs.len());
    let mut curves = Vec::new();
    for (cfg_idx, cfg) in configs.iter().enumerate() {
        let mut best_dice: Vec<f64> = Vec::new();
        let mut best_loss: Vec<f64> = Vec::new();
        let mut per_class: Vec<Vec<f64>> = Vec::new();
        let mut failures = Vec::new();
        for (_, seed, outcome) in runs.iter().filter(|(i, _, _)| *i == cfg_idx) {
            match outcome {
                Ok(out) => {
                    let best = out.best();
                    best_dice.push(best.dice_avg);
                    best_loss.push(best.val_loss);
                    if per_class.len() < best.dice_per_class.len() {
                        per_class.resize(best.dice_per_class.len(), Vec::new());
                    }
                    for (c, d) in best.dice_per_class.iter().enumerate() {
                        per_class[c].push(*d);
                    }
                    for r in &out.records {
                        curves.push(CurvePoint {
                            arch: cfg.arch,
                            optimizer: cfg.optimizer,
                            seed: *seed,
                            epoch: r.epoch,
                            val_loss: r.val_loss,
                            dice_avg: r.dice_avg,
                        });
                    }
                }
                Err(e) => failures.push((*seed, e.to_string())),
            }
        }
        rows.push(CompareRow {
            arch: cfg.arch,
            optimizer: cfg.optimizer,
            dice_per_class: per_class
                .iter()
                .filter_map(|v| median(v))
                .collect(),
            dice_avg: median(&best_dice),
            val_loss: median(&best_loss),
            failures,
        });
    }
    Ok(CompareReport { rows, curves })
}

/// Summary table, one row per config. Classes beyond the dataset's
/// foreground count report the empty-empty Dice of 1.
pub fn write_compare_csv(report: &CompareReport, path: &Path) -> Result<()> {
    let file = fs::File::create(path)
        .map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    let mut out = std::io::BufWriter::new(file);
    let write = |e: std::io::Error| Error::io(format!("write {}", path.display()), e);
    writeln!(out, "arch,optimizer,dice_rv,dice_myo,dice_lv,dice_avg,val_loss,status").map_err(write)?;
    for row in &report.rows {
        let class = |i: usize| {
            if row.failed() {
                String::new()
            } else {
                row.dice_per_class.get(i).copied().unwrap_or(1.0).to_string()
            }
        };
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            row.arch,
            row.optimizer,
            class(0),
            class(1),
            class(2),
            fmt(row.dice_avg),
            fmt(row.val_loss),
            if row.failed() { "failed" } else { "ok" }
        )
        .map_err(write)?;
    }
    out.into_inner().map_err(|e| write(e.into_error()))?;
    Ok(())
}

/// One row per validation epoch per (config, seed) run.
pub fn write_curves_csv(report: &CompareReport, path: &Path) -> Result<()> {
    let file = fs::File::create(path)
        .map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    let mut out = std::io::BufWriter::new(file);
    let write = |e: std::io::Error| Error::io(format!("write {}", path.display()), e);
    writeln!(out, "arch,optimizer,seed,epoch,val_loss,dice_avg").map_err(write)?;
    for p in &report.curves {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            p.arch, p.optimizer, p.seed, p.epoch, p.val_loss, p.dice_avg
        )
        .map_err(write)?;
    }
    out.into_inner().map_err(|e| write(e.into_error()))?;
    Ok(())
}
