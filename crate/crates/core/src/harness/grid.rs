//! Exhaustive search over (c_lr, c_mr) cycle-length pairs.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{median, run_indexed, train, ExperimentConfig};
use crate::{Error, Result};

/// One (c_lr, c_mr) cell aggregated over seeds. `dice_avg` is the median of
/// each seed's best validation dice_avg; `val_loss` the median of the final
/// validation losses. Both are `None` when every seed failed.
#[derive(Debug, Clone)]
pub struct GridCell {
    pub c_lr: usize,
    pub c_mr: usize,
    pub dice_avg: Option<f64>,
    pub val_loss: Option<f64>,
    /// Seeds that aborted, with the error they raised. A partial cell still
    /// aggregates the seeds that finished.
    pub failures: Vec<(u64, String)>,
}

impl GridCell {
    pub fn failed(&self) -> bool {
        self.dice_avg.is_none()
    }
}

/// Cells in request order (c_lr outer, c_mr inner) plus the winning pair.
#[derive(Debug, Clone)]
pub struct GridSearchResult {
    pub cells: Vec<GridCell>,
    /// `None` only when every cell failed.
    pub best: Option<(usize, usize)>,
}

impl GridSearchResult {
    pub fn best_cell(&self) -> Option<&GridCell> {
        let (c_lr, c_mr) = self.best?;
        self.cells.iter().find(|c| c.c_lr == c_lr && c.c_mr == c_mr)
    }
}

fn check_cycle_list(name: &str, values: &[usize]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::InvalidExperiment(format!(
            "{name} values must be non-empty"
        )));
    }
    for &v in values {
        if v == 0 || v % 2 != 0 {
            return Err(Error::InvalidExperiment(format!(
                "{name} values must be positive even cycle multipliers, got {v}"
            )));
        }
    }
    Ok(())
}

/// Trains every (c_lr, c_mr) pair on every seed and aggregates with the
/// median. A failing cell is marked, not fatal. Worker threads come from
/// `CLMR_WORKERS`; the result is identical regardless of thread count, and
/// the winning cell does not depend on the order of the requested lists.
pub fn grid_search(
    base: &ExperimentConfig,
    c_lr_values: &[usize],
    c_mr_values: &[usize],
    seeds: &[u64],
) -> Result<GridSearchResult> {
    base.validate()?;
    check_cycle_list("c_lr", c_lr_values)?;
    check_cycle_list("c_mr", c_mr_values)?;
    if seeds.is_empty() {
        return Err(Error::InvalidExperiment("seed list must be non-empty".into()));
    }

    let pairs: Vec<(usize, usize)> = c_lr_values
        .iter()
        .flat_map(|&lr| c_mr_values.iter().map(move |&mr| (lr, mr)))
        .collect();
    let cells = run_indexed(pairs.len(), |i| run_cell(base, pairs[i], seeds));
    let best = select_best(&cells);
    Ok(GridSearchResult { cells, best })
}

fn run_cell(base: &ExperimentConfig, (c_lr, c_mr): (usize, usize), seeds: &[u64]) -> GridCell {
    let mut dice = Vec::with_capacity(seeds.len());
    let mut losses = Vec::with_capacity(seeds.len());
    let mut failures = Vec::new();
    for &seed in seeds {
        let mut cfg = base.clone();
        cfg.cycle.c_lr = c_lr;
        cfg.cycle.c_mr = c_mr;
        cfg.seed = seed;
        cfg.out_dir = None;
        match train(&cfg) {
            Ok(out) => {
                dice.push(out.best().dice_avg);
                losses.push(out.final_record().val_loss);
            }
            Err(e) => failures.push((seed, e.to_string())),
        }
    }
    GridCell {
        c_lr,
        c_mr,
        dice_avg: median(&dice),
        val_loss: median(&losses),
        failures,
    }
}

/// Highest median dice wins; ties go to the smaller (c_lr, c_mr) pair so the
/// answer is a function of the cell values alone.
fn select_best(cells: &[GridCell]) -> Option<(usize, usize)> {
    cells
        .iter()
        .filter_map(|c| c.dice_avg.map(|d| (d, c)))
        .max_by(|(da, ca), (db, cb)| {
            da.total_cmp(db)
                .then_with(|| (cb.c_lr, cb.c_mr).cmp(&(ca.c_lr, ca.c_mr)))
        })
        .map(|(_, c)| (c.c_lr, c.c_mr))
}

/// One row per cell in request order. Failed cells carry empty metric
/// columns and status `failed`.
pub fn write_grid_csv(result: &GridSearchResult, path: &Path) -> Result<()> {
    let file = fs::File::create(path)
        .map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    let mut out = std::io::BufWriter::new(file);
    let write = |e: std::io::Error| Error::io(format!("write {}", path.display()), e);
    writeln!(out, "c_lr,c_mr,dice_avg,val_loss,status").map_err(write)?;
    for cell in &result.cells {
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let status = if cell.failed() { "failed" } else { "ok" };
        writeln!(
            out,
            "{},{},{},{},{}",
            cell.c_lr,
            cell.c_mr,
            fmt(cell.dice_avg),
            fmt(cell.val_loss),
            status
        )
        .map_err(write)?;
    }
    out.into_inner().map_err(|e| write(e.into_error()))?;
    Ok(())
}
