//! Triangular cyclic schedules for learning rate and momentum rate.
//!
//! A cycle spans `c * it_per_epoch` iterations where `c` is a positive even
//! epoch count. Within a cycle the rate ramps linearly from its minimum to
//! its maximum over the first half, then back down over the second half, and
//! the pattern repeats for as long as training runs. Learning rate and
//! momentum rate cycle independently (`c_lr` and `c_mr` may differ).

use crate::{Error, Result};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Published bounds for the learning-rate triangle.
pub const DEFAULT_MIN_LR: f64 = 0.0005;
pub const DEFAULT_MAX_LR: f64 = 0.05;
/// Published bounds for the momentum-rate triangle.
pub const DEFAULT_MIN_MR: f64 = 0.85;
pub const DEFAULT_MAX_MR: f64 = 0.95;

/// Number of iterations in one full cycle of `c` epochs.
pub fn cycle_length(c: usize, it_per_epoch: usize) -> usize {
    c * it_per_epoch
}

/// Bounds and cycle lengths for both schedules, bound to a concrete
/// `it_per_epoch` so rates are pure functions of the iteration index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleConfig {
    pub min_lr: f64,
    pub max_lr: f64,
    pub min_mr: f64,
    pub max_mr: f64,
    /// Learning-rate cycle length in epochs. Positive and even.
    pub c_lr: usize,
    /// Momentum-rate cycle length in epochs. Positive and even.
    pub c_mr: usize,
    pub it_per_epoch: usize,
}

impl CycleConfig {
    pub fn new(
        min_lr: f64,
        max_lr: f64,
        min_mr: f64,
        max_mr: f64,
        c_lr: usize,
        c_mr: usize,
        it_per_epoch: usize,
    ) -> Result<Self> {
        let cfg = CycleConfig {
            min_lr,
            max_lr,
            min_mr,
            max_mr,
            c_lr,
            c_mr,
            it_per_epoch,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Published bounds with the given cycle lengths.
    pub fn with_defaults(c_lr: usize, c_mr: usize, it_per_epoch: usize) -> Result<Self> {
        CycleConfig::new(
            DEFAULT_MIN_LR,
            DEFAULT_MAX_LR,
            DEFAULT_MIN_MR,
            DEFAULT_MAX_MR,
            c_lr,
            c_mr,
            it_per_epoch,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.it_per_epoch == 0 {
            return Err(Error::InvalidCycle("it_per_epoch must be >= 1".into()));
        }
        for (name, c) in [("c_lr", self.c_lr), ("c_mr", self.c_mr)] {
            if c == 0 || c % 2 != 0 {
                return Err(Error::InvalidCycle(format!(
                    "{name} must be a positive even epoch count, got {c}"
                )));
            }
        }
        if !(self.min_lr > 0.0 && self.min_lr.is_finite() && self.max_lr.is_finite()) {
            return Err(Error::InvalidCycle(format!(
                "learning-rate bounds must be finite and positive, got [{}, {}]",
                self.min_lr, self.max_lr
            )));
        }
        if self.min_lr > self.max_lr {
            return Err(Error::InvalidCycle(format!(
                "min_lr {} exceeds max_lr {}",
                self.min_lr, self.max_lr
            )));
        }
        if !(self.min_mr >= 0.0 && self.max_mr < 1.0) {
            return Err(Error::InvalidCycle(format!(
                "momentum-rate bounds must lie in [0, 1), got [{}, {}]",
                self.min_mr, self.max_mr
            )));
        }
        if self.min_mr > self.max_mr {
            return Err(Error::InvalidCycle(format!(
                "min_mr {} exceeds max_mr {}",
                self.min_mr, self.max_mr
            )));
        }
        Ok(())
    }

    /// Learning-rate cycle length in iterations.
    pub fn lr_cycle(&self) -> usize {
        cycle_length(self.c_lr, self.it_per_epoch)
    }

    /// Momentum-rate cycle length in iterations.
    pub fn mr_cycle(&self) -> usize {
        cycle_length(self.c_mr, self.it_per_epoch)
    }

    /// Learning rate at iteration `i` (0-based).
    pub fn lr_at(&self, i: usize) -> f64 {
        triangle(i, self.lr_cycle(), self.min_lr, self.max_lr)
    }

    /// Momentum rate at iteration `i` (0-based).
    pub fn mr_at(&self, i: usize) -> f64 {
        triangle(i, self.mr_cycle(), self.min_mr, self.max_mr)
    }
}

/// Triangular wave over iteration index: `lo` at phase 0, `hi` at the
/// half-cycle, back to `lo` as the phase wraps. Exact at the vertices
/// because the blend weights there are exactly 0 and 1.
fn triangle(i: usize, cycle: usize, lo: f64, hi: f64) -> f64 {
    let half = cycle / 2;
    let p = i % cycle;
    let t = if p <= half {
        p as f64 / half as f64
    } else {
        (cycle - p) as f64 / half as f64
    };
    (lo * (1.0 - t) + hi * t).clamp(lo, hi)
}

/// Iteration counter that knows the epoch boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainClock {
    iteration: usize,
    it_per_epoch: usize,
}

impl TrainClock {
    pub fn new(it_per_epoch: usize) -> Result<Self> {
        if it_per_epoch == 0 {
            return Err(Error::InvalidCycle("it_per_epoch must be >= 1".into()));
        }
        Ok(TrainClock {
            iteration: 0,
            it_per_epoch,
        })
    }

    /// Current 0-based iteration index.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Current 0-based epoch index.
    pub fn epoch(&self) -> usize {
        self.iteration / self.it_per_epoch
    }

    pub fn it_per_epoch(&self) -> usize {
        self.it_per_epoch
    }

    /// True when the current iteration is the last one of its epoch.
    pub fn at_epoch_end(&self) -> bool {
        (self.iteration + 1) % self.it_per_epoch == 0
    }

    pub fn advance(&mut self) {
        self.iteration += 1;
    }
}

/// One sampled point of the two schedules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaveformPoint {
    pub iteration: usize,
    pub lr: f64,
    pub mr: f64,
}

/// Sample both schedules for `iters` iterations starting at 0.
pub fn waveform(cfg: &CycleConfig, iters: usize) -> Vec<WaveformPoint> {
    (0..iters)
        .map(|i| WaveformPoint {
            iteration: i,
            lr: cfg.lr_at(i),
            mr: cfg.mr_at(i),
        })
        .collect()
}

/// Write the sampled schedules as CSV with header `iteration,lr,mr`.
pub fn write_waveform_csv(cfg: &CycleConfig, iters: usize, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    let mut w = std::io::BufWriter::new(file);
    let ctx = || format!("write {}", path.display());
    writeln!(w, "iteration,lr,mr").map_err(|e| Error::io(ctx(), e))?;
    for pt in waveform(cfg, iters) {
        writeln!(w, "{},{},{}", pt.iteration, pt.lr, pt.mr).map_err(|e| Error::io(ctx(), e))?;
    }
    w.flush().map_err(|e| Error::io(ctx(), e))
}
