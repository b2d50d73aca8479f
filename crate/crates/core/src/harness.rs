//! Experiment harness: configuration, the training loop, and the batch
//! drivers built on top of it (grid search, optimizer comparison).

mod compare;
mod grid;

pub use compare::{compare, write_compare_csv, write_curves_csv, CompareReport, CompareRow, CurvePoint};
pub use grid::{grid_search, write_grid_csv, GridCell, GridSearchResult};

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    argmax_mask, dice_foreground, generate_phantoms, load_dataset, stack_batch,
    write_metrics_csv, Dataset, MetricRecord, PhantomMode,
};
use crate::grad::{BnMode, Graph};
use crate::model::{Arch, ModelSpec, Network};
use crate::optim::{HyperParams, Optimizer, OptimizerKind};
use crate::schedule::{
    CycleConfig, DEFAULT_MAX_LR, DEFAULT_MAX_MR, DEFAULT_MIN_LR, DEFAULT_MIN_MR,
};
use crate::{Error, Result};

/// Environment variable naming the worker-thread count for grid search and
/// comparison runs. Unset or unparsable means single-threaded.
pub const WORKERS_ENV: &str = "CLMR_WORKERS";

/// Where a run's samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DataConfig {
    /// A dataset previously written with `save_dataset`.
    Dir { path: PathBuf },
    /// Synthetic phantoms drawn on the fly. `seed` is the data stream seed,
    /// independent of the training seed.
    Generate {
        count: usize,
        size: usize,
        mode: PhantomMode,
        seed: u64,
    },
}

impl DataConfig {
    pub fn resolve(&self) -> Result<Dataset> {
        match self {
            DataConfig::Dir { path } => load_dataset(path),
            DataConfig::Generate {
                count,
                size,
                mode,
                seed,
            } => generate_phantoms(*count, *size, *seed, *mode),
        }
    }
}

/// Cyclic schedule bounds and cycle lengths as they appear in config files.
/// `it_per_epoch` is deliberately absent: it is computed from the dataset
/// and batch size when the run starts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CycleSettings {
    pub min_lr: f64,
    pub max_lr: f64,
    pub min_mr: f64,
    pub max_mr: f64,
    pub c_lr: usize,
    pub c_mr: usize,
}

impl Default for CycleSettings {
    fn default() -> Self {
        CycleSettings {
            min_lr: DEFAULT_MIN_LR,
            max_lr: DEFAULT_MAX_LR,
            min_mr: DEFAULT_MIN_MR,
            max_mr: DEFAULT_MAX_MR,
            c_lr: 20,
            c_mr: 20,
        }
    }
}

impl CycleSettings {
    pub fn build(&self, it_per_epoch: usize) -> Result<CycleConfig> {
        CycleConfig::new(
            self.min_lr,
            self.max_lr,
            self.min_mr,
            self.max_mr,
            self.c_lr,
            self.c_mr,
            it_per_epoch,
        )
    }
}

/// One training run. The model is the micro preset of the chosen
/// architecture; the class count follows from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub arch: Arch,
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub hyper: HyperParams,
    #[serde(default)]
    pub cycle: CycleSettings,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds weight init and epoch shuffling. Data generation has its own
    /// seed in `DataConfig::Generate`.
    pub seed: u64,
    pub data: DataConfig,
    /// Run artifacts (metrics.csv, checkpoint/, config.toml) land here.
    /// `None` keeps the run in memory.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidExperiment("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidExperiment(
                "batch_size must be at least 1".into(),
            ));
        }
        self.hyper.validate()?;
        if let DataConfig::Generate { count, .. } = &self.data {
            if *count < 2 {
                return Err(Error::InvalidExperiment(
                    "generated datasets need at least 2 samples to hold out a validation split"
                        .into(),
                ));
            }
        }
        Ok(())
    }

    pub fn model_spec(&self, num_classes: usize) -> ModelSpec {
        ModelSpec::micro(self.arch, num_classes)
    }
}

/// Iterations per epoch: full batches only, the remainder is dropped.
pub fn iterations_per_epoch(train_samples: usize, batch_size: usize) -> usize {
    train_samples / batch_size
}

pub fn total_iterations(train_samples: usize, batch_size: usize, epochs: usize) -> usize {
    iterations_per_epoch(train_samples, batch_size) * epochs
}

/// A finished run: one record per epoch plus the final network.
#[derive(Debug)]
pub struct TrainOutcome {
    pub records: Vec<MetricRecord>,
    /// Epoch with the highest validation dice_avg, first on ties. Run
    /// ranking reads this record rather than the final one.
    pub best_epoch: usize,
    pub network: Network,
}

impl TrainOutcome {
    pub fn best(&self) -> &MetricRecord {
        &self.records[self.best_epoch]
    }

    pub fn final_record(&self) -> &MetricRecord {
        self.records.last().expect("training ran at least one epoch")
    }
}

/// Mean validation loss, per-foreground-class Dice means, and their average.
fn evaluate(net: &Network, ds: &Dataset) -> Result<(f64, Vec<f64>, f64)> {
    let foreground = ds.num_classes - 1;
    let mut loss_sum = 0.0;
    let mut dice_sum = vec![0.0; foreground];
    for &id in &ds.val_ids {
        let (image, mask) = stack_batch(&[&ds.samples[id]])?;
        let mut g = Graph::new();
        let pass = net.infer(&mut g, &image)?;
        let loss = g.softmax_cross_entropy(pass.logits, &mask)?;
        loss_sum += g.value(loss).data()[0];
        let pred = argmax_mask(g.value(pass.logits))?;
        let dice = dice_foreground(&pred, &mask, ds.num_classes)?;
        for (acc, d) in dice_sum.iter_mut().zip(&dice) {
            *acc += d;
        }
    }
    let n = ds.val_ids.len() as f64;
    let dice: Vec<f64> = dice_sum.iter().map(|s| s / n).collect();
    let avg = dice.iter().sum::<f64>() / foreground as f64;
    Ok((loss_sum / n, dice, avg))
}

/// Runs one experiment end to end. Returns per-epoch metrics and the final
/// network; writes artifacts when the config names an output directory.
///
/// Aborts with `TrainDiverged` the moment a batch loss stops being finite.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ds = cfg.data.resolve()?;
    if ds.train_ids.is_empty() {
        return Err(Error::InvalidExperiment("dataset has no training samples".into()));
    }
    if ds.val_ids.is_empty() {
        return Err(Error::InvalidExperiment("dataset has no validation samples".into()));
    }
    let it_per_epoch = iterations_per_epoch(ds.train_ids.len(), cfg.batch_size);
    if it_per_epoch == 0 {
        return Err(Error::InvalidExperiment(format!(
            "batch_size {} exceeds the {} training samples",
            cfg.batch_size,
            ds.train_ids.len()
        )));
    }
    let cycle = cfg.cycle.build(it_per_epoch)?;

    let spec = cfg.model_spec(ds.num_classes);
    let mut net = Network::build(&spec, cfg.seed)?;
    let cycle_arg = cfg.optimizer.uses_cycle().then_some(cycle);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.hyper, cycle_arg, net.param_count())?;

    // Shuffle stream is salted so it never collides with the init stream.
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order = ds.train_ids.clone();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best_epoch = 0usize;
    let mut iteration = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut last_rates = (0.0, 0.0);
        let mut last_iteration = 0usize;
        for chunk in order.chunks_exact(cfg.batch_size) {
            let (lr, mr) = opt.rates();
            let samples: Vec<_> = chunk.iter().map(|&i| &ds.samples[i]).collect();
            let (images, labels) = stack_batch(&samples)?;

            // Lookahead rules differentiate at the shifted point; the real
            // parameters come back before the step applies.
            let shifted = opt.lookahead(net.params())?;
            let saved = shifted.map(|p| {
                let orig = net.params().to_vec();
                net.params_mut().copy_from_slice(&p);
                orig
            });
            let mut g = Graph::new();
            let pass = net.forward(&mut g, &images, BnMode::Train)?;
            let loss_var = g.softmax_cross_entropy(pass.logits, &labels)?;
            let loss = g.value(loss_var).data()[0];
            if !loss.is_finite() {
                return Err(Error::TrainDiverged { iteration, lr, mr });
            }
            g.backward(loss_var)?;
            let grad = net.flat_grad(&g, &pass)?;
            if let Some(orig) = saved {
                net.params_mut().copy_from_slice(&orig);
            }
            opt.step(net.params_mut(), &grad)?;

            loss_sum += loss;
            last_rates = (lr, mr);
            last_iteration = iteration;
            iteration += 1;
        }

        let (val_loss, dice_per_class, dice_avg) = evaluate(&net, &ds)?;
        records.push(MetricRecord {
            iteration: last_iteration,
            epoch,
            lr: last_rates.0,
            mr: last_rates.1,
            train_loss: loss_sum / it_per_epoch as f64,
            val_loss,
            dice_per_class,
            dice_avg,
        });
        if records[epoch].dice_avg > records[best_epoch].dice_avg {
            best_epoch = epoch;
        }
    }

    let outcome = TrainOutcome {
        records,
        best_epoch,
        network: net,
    };
    if let Some(dir) = &cfg.out_dir {
        save_run(cfg, &outcome, dir)?;
    }
    Ok(outcome)
}

/// Writes metrics.csv, checkpoint/, and a copy of the config. Reruns of the
/// same config produce byte-identical files.
pub fn save_run(cfg: &ExperimentConfig, outcome: &TrainOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
    write_metrics_csv(&outcome.records, &dir.join("metrics.csv"))?;
    outcome.network.save_checkpoint(&dir.join("checkpoint"))?;
    // The record describes the experiment, not where it landed; baking the
    // destination in would make otherwise identical runs differ.
    let record = ExperimentConfig {
        out_dir: None,
        ..cfg.clone()
    };
    let rendered = toml::to_string_pretty(&record).map_err(|e| Error::ConfigParse {
        path: dir.join("config.toml"),
        detail: e.to_string(),
    })?;
    fs::write(dir.join("config.toml"), rendered)
        .map_err(|e| Error::io(format!("write {}", dir.join("config.toml").display()), e))?;
    Ok(())
}

/// Worker threads for embarrassingly parallel cells, bounded by the job
/// count. Results land in job order no matter which thread ran them.
pub(crate) fn run_indexed<T, F>(jobs: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
        .min(jobs.max(1));
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<T>>> = (0..jobs).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs {
                    break;
                }
                let out = f(i);
                *slots[i].lock().expect("result slot poisoned") = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| {
            s.into_inner()
                .expect("result slot poisoned")
                .expect("every job ran")
        })
        .collect()
}

/// Sorted-order median; `None` for an empty slice. Even counts average the
/// two middle values.
pub(crate) fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        Some(sorted[mid])
    } else {
        Some((sorted[mid - 1] + sorted[mid]) / 2.0)
    }
}
