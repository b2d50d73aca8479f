//! `clmr`: train segmentation models with cyclic learning/momentum rates,
//! sweep cycle lengths, compare optimizers, and dump schedule waveforms.
//!
//! Failures print one JSON object to stderr (`{"error": kind, "message":
//! text}`) and exit nonzero.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use clmr_core::data::{generate_phantoms, save_dataset, PhantomMode};
use clmr_core::harness::{
    compare, grid_search, train, write_compare_csv, write_curves_csv, write_grid_csv,
    CompareReport, CycleSettings, DataConfig, ExperimentConfig, GridSearchResult,
};
use clmr_core::model::Arch;
use clmr_core::optim::OptimizerKind;
use clmr_core::schedule::{
    write_waveform_csv, CycleConfig, DEFAULT_MAX_LR, DEFAULT_MAX_MR, DEFAULT_MIN_LR,
    DEFAULT_MIN_MR,
};
use clmr_core::{Error, Result};

#[derive(Parser)]
#[command(name = "clmr", version, about = "Cyclic learning/momentum rate experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one model on a dataset directory
    Train(TrainArgs),
    /// Sweep (c_lr, c_mr) pairs from a TOML config
    Gridsearch(GridArgs),
    /// Run several configs side by side from a TOML config
    Compare(CompareArgs),
    /// Sample the cyclic schedules to CSV without training
    Waveform(WaveformArgs),
    /// Generate a synthetic phantom dataset directory
    Gendata(GendataArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Architecture: encdec, unet, densenet1, densenet2
    #[arg(long)]
    arch: Arch,
    /// Optimizer: sgd, momentum, nesterov, adagrad, adam, clr, clmr
    #[arg(long)]
    opt: OptimizerKind,
    /// Learning-rate cycle length in epochs (even)
    #[arg(long, default_value_t = 20)]
    c_lr: usize,
    /// Momentum-rate cycle length in epochs (even)
    #[arg(long, default_value_t = 20)]
    c_mr: usize,
    #[arg(long, default_value_t = DEFAULT_MIN_LR)]
    min_lr: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_LR)]
    max_lr: f64,
    #[arg(long, default_value_t = DEFAULT_MIN_MR)]
    min_mr: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_MR)]
    max_mr: f64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset directory (see `clmr gendata`)
    #[arg(long)]
    data: PathBuf,
    /// Output directory for metrics.csv, checkpoint/, config.toml
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GridArgs {
    /// TOML file with a [base] run plus c_lr_values, c_mr_values, seeds
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// TOML file with [[runs]] entries plus a shared seed list
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct WaveformArgs {
    #[arg(long, default_value_t = 20)]
    c_lr: usize,
    #[arg(long, default_value_t = 20)]
    c_mr: usize,
    /// Iterations per epoch the cycle lengths multiply
    #[arg(long, default_value_t = 169)]
    it_per_epoch: usize,
    /// Number of iterations to sample
    #[arg(long)]
    iters: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GendataArgs {
    #[arg(long, default_value_t = 200)]
    count: usize,
    /// Square image size (even, at least 32)
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// single (object vs background) or multi (bg/RV/Myo/LV)
    #[arg(long, default_value = "multi")]
    mode: PhantomMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Deserialize)]
struct GridFile {
    base: ExperimentConfig,
    c_lr_values: Vec<usize>,
    c_mr_values: Vec<usize>,
    seeds: Vec<u64>,
    /// Optional CSV destination for the cell table.
    #[serde(default)]
    out: Option<PathBuf>,
}

#[derive(Deserialize)]
struct CompareFile {
    runs: Vec<ExperimentConfig>,
    seeds: Vec<u64>,
    #[serde(default)]
    table: Option<PathBuf>,
    #[serde(default)]
    curves: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            fail("usage", &e.to_string());
            return ExitCode::from(2);
        }
        Err(e) => {
            // --help and --version land here.
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            fail(e.kind(), &e.to_string());
            ExitCode::FAILURE
        }
    }
}

fn fail(kind: &str, message: &str) {
    eprintln!(
        "{}",
        serde_json::json!({ "error": kind, "message": message })
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train(args) => run_train(args),
        Cmd::Gridsearch(args) => run_gridsearch(args),
        Cmd::Compare(args) => run_compare(args),
        Cmd::Waveform(args) => run_waveform(args),
        Cmd::Gendata(args) => run_gendata(args),
    }
}

fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        context: format!("read {}", path.display()),
        source: e,
    })?;
    toml::from_str(&text).map_err(|e| Error::ConfigParse {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

fn run_train(args: TrainArgs) -> Result<()> {
    let cfg = ExperimentConfig {
        arch: args.arch,
        optimizer: args.opt,
        hyper: Default::default(),
        cycle: CycleSettings {
            min_lr: args.min_lr,
            max_lr: args.max_lr,
            min_mr: args.min_mr,
            max_mr: args.max_mr,
            c_lr: args.c_lr,
            c_mr: args.c_mr,
        },
        epochs: args.epochs,
        batch_size: args.batch,
        seed: args.seed,
        data: DataConfig::Dir { path: args.data },
        out_dir: Some(args.out.clone()),
    };
    let outcome = train(&cfg)?;
    let best = outcome.best();
    let last = outcome.final_record();
    println!(
        "trained {} with {} for {} epochs ({} iterations)",
        cfg.arch,
        cfg.optimizer,
        cfg.epochs,
        last.iteration + 1
    );
    println!(
        "best epoch {}: dice_avg {:.4}, val_loss {:.4}",
        best.epoch, best.dice_avg, best.val_loss
    );
    println!("artifacts written to {}", args.out.display());
    Ok(())
}

fn print_grid(result: &GridSearchResult) {
    println!("c_lr\tc_mr\tdice_avg\tval_loss\tstatus");
    for cell in &result.cells {
        match (cell.dice_avg, cell.val_loss) {
            (Some(d), Some(l)) => {
                println!("{}\t{}\t{:.4}\t{:.4}\tok", cell.c_lr, cell.c_mr, d, l)
            }
            _ => println!("{}\t{}\t-\t-\tfailed", cell.c_lr, cell.c_mr),
        }
    }
}

fn run_gridsearch(args: GridArgs) -> Result<()> {
    let file: GridFile = read_config(&args.config)?;
    let result = grid_search(&file.base, &file.c_lr_values, &file.c_mr_values, &file.seeds)?;
    print_grid(&result);
    match result.best {
        Some((c_lr, c_mr)) => println!("best cell: c_lr={c_lr} c_mr={c_mr}"),
        None => println!("best cell: none (all cells failed)"),
    }
    if let Some(out) = &file.out {
        write_grid_csv(&result, out)?;
        println!("table written to {}", out.display());
    }
    Ok(())
}

fn print_compare(report: &CompareReport) {
    println!("arch\toptimizer\tdice_rv\tdice_myo\tdice_lv\tdice_avg\tval_loss\tstatus");
    for row in &report.rows {
        if let (Some(d), Some(l)) = (row.dice_avg, row.val_loss) {
            let class = |i: usize| row.dice_per_class.get(i).copied().unwrap_or(1.0);
            println!(
                "{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\tok",
                row.arch,
                row.optimizer,
                class(0),
                class(1),
                class(2),
                d,
                l
            );
        } else {
            println!("{}\t{}\t-\t-\t-\t-\t-\tfailed", row.arch, row.optimizer);
        }
    }
}

fn run_compare(args: CompareArgs) -> Result<()> {
    let file: CompareFile = read_config(&args.config)?;
    let report = compare(&file.runs, &file.seeds)?;
    print_compare(&report);
    if let Some(path) = &file.table {
        write_compare_csv(&report, path)?;
        println!("table written to {}", path.display());
    }
    if let Some(path) = &file.curves {
        write_curves_csv(&report, path)?;
        println!("curves written to {}", path.display());
    }
    Ok(())
}

fn run_waveform(args: WaveformArgs) -> Result<()> {
    let cfg = CycleConfig::with_defaults(args.c_lr, args.c_mr, args.it_per_epoch)?;
    write_waveform_csv(&cfg, args.iters, &args.out)?;
    println!(
        "wrote {} iterations of the c_lr={} c_mr={} schedules to {}",
        args.iters,
        args.c_lr,
        args.c_mr,
        args.out.display()
    );
    Ok(())
}

fn run_gendata(args: GendataArgs) -> Result<()> {
    let ds = generate_phantoms(args.count, args.size, args.seed, args.mode)?;
    save_dataset(&ds, &args.out)?;
    println!(
        "wrote {} phantoms ({} train, {} val, {} classes) to {}",
        ds.len(),
        ds.train_ids.len(),
        ds.val_ids.len(),
        ds.num_classes,
        args.out.display()
    );
    Ok(())
}
