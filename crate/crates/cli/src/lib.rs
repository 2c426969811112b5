//! `evidx` command-line driver.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, CommandFactory, Parser, Subcommand};

mod commands;
pub mod plot;

pub use commands::{load_inputs, run_dir_files, RunFiles};

#[derive(Debug, Parser)]
#[command(
    name = "evidx",
    version,
    about = "Evidence-empowered transfer learning experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic data set.
    Phantom(PhantomArgs),
    /// Derive morphological-change labels and write the threshold table.
    Label(LabelArgs),
    /// Train one strategy and write its manifest, metrics and checkpoint.
    Train(TrainArgs),
    /// Score a trained run on a split.
    Eval(EvalArgs),
    /// Corrupt Severe regions and histogram the change in predicted probability.
    Counterfactual(CounterfactualArgs),
    /// Train every strategy at every data fraction and seed.
    Sweep(SweepArgs),
    /// Average per-variant results and flag the best rows.
    Summarize(SummarizeArgs),
    /// Render a sweep or histogram CSV to SVG.
    Plot(PlotArgs),
    /// Re-run a training manifest and compare its metrics.
    Reproduce(ReproduceArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// PhantomSpec JSON; the built-in spec otherwise.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = evidx_core::phantom::DESK_COUNTS.0)]
    pub n_nc: usize,
    #[arg(long, default_value_t = evidx_core::phantom::DESK_COUNTS.1)]
    pub n_mci: usize,
    #[arg(long, default_value_t = evidx_core::phantom::DESK_COUNTS.2)]
    pub n_ad: usize,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Data set directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Atlas JSON; defaults to the data set's own.
    #[arg(long)]
    pub atlas: Option<PathBuf>,
    #[arg(long)]
    pub split_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Label JSON to write; the threshold CSV goes next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub thresholds: Option<PathBuf>,
    #[arg(long, default_value_t = 10.0)]
    pub bin_width: f64,
    #[arg(long, default_value_t = 10)]
    pub min_group_size: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub strategy: Option<evidx_core::transfer::Strategy>,
    #[arg(long = "lambda")]
    pub lambda_mc: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub encoder: Option<String>,
    #[arg(long, value_parser = ["masked", "original", "channels"])]
    pub input: Option<String>,
    /// Severity phases also train on the MCI cases.
    #[arg(long)]
    pub mc_with_mci: bool,
    #[arg(long)]
    pub init_from: Option<PathBuf>,
    #[arg(long)]
    pub freeze_aux: bool,
    #[arg(long)]
    pub zero_aux: bool,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
    pub split: String,
    /// Metrics JSON to write; printed to stdout otherwise.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CounterfactualArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0.02)]
    pub bin_width: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub strategies: Option<Vec<evidx_core::transfer::Strategy>>,
    #[arg(long, value_delimiter = ',')]
    pub fractions: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SummarizeArgs {
    /// CSV with columns method,baseline,variant,accuracy,auroc.
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(value_parser = ["sweep", "histogram"])]
    pub kind: String,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Sweep plots: which metric goes on the y axis.
    #[arg(long, default_value = "accuracy", value_parser = ["accuracy", "auroc"])]
    pub metric: String,
}

#[derive(Debug, Args)]
pub struct ReproduceArgs {
    pub run_dir: PathBuf,
}

fn init_threads() {
    if let Some(n) = std::env::var("EVIDX_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        // a second call within one process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
}

/// Parses `argv` (program name first) and runs the subcommand. Returns 0 on
/// success, 1 on a domain error and 2 on a usage error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                return 0;
            }
            eprintln!();
            let _ = Cli::command().write_long_help(&mut std::io::stderr());
            return 2;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    init_threads();
    match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
