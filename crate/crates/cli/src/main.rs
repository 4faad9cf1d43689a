//! `crowdcount` command-line tool.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "crowdcount", version, about = "Perspective-aware density-map crowd counting")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic benchmark (PGM images + JSON annotations).
    GenData(GenData),
    /// Write 1/8-scale density targets for every image of a dataset.
    GenDensity(GenDensity),
    /// Train one stage of the two-stage pipeline.
    Train(Train),
    /// Produce count-corrected targets from a trained teacher.
    Distill(Distill),
    /// Run both stages end to end and write report.json.
    Pipeline(Common),
    /// Report MAE/RMSE of a model or of saved predictions on the test split.
    Eval(Eval),
    /// Receptive-field IoU sweep and per-layer extents.
    AnalyzeRf(AnalyzeRf),
    /// Compare dilation-transform slopes.
    SweepGamma(Common),
    /// Compare constant dilation 1, constant dilation 2, and dynamic dilation.
    SweepDilation(Common),
}

#[derive(Args, Debug)]
pub struct Common {
    /// Pipeline configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Dataset directory from `gen-data`; defaults to the config's `data` section.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct GenData {
    /// Benchmark spec (JSON: n_train, n_test, seed, scene).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct GenDensity {
    /// Target spec (JSON: sigma, factor).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a PGM heatmap per map.
    #[arg(long)]
    pub heatmaps: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageArg {
    Rough,
    Teacher,
    Student,
}

#[derive(Args, Debug)]
pub struct Train {
    #[arg(long, value_enum)]
    pub stage: StageArg,
    #[command(flatten)]
    pub common: Common,
    /// Rough checkpoint (teacher and student stages).
    #[arg(long)]
    pub rough: Option<PathBuf>,
    /// Teacher checkpoint (student stage).
    #[arg(long)]
    pub teacher: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct Distill {
    #[arg(long)]
    pub teacher: PathBuf,
    #[arg(long)]
    pub rough: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct Eval {
    /// Directory of `<id>.dmap` predictions for the test split.
    #[arg(long, conflicts_with_all = ["model", "rough", "config"])]
    pub predictions: Option<PathBuf>,
    /// Precise-network checkpoint.
    #[arg(long, requires_all = ["rough", "config"])]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub rough: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AnalyzeRf {
    /// Model configuration (JSON); defaults to the built-in toy backbone.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Output-grid separation between the two fields.
    #[arg(long, default_value_t = 1.0)]
    pub separation: f64,
    /// Largest field side in the IoU sweep.
    #[arg(long, default_value_t = 256.0)]
    pub max_field: f64,
    /// Dilation rate assumed for refined layers.
    #[arg(long, default_value_t = 1.0)]
    pub rate: f64,
}

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("DRF_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("DRF_THREADS must be a positive integer, got {v:?}"))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Err(msg) = init_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
