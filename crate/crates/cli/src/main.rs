mod commands;
mod record;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use record::Ctx;

/// T60-aware speech dereverberation toolkit.
#[derive(Debug, Parser)]
#[command(name = "revtk", version, about)]
pub struct Cli {
    /// Threads for dataset and evaluation stages (training stays deterministic).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Master seed; overrides the seeds of the config sections.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, or output file for single-file commands.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Room impulse responses.
    #[command(subcommand)]
    Rir(RirCmd),
    /// Corpus synthesis.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Pretraining.
    #[command(subcommand)]
    Train(TrainCmd),
    /// Joint fine-tuning.
    #[command(subcommand)]
    Finetune(FinetuneCmd),
    /// Dereverberate one WAV file with a joint checkpoint.
    Enhance(EnhanceArgs),
    /// Score a checkpoint (or oracle subtraction) on a dataset split.
    Evaluate(EvaluateArgs),
    /// Write aligned reference/reverberant/enhanced WAV triples.
    ExportEvalPairs(ExportPairsArgs),
    /// Write penultimate T60 features as CSV.
    ExportPenultimate(ExportPenultimateArgs),
    /// Run the oracle and gradient-check suite.
    Selftest,
    /// Write a preset configuration file.
    Config(ConfigArgs),
}

#[derive(Debug, Subcommand)]
pub enum RirCmd {
    Simulate(SimulateArgs),
    Decompose(InputArgs),
    Measure(InputArgs),
}

#[derive(Debug, Subcommand)]
pub enum DatasetCmd {
    Build(ConfigPath),
}

#[derive(Debug, Subcommand)]
pub enum TrainCmd {
    T60(TrainT60Args),
    Derev(ConfigPath),
}

#[derive(Debug, Subcommand)]
pub enum FinetuneCmd {
    Joint(JointArgs),
}

#[derive(Debug, Args)]
pub struct ConfigPath {
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct InputArgs {
    pub input: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Room size in metres, e.g. 9x8x7.
    #[arg(long, value_parser = commands::parse_dims)]
    pub dims: [f64; 3],
    #[arg(long)]
    pub t60: f64,
    #[arg(long, default_value_t = 8000)]
    pub fs: u32,
    /// Source position x,y,z (random placement when omitted).
    #[arg(long, value_parser = commands::parse_point)]
    pub source: Option<[f64; 3]>,
    #[arg(long, value_parser = commands::parse_point)]
    pub mic: Option<[f64; 3]>,
    /// Source-mic distance for random placement.
    #[arg(long, default_value_t = 1.0)]
    pub distance: f64,
    #[arg(long, default_value_t = 0.5)]
    pub clearance: f64,
    #[arg(long)]
    pub max_order: Option<u32>,
    /// Use sqrt(1 - alpha) instead of the calibrated reflection coefficient.
    #[arg(long)]
    pub sabine: bool,
}

#[derive(Debug, Args)]
pub struct TrainT60Args {
    #[arg(long)]
    pub config: PathBuf,
    /// Restrict training to these grid values; they become the classes.
    #[arg(long, value_delimiter = ',')]
    pub t60: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct JointArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub freeze_t60_trunk: bool,
}

#[derive(Debug, Args)]
pub struct EnhanceArgs {
    pub input: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// T60 or joint checkpoint; the configured joint checkpoint by default.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Subtract the ground-truth late magnitude instead of running a model.
    #[arg(long)]
    pub oracle: bool,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Report file stem inside the output directory.
    #[arg(long, default_value = "report")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct ExportPairsArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub oracle: bool,
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Debug, Args)]
pub struct ExportPenultimateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// `full` or `desk`.
    #[arg(long, default_value = "desk")]
    pub preset: String,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let argv: Vec<String> = std::env::args().collect();
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::error!("cannot configure {n} workers: {e}");
            return ExitCode::from(2);
        }
    }
    let mut ctx = Ctx::new(&cli, argv);
    let result = commands::dispatch(&cli.command, &mut ctx);
    let code = match &result {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e:#}");
            record::exit_code(e)
        }
    };
    if let Err(e) = ctx.write(result.as_ref().err()) {
        log::error!("could not write run record: {e:#}");
        return ExitCode::from(1);
    }
    ExitCode::from(code)
}
