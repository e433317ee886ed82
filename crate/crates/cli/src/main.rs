use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

/// Forecast 30-day image engagement from social features.
#[derive(Parser, Debug)]
#[command(name = "popdyn", version, about)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Pipeline config (`key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Master seed; overrides the config and POPDYN_SEED.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Input dataset CSV.
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,

    /// Directory for stage outputs.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Only report errors.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    pub quiet: bool,

    /// More logging; repeat for debug output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset with known prototypes and scales.
    Synth(SynthArgs),
    /// Repair sequences and write scale, popularity score and shape per image.
    Decompose,
    /// Elbow (WSS) and silhouette sweeps over k.
    Diagnose(DiagnoseArgs),
    /// Cluster shapes into prototypes.
    Cluster(ClusterArgs),
    /// Train the shape classifier on the cluster labels.
    TrainShape,
    /// Train the scale regressor.
    TrainScale(ScaleArgs),
    /// Rank candidate feature sets for scale prediction.
    SelectFeatures,
    /// Forecast sequences with the trained stage models.
    Predict,
    /// Run the repeated train/test evaluation protocol.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long, default_value_t = 5)]
    pub prototypes: usize,
    /// Per-day noise as a fraction of the scale.
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    /// Probability of blanking a feature cell or a day before day 30.
    #[arg(long, default_value_t = 0.0)]
    pub missing_rate: f64,
    /// Output CSV (default: <out-dir>/synthetic.csv).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub k_min: Option<usize>,
    #[arg(long)]
    pub k_max: Option<usize>,
    /// Skip the silhouette sweep.
    #[arg(long)]
    pub no_silhouette: bool,
}

#[derive(Args, Debug)]
pub struct ClusterArgs {
    /// kmeans or meanshift.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub bandwidth: Option<f64>,
}

#[derive(Args, Debug)]
pub struct ScaleArgs {
    /// Comma-separated feature names.
    #[arg(long)]
    pub features: Option<String>,
    /// linear or rbf.
    #[arg(long)]
    pub kernel: Option<String>,
    #[arg(long = "C")]
    pub c: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
}

fn init_logging(global: &GlobalArgs) {
    let level = if global.quiet {
        log::LevelFilter::Error
    } else {
        match global.verbose {
            0 => log::LevelFilter::Warn,
            1 => log::LevelFilter::Info,
            _ => log::LevelFilter::Debug,
        }
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(&cli.global);
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} threads: {e}");
            return ExitCode::FAILURE;
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(ToString::to_string).collect();
            eprintln!("error: {}", chain.join(": "));
            ExitCode::FAILURE
        }
    }
}
