//! `decamel`: generate synthetic multi-view data, train asymmetric metrics,
//! evaluate cross-view retrieval and export 2-D projections.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use decamel::eval::ShotMode;
use decamel::extractor::ExtractorKind;
use decamel::pipeline::InitMode;
use decamel::Error;
use serde::Deserialize;

#[derive(Debug, Parser)]
#[command(name = "decamel", version, about = "Unsupervised asymmetric metric learning for cross-view matching")]
pub struct Cli {
    /// TOML file with a top-level `seed` and one section per command.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; required here or in the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output path (a directory for export-projection).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic multi-view dataset as CSV.
    Generate(GenerateArgs),
    /// Fit the metric initialisation and run joint training.
    Train(TrainArgs),
    /// Cross-view retrieval report for a trained model.
    Eval(EvalArgs),
    /// 2-D PCA coordinates of raw and shared-space features.
    ExportProjection(ExportArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub identities: Option<usize>,
    #[arg(long)]
    pub views: Option<usize>,
    /// Images per identity per view.
    #[arg(long)]
    pub images: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub spread: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub distortion: Option<f64>,
    /// Share view distortions among this many families.
    #[arg(long)]
    pub families: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FreezeArg {
    Metric,
    Extractor,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training dataset CSV.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Loss trace CSV; defaults to the model path with a `.loss.csv` suffix.
    #[arg(long)]
    pub loss_out: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Number of clusters.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub target_dim: Option<usize>,
    #[arg(long)]
    pub max_alternations: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub refresh_period: Option<usize>,
    #[arg(long)]
    pub extractor: Option<ExtractorKind>,
    /// Hidden width of the MLP extractor.
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub init: Option<InitMode>,
    /// One transform shared by all views.
    #[arg(long)]
    pub symmetric: bool,
    #[arg(long, value_enum)]
    pub freeze: Option<FreezeArg>,
    /// Group the views into this many prototypes.
    #[arg(long)]
    pub view_clusters: Option<usize>,
    /// Use view clusters for the initialisation only.
    #[arg(long)]
    pub ivc: bool,
    #[arg(long)]
    pub labels_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Labelled test dataset CSV.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// `single` or `multi`.
    #[arg(long)]
    pub mode: Option<ShotMode>,
    #[arg(long)]
    pub repetitions: Option<usize>,
    #[arg(long)]
    pub max_rank: Option<usize>,
    /// 1-based views unknown to the model; they are routed to the nearest
    /// view prototype and only their images are used as probes.
    #[arg(long, value_delimiter = ',')]
    pub unseen_views: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Argument(_) => 2,
        Error::Numerical(_) | Error::Training { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
