//! Command-line front end: argument parsing, exit codes and the commands.

mod commands;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use capsule_detector::Error;

pub use commands::run;

#[derive(Debug, Parser)]
#[command(name = "capsule-detector", version, about = "Capsule-network detector for manipulated images and video frames")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by commands that read a run configuration.
#[derive(Clone, Debug, Default, Args)]
pub struct Overrides {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Manifest (JSON lines), overriding `data.manifest`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of primary capsules.
    #[arg(long)]
    pub capsules: Option<usize>,
    /// Number of output classes.
    #[arg(long)]
    pub classes: Option<usize>,
    /// Square side inputs are resized to.
    #[arg(long)]
    pub input_size: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on the manifest's train split, selecting on its val split.
    Train {
        #[command(flatten)]
        overrides: Overrides,
        /// Output directory for checkpoints and the epoch log; overrides
        /// `io.checkpoint_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides `train.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a split and write per-unit scores, metrics and ROC curves.
    Eval {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report directory; overrides `io.report_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Print class probabilities for images as JSON lines.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image files or directories of images.
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
    /// Write a grayscale saliency heatmap for one class.
    Saliency {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Class index or name.
        #[arg(long)]
        class: String,
        /// PNG file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the architecture and parameter counts.
    Inspect {
        /// Describe a trained model; otherwise a fresh one built from the
        /// flags.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        capsules: usize,
        #[arg(long, default_value_t = 2)]
        classes: usize,
    },
    /// Generate a synthetic texture dataset with a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = TaskArg::Binary)]
        task: TaskArg,
        #[arg(long, default_value_t = 100)]
        size: usize,
        /// Train groups per class.
        #[arg(long, default_value_t = 20)]
        groups: usize,
        #[arg(long, default_value_t = 5)]
        frames: usize,
        /// Val and test groups per class.
        #[arg(long, default_value_t = 5)]
        eval_groups: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Binary,
    FourWay,
}

/// Process exit status and error kind for a library error.
pub fn exit_code(e: &Error) -> (u8, &'static str) {
    match e {
        Error::Config(_) | Error::Parameter(_) => (2, "config"),
        Error::Data(_) | Error::Io { .. } | Error::Load(_) | Error::Format(_) | Error::Dimension { .. } => (3, "data"),
        Error::Numerical(_) | Error::Tape(_) => (4, "numerical"),
    }
}
