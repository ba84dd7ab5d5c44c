//! Command-line front end: configuration, checkpoints and the experiment
//! subcommands.

pub mod checkpoint;
pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use vstb::agent::SupervisedMode;
use vstb::attention::FeedbackVariant;
use vstb::environment::Location;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(name = "vstb", version, about = "Recurrent vision transformer change-detection workbench")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Config file and seed override.
#[derive(Debug, Clone, Args, Default)]
pub struct Common {
    /// Config file (`key = value`, optional `[section]` headers).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Evaluation grid; unset fields fall back to the config.
#[derive(Debug, Clone, Args, Default)]
pub struct Grid {
    /// Trials per grid cell.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Cue validities, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub validity: Vec<f64>,
    /// Cue positions (S1..S4), comma separated.
    #[arg(long = "cue-pos", value_delimiter = ',')]
    pub cue_pos: Vec<Location>,
    /// Orientation changes in degrees, comma separated.
    #[arg(long = "delta-grid", value_delimiter = ',', allow_hyphen_values = true)]
    pub delta_grid: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AnalyzeKind {
    Psychometric,
    Sdt,
    Attention,
    Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProbeLabels {
    /// Change location S1..S4, or 4 for no change.
    Location,
    /// 1 for change trials, 0 otherwise.
    Change,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain the patch autoencoder and write an encoder checkpoint.
    PretrainVae {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an agent; writes a checkpoint and a per-episode CSV log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Encoder checkpoint from `pretrain-vae`; pretrains inline if absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        variant: Option<FeedbackVariant>,
        /// Train a supervised decoder instead of the actor-critic heads.
        #[arg(long)]
        supervised: Option<SupervisedMode>,
    },
    /// Play a grid of trials greedily and write a trial log.
    Eval {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        grid: Grid,
    },
    /// Like `eval`, with attention forcing (e.g. `zero:change@t>=5`).
    Perturb {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        grid: Grid,
        /// `;`-separated forcing entries such as `max:S1@t=5`, `uniform@t=*`.
        #[arg(long)]
        force: String,
    },
    /// Summarize a trial log as CSV.
    Analyze {
        kind: AnalyzeKind,
        /// Trial log written by `eval` or `perturb`.
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Keep only trials with these validities.
        #[arg(long, value_delimiter = ',')]
        validity: Vec<f64>,
        /// Keep only trials with these cue positions.
        #[arg(long = "cue-pos", value_delimiter = ',')]
        cue_pos: Vec<Location>,
    },
    /// Decoding probes on memory states.
    Probe {
        #[command(subcommand)]
        command: ProbeCommand,
    },
    /// Write trial frames as binary PGM images.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long = "cue-pos", default_value = "S1")]
        cue_pos: Location,
        #[arg(long, default_value_t = 1.0)]
        validity: f64,
        /// Orientation change; 0 renders a no-change trial.
        #[arg(long, default_value_t = 30.0, allow_hyphen_values = true)]
        delta: f64,
        /// Single step to render; all seven when absent.
        #[arg(long)]
        t: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum ProbeCommand {
    /// Dump memory states of a trial grid with their labels.
    Export {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        grid: Grid,
        /// Step whose memory state is exported.
        #[arg(long, default_value_t = 5)]
        t: usize,
        #[arg(long, value_enum, default_value_t = ProbeLabels::Location)]
        labels: ProbeLabels,
    },
    /// Train a probe on the training split of a dataset.
    Train {
        dataset: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Confusion matrix of a probe on the held-out split.
    Eval {
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Evaluate on every row instead of the held-out split.
        #[arg(long)]
        all: bool,
        /// Write row-normalized rates instead of counts.
        #[arg(long)]
        normalize: bool,
    },
}

/// Runs one parsed command line.
pub fn run(cli: Cli) -> vstb::Result<()> {
    commands::dispatch(cli.command)
}

/// The one-line diagnostic printed on failure: `error: <kind>: <message>`.
pub fn error_line(e: &vstb::Error) -> String {
    let kind = match e {
        vstb::Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => "not-found",
        other => other.kind(),
    };
    format!("error: {kind}: {}", e.to_string().replace(['\n', '\r'], " "))
}
