//! `paraformer` command-line interface.

mod commands;
mod config;
mod palette;
mod svg;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use paraformer::{AblationMode, Preset, Split};

/// Error that maps to exit code 2: bad flags, missing inputs, output collisions.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    Paper,
    Desk,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Paper => Preset::Paper,
            PresetArg::Desk => Preset::Desk,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Full,
    CnnOnly,
    TransformerOnly,
    NoPlat,
}

impl From<ModeArg> for AblationMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Full => AblationMode::Full,
            ModeArg::CnnOnly => AblationMode::CnnOnly,
            ModeArg::TransformerOnly => AblationMode::TransformerOnly,
            ModeArg::NoPlat => AblationMode::NoPlat,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "paraformer", version, about = "Train land-cover segmentation from coarse labels")]
struct Cli {
    /// TOML configuration with [scene], [degrade], [model], [train] and [eval] sections
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override every seed in the configuration
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Output directory
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Overwrite existing outputs
    #[arg(long, global = true)]
    force: bool,

    /// Model size preset
    #[arg(long, global = true, value_enum)]
    preset: Option<PresetArg>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic benchmark and write DIR/manifest.json
    Synth,

    /// Train on a manifest's training split; writes a checkpoint and history.csv
    Train {
        /// Benchmark manifest
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
        /// Continue from a checkpoint, restoring optimizer and schedule state
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
        /// Epoch budget (overrides [train] max_epochs and the checkpoint's)
        #[arg(long, value_name = "N")]
        epochs: Option<usize>,
        /// Ablation mode (overrides [model] mode)
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },

    /// Score a checkpoint on a split; writes the report and prediction PNGs
    Eval {
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
        /// Split to score (overrides [eval] split)
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
        /// Inference window in pixels (overrides [eval] window)
        #[arg(long, value_name = "PX")]
        window: Option<usize>,
    },

    /// Label one image with a checkpoint
    Predict {
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        /// RGB PNG
        #[arg(long, value_name = "PNG")]
        image: PathBuf,
        /// Grayscale PNG holding the fourth band
        #[arg(long, value_name = "PNG")]
        band4: Option<PathBuf>,
        /// Inference window in pixels (overrides [eval] window)
        #[arg(long, value_name = "PX")]
        window: Option<usize>,
    },

    /// Train and score every ablation mode under several seeds
    Ablate {
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
        /// Seeds per mode (overrides [eval] seeds)
        #[arg(long, value_name = "N")]
        seeds: Option<usize>,
        /// Modes to run, comma separated
        #[arg(long, value_enum, value_delimiter = ',')]
        modes: Option<Vec<ModeArg>>,
    },

    /// Render loss, learning-rate, mask-coverage and IoU figures plus tile panels
    Report {
        /// history.csv written by `train`
        #[arg(long, value_name = "CSV")]
        history: PathBuf,
        /// Report JSON written by `eval`; repeatable
        #[arg(long = "eval", value_name = "JSON")]
        evals: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
