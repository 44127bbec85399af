//! `paddyspec`: batch front end for the registration, calibration, NDVI,
//! dataset and training stages.
//!
//! Exit codes: 0 success, 1 data or processing failure, 2 usage or config
//! error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use paddyspec::training::InputMode;

#[derive(Parser, Debug)]
#[command(name = "paddyspec", version, about = "Rice disease pipeline: register, calibrate, fuse NDVI, train ResNet18")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Pipeline config (TOML). Relative paths inside resolve against its directory.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-sample stages; 1 is fully deterministic.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Validate inputs and report what would run, writing nothing.
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// Overrides train.input_mode.
    #[arg(long, global = true, value_parser = parse_mode)]
    pub input_mode: Option<InputMode>,
}

fn parse_mode(s: &str) -> Result<InputMode, String> {
    s.parse().map_err(|e: paddyspec::Error| e.to_string())
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Register every RGB frame onto its R-G-NIR partner.
    Register {
        /// Manifest CSV to process instead of scanning the data root.
        #[arg(long)]
        pairs: Option<PathBuf>,
    },
    /// Fit per-band reflectance calibration for every capture session.
    Calibrate,
    /// Calibrate R-G-NIR frames, compute NDVI and write fused training samples.
    Ndvi {
        #[arg(long)]
        pairs: Option<PathBuf>,
    },
    /// Manifest and fold management.
    Dataset {
        #[command(subcommand)]
        action: DatasetCmd,
    },
    /// Train on all folds but one, or run the paired cross-validation.
    Train {
        /// Held-out fold.
        #[arg(long, default_value_t = 0, conflicts_with = "cv")]
        fold: usize,
        /// Cross-validate both input modes on every fold.
        #[arg(long)]
        cv: bool,
    },
    /// Score a checkpoint on a held-out fold.
    Eval {
        /// Defaults to the checkpoint `train --fold <fold>` writes.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
    /// Classify one RGB / R-G-NIR pair.
    Predict {
        #[arg(long)]
        rgb: PathBuf,
        #[arg(long)]
        rgnir: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Band calibration for the R-G-NIR frame (`calibrate` output).
        /// Without it DN values are used as reflectance.
        #[arg(long)]
        calibration: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable op and the full network.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        trials: usize,
        /// Skip the whole-network check (several minutes).
        #[arg(long)]
        skip_network: bool,
    },
    /// Config helpers.
    Config {
        #[command(subcommand)]
        action: ConfigCmd,
    },
    /// Generate synthetic data.
    Synth {
        #[command(subcommand)]
        action: SynthCmd,
    },
}

#[derive(Subcommand, Debug)]
pub enum DatasetCmd {
    /// Scan the data root and write the manifest.
    Build,
    /// Assign stratified folds to the manifest.
    Split {
        /// Overrides dataset.k.
        #[arg(long)]
        k: Option<usize>,
    },
}

#[derive(Subcommand, Debug)]
pub enum ConfigCmd {
    PrintDefaults,
}

#[derive(Subcommand, Debug)]
pub enum SynthCmd {
    /// Write a data root with image pairs, sessions and calibration targets.
    Fixtures {
        #[arg(long)]
        out: PathBuf,
        /// Samples per class: blast,brown_spot,healthy.
        #[arg(long, value_delimiter = ',', num_args = 1, default_values_t = [4, 3, 2])]
        per_class: Vec<usize>,
        /// Side of both frames in pixels.
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 2)]
        sessions: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
