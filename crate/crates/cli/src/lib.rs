//! Command-line front end for the `pgseg` segmentation toolkit.
//!
//! The binary is a thin wrapper around [`run`]; everything here is public so
//! tests can drive commands in-process.

pub mod commands;
pub mod config;
pub mod error;
pub mod plot;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::{Overrides, RunConfig};
use crate::error::CliResult;

#[derive(Debug, Parser)]
#[command(name = "pgseg", version, about = "Point-cloud pothole segmentation: generate, train, evaluate, segment")]
pub struct Cli {
    /// TOML run file; every key is optional.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the run file's seed.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Overrides the run file's output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Relaxes the five-stage 512x ladder and uses a small default network.
    #[arg(long, global = true)]
    pub test_mode: bool,
    /// Suppress progress output.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate labeled synthetic road clouds and a manifest.
    Gen {
        #[arg(long)]
        count: Option<usize>,
        /// `xyzl` or `ply`.
        #[arg(long)]
        format: Option<String>,
    },
    /// Train a network; writes a CSV log and checkpoints.
    Train {
        /// Continue from `<out>/checkpoints/last.pgck`.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        no_feature_augmenter: bool,
    },
    /// Score a checkpoint on labeled clouds.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Cloud files or directories; defaults to the configured test split.
        #[arg(long)]
        data: Vec<PathBuf>,
    },
    /// Label a cloud with a checkpoint's predictions.
    Segment {
        #[arg(long)]
        checkpoint: PathBuf,
        input: PathBuf,
        output: PathBuf,
    },
    /// Train with and without the feature augmenter on matched seeds.
    Ablate {
        /// Also write an SVG chart of the training accuracy curves.
        #[arg(long)]
        svg: bool,
    },
}

pub fn resolve_config(cli: &Cli) -> CliResult<RunConfig> {
    let base = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    base.resolve(&Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        test_mode: cli.test_mode,
    })
}

pub fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = resolve_config(&cli)?;
    let verbose = !cli.quiet;
    match &cli.command {
        Command::Gen { count, format } => {
            let rows = commands::gen(&cfg, *count, format.as_deref())?;
            if verbose {
                eprintln!("wrote {} clouds to {}", rows.len(), cfg.out_dir().display());
            }
        }
        Command::Train {
            resume,
            no_feature_augmenter,
        } => {
            if *no_feature_augmenter {
                cfg.network.feature_augmenter = Some(false);
            }
            let outcome = commands::train(&cfg, *resume, verbose)?;
            if let Some(last) = outcome.log.records.last() {
                println!(
                    "trained {} epochs; parameters {}; final loss {:.5}; train OA {:.4}",
                    last.epoch, outcome.parameter_count, last.mean_loss, last.train_oa
                );
            }
        }
        Command::Eval { checkpoint, data } => {
            let report = commands::eval(&cfg, checkpoint, data)?;
            print!("{}", commands::format_report(&report));
        }
        Command::Segment {
            checkpoint,
            input,
            output,
        } => {
            let cloud = commands::segment(&cfg, checkpoint, input, output)?;
            if verbose {
                eprintln!("labeled {} points -> {}", cloud.len(), output.display());
            }
        }
        Command::Ablate { svg } => {
            let o = commands::ablate(&cfg, *svg, verbose)?;
            for (name, t) in [("on", &o.with_fa), ("off", &o.without_fa)] {
                println!(
                    "feature augmenter {name}: parameters {}, last-10 mean train OA {:.4}, last-30 train OA variance {:.3e}",
                    t.parameter_count,
                    commands::tail_mean_accuracy(&t.log, 10),
                    commands::tail_accuracy_variance(&t.log, 30)
                );
            }
        }
    }
    Ok(())
}
