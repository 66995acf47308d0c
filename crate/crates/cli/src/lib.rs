//! Experiment driver: tree embedding, training, evaluation, spectra and
//! OOD simulation, each writing JSON/CSV/SVG artifacts to an output directory.

pub mod commands;
pub mod config;
pub mod error;
pub mod svg;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "hypstruct", version, about = "Hyperbolic structured regularization experiments")]
pub struct Cli {
    /// JSON config for the subcommand; defaults are used when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Fit free vertex coordinates to a hierarchy in ℓ2 and Poincaré space.
    EmbedTree,
    /// Train an encoder with the flat, ℓ2-CPCC or hyperbolic objective.
    Train,
    /// Distortion, CPCC and kNN metrics of a checkpoint on labeled data.
    Eval,
    /// Closed-form and numerical eigenspectra with gap detection.
    Spectra,
    /// Mahalanobis OOD scoring, AUROC and Borda counts.
    Oodsim,
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let out = commands::Output::create(&cli.out)?;
    let config = cli.config.as_deref();
    match cli.command {
        Command::EmbedTree => commands::embed_tree::run(config, cli.seed, &out),
        Command::Train => commands::train::run(config, cli.seed, &out),
        Command::Eval => commands::eval::run(config, cli.seed, &out),
        Command::Spectra => commands::spectra::run(config, cli.seed, &out),
        Command::Oodsim => commands::oodsim::run(config, cli.seed, &out),
    }
}
