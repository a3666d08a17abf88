//! Command-line front end and file formats for `grumpc-core`.

pub mod commands;
pub mod config;
pub mod csvio;
pub mod error;
pub mod weights;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands::Context;
use crate::error::CliResult;

#[derive(Debug, Parser)]
#[command(name = "grumpc", version, about = "Robust MPC with δISS GRU models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Weights file; defaults to `<out>/weights.json`.
    #[arg(long, global = true)]
    pub weights: Option<PathBuf>,
    /// Output directory for every artifact.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate the plant under the excitation signal and write dataset.csv.
    GenData,
    /// Train the GRU model and write the weights file.
    Train,
    /// Print the stability certificate and observer metrics.
    Certify,
    /// Synthesize observer gains and store them in the weights file.
    Gains,
    /// Run the closed loop and write schedule.csv, closed_loop.csv and summary.txt.
    Simulate,
    /// Run the sampling-based verification suite.
    Verify {
        /// Scales the contraction rate under test.
        #[arg(long, hide = true, default_value_t = 1.0)]
        fault_rho_scale: f64,
    },
}

/// Runs a parsed command line and returns what it printed.
pub fn run(cli: Cli) -> CliResult<String> {
    let ctx = Context::new(cli.config, cli.weights, cli.out, cli.seed)?;
    match cli.command {
        Command::GenData => commands::gen_data(&ctx),
        Command::Train => commands::train(&ctx),
        Command::Certify => commands::certify(&ctx),
        Command::Gains => commands::gains(&ctx),
        Command::Simulate => commands::simulate(&ctx),
        Command::Verify { fault_rho_scale } => commands::verify(&ctx, fault_rho_scale),
    }
}
