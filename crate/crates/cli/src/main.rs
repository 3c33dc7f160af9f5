//! `oslab`: a desk-scale open-set detection laboratory. Trains the toy
//! detector on a synthetic world, evaluates detection files with the full
//! open-set metric suite, builds benchmark splits, verifies gradients, and
//! renders plots. Every command is deterministic given its inputs and seed.

mod artifacts;
mod cmd_eval;
mod cmd_gradcheck;
mod cmd_plot;
mod cmd_split;
mod cmd_train;
mod pca;
mod report;
mod svg;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "oslab", version, about = "Synthetic open-set detection laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the toy detector on the synthetic world and evaluate it.
    Train(cmd_train::TrainArgs),
    /// Score a detection file against ground truth and a class registry.
    Eval(cmd_eval::EvalArgs),
    /// Build a benchmark split from annotation sources.
    Split(cmd_split::SplitArgs),
    /// Check every analytic gradient against finite differences.
    Gradcheck(cmd_gradcheck::GradcheckArgs),
    /// Render an SVG plot along with its data as CSV.
    Plot(cmd_plot::PlotArgs),
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Train(args) => cmd_train::run(&args),
        Command::Eval(args) => cmd_eval::run(&args),
        Command::Split(args) => cmd_split::run(&args),
        Command::Gradcheck(args) => cmd_gradcheck::run(&args),
        Command::Plot(args) => cmd_plot::run(&args),
    }
}
