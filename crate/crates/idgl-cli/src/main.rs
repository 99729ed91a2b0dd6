//! `idgl`: train and probe graph-structure-learning models from the shell.

mod commands;
mod config;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "idgl", version, about = "Iterative graph structure learning")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train on a named dataset and report dev/test accuracy per seed.
    Train(commands::TrainArgs),
    /// Retrain under random edge deletion or insertion at given rates.
    Attack(commands::AttackArgs),
    /// Time dense vs anchor forward passes over a node-count sweep.
    BenchScaling(commands::BenchArgs),
    /// Finite-difference audit of every backward rule and the full loss.
    Gradcheck(commands::GradcheckArgs),
    /// Per-iteration convergence trace plus a fixed-iteration sweep.
    Trace(commands::TraceArgs),
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().cmd {
        Cmd::Train(args) => commands::cmd_train(args),
        Cmd::Attack(args) => commands::cmd_attack(args),
        Cmd::BenchScaling(args) => commands::cmd_bench_scaling(args),
        Cmd::Gradcheck(args) => commands::cmd_gradcheck(args),
        Cmd::Trace(args) => commands::cmd_trace(args),
    }
}
