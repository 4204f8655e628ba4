use clap::{Parser, Subcommand};

use cascades_cli::{
    cmd_compare, cmd_evaluate, cmd_fit, cmd_graph_fit, cmd_simulate, CompareArgs, EvaluateArgs, FitArgs,
    GraphFitArgs, SimulateArgs,
};

/// Simulate, fit and compare cascades of Poisson processes.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw events and their true parents from a model.
    Simulate(SimulateArgs),
    /// Fit one model with EM and write it with its likelihood trace.
    Fit(FitArgs),
    /// Log-likelihood of every configured model on a dataset, without fitting.
    Evaluate(EvaluateArgs),
    /// Fit every configured model on a train split and tabulate train and test likelihood.
    Compare(CompareArgs),
    /// Fit per-node models over a graph with shared hyperparameters.
    GraphFit(GraphFitArgs),
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Compare(a) => cmd_compare(a),
        Command::GraphFit(a) => cmd_graph_fit(a),
    };
    match result {
        Ok(summary) => println!("{summary}"),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
