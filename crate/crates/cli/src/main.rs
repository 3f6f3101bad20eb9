use clap::{Parser, Subcommand};

mod evaluate;
mod generate;
mod sweep;
mod train;
mod util;

#[derive(Parser)]
#[command(
    name = "fairbranch",
    version,
    about = "Multi-task training that branches the network to contain accuracy and fairness conflicts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted task families and group bias.
    Generate(generate::GenerateArgs),
    /// Train a model and write a reproducible run directory.
    Train(train::TrainArgs),
    /// Score a checkpoint against single-task baseline runs.
    Evaluate(evaluate::EvaluateArgs),
    /// Train and evaluate once per similarity threshold in a list.
    Sweep(sweep::SweepArgs),
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Generate(args) => generate::run(&args),
        Command::Train(args) => train::run(&args),
        Command::Evaluate(args) => evaluate::run(&args),
        Command::Sweep(args) => sweep::run(&args),
    };
    if let Err(e) = outcome {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
