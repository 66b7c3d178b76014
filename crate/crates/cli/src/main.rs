mod failure;
mod gradcheck;
mod manifest;
mod settings;
mod stationary;
mod train;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::failure::Failure;

#[derive(Parser, Debug)]
#[command(name = "attnlab", version, about = "Hand-built and trained one-layer attention models")]
struct Cli {
    /// JSON object of settings; explicit flags override its keys
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the hand-programmed solutions against their targets
    Verify(verify::Args),
    /// Compare analytic gradients with enumeration, Monte Carlo or finite differences
    Gradcheck(gradcheck::Args),
    /// Evaluate stationarity residuals of the known solution families
    Stationary(stationary::Args),
    /// Train the masked model flavors
    Train(train::Args),
    /// Recompute k^t q similarity from a finished training run
    Similarity(train::SimilarityArgs),
}

fn init_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("ATTNLAB_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|t| *t > 0)
        .ok_or_else(|| Failure::Config(format!("ATTNLAB_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure::Config(format!("cannot build thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), Failure> {
    init_threads()?;
    let config = cli.config.as_deref();
    match cli.command {
        Command::Verify(a) => verify::run(a, config),
        Command::Gradcheck(a) => gradcheck::run(a, config),
        Command::Stationary(a) => stationary::run(a, config),
        Command::Train(a) => train::run(a, config),
        Command::Similarity(a) => train::similarity(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(failure::CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
