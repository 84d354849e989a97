//! Command-line front end for the reference-prior toolkit.
//!
//! Every subcommand is deterministic given its seed and configuration:
//! rerunning with the same inputs produces byte-identical artifacts, so no
//! artifact ever records wall-clock time or machine state.

mod artifacts;
mod commands;
mod config;
mod svg;

use clap::Parser;

#[derive(Parser)]
#[command(
    name = "refprior",
    version,
    about = "Reference priors: exact solvers, particle ensembles, and prediction embeddings"
)]
struct Cli {
    #[command(subcommand)]
    command: commands::Command,
}

/// Exit codes: 0 success, 1 assertion failure, 2 configuration or usage
/// error, 3 non-convergence (artifacts are still written).
fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { 2 } else { 0 };
            let _ = err.print();
            std::process::exit(code);
        }
    };
    match commands::dispatch(cli.command) {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(exit_code(&err));
        }
    }
}

fn exit_code(err: &refprior::Error) -> i32 {
    match err {
        refprior::Error::Numerical { .. } => 1,
        _ => 2,
    }
}
