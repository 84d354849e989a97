//! Subcommand implementations. Each `run` returns the process exit code on
//! success so non-convergence (3) and failed assertions (1) can still write
//! their artifacts before the process ends.

pub mod bsc;
pub mod coin;
pub mod dataset;
pub mod embed;
pub mod gradcheck;
pub mod ssl;
pub mod training;
pub mod transfer;
pub mod two_stage;

use clap::Subcommand;

use refprior::Result;

#[derive(Subcommand)]
pub enum Command {
    /// Solve the order-n binomial reference prior on a parameter grid.
    Coin(coin::CoinArgs),
    /// Solve the two-stage binomial prior and compare with single-stage.
    TwoStageCoin(two_stage::TwoStageArgs),
    /// Check the solver against the analytic binary-channel capacity.
    Bsc(bsc::BscArgs),
    /// Train a particle ensemble semi-supervised, plus a supervised baseline.
    Ssl(ssl::SslArgs),
    /// Train a particle ensemble to transfer between class subsets.
    Transfer(transfer::TransferArgs),
    /// Embed particle checkpoints by the predictions they make.
    Embed(embed::EmbedArgs),
    /// Audit analytic network gradients against finite differences.
    Gradcheck(gradcheck::GradcheckArgs),
}

pub fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Coin(args) => coin::run(args),
        Command::TwoStageCoin(args) => two_stage::run(args),
        Command::Bsc(args) => bsc::run(args),
        Command::Ssl(args) => ssl::run(args),
        Command::Transfer(args) => transfer::run(args),
        Command::Embed(args) => embed::run(args),
        Command::Gradcheck(args) => gradcheck::run(args),
    }
}
