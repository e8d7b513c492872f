//! `ntil`: data generation, training, evaluation, loss inspection and
//! verification for the numerical token integrity loss.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or contract violation,
//! 3 verification failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ntil::data::Task;

mod commands;
mod config;

use config::Overrides;

/// Bad flags, invalid values, unreadable or malformed inputs.
#[derive(Debug)]
pub struct Contract(pub String);

impl std::fmt::Display for Contract {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Contract {}

/// A verification suite found a failing case.
#[derive(Debug)]
pub struct VerificationFailed(pub String);

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for VerificationFailed {}

#[derive(Parser)]
#[command(name = "ntil", version, about = "Numerical token integrity loss toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset as train/test JSONL files.
    GenData {
        #[arg(long)]
        task: Task,
        #[arg(long)]
        n: usize,
        #[arg(long, env = config::SEED_ENV, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Operands are drawn from 0..10^max_digits.
        #[arg(long, default_value_t = 3)]
        max_digits: u32,
        /// Comma-separated operators from + - * /.
        #[arg(long, default_value = "+")]
        ops: String,
        #[arg(long, default_value_t = 0.1)]
        test_fraction: f64,
    },
    /// Train a model; flags override values from the config file.
    Train {
        /// Flat TOML config, or a run manifest to repeat a run.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Greedy-decode a dataset with a checkpoint and report metrics.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the loss breakdown for hand-written digit distributions.
    InspectLoss {
        /// One line of ten probabilities per digit of the target.
        #[arg(long)]
        pred: PathBuf,
        /// Target number, e.g. 0.98.
        #[arg(long)]
        target: String,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        tau: Option<f64>,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Run oracle-backed verification suites.
    Check {
        /// grads, emd, gumbel, spans or all.
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train once per hyperparameter cell and collect metrics into a CSV.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated subset of alpha,beta,sigma,lambda to vary.
        #[arg(long, default_value = "alpha,beta,sigma,lambda")]
        params: String,
        /// Cartesian product of the ranges instead of one parameter at a time.
        #[arg(long)]
        full: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use ntil::data::DataError;
    use ntil::loss::LossError;
    use ntil::model::ModelError;
    use ntil::train::TrainError;
    for cause in err.chain() {
        if cause.is::<VerificationFailed>() {
            return 3;
        }
        if cause.is::<Contract>() || cause.is::<ntil::vocab::VocabError>() {
            return 2;
        }
        let contract = matches!(
            cause.downcast_ref::<TrainError>(),
            Some(
                TrainError::Config(_)
                    | TrainError::Encode { .. }
                    | TrainError::EmptyDataset
                    | TrainError::Loss(LossError::Param { .. })
            )
        ) || matches!(cause.downcast_ref::<LossError>(), Some(LossError::Param { .. } | LossError::Contract(_)))
            || matches!(cause.downcast_ref::<DataError>(), Some(DataError::Invalid(_) | DataError::Parse { .. }))
            || matches!(
                cause.downcast_ref::<ModelError>(),
                Some(ModelError::Config(_) | ModelError::Format(_) | ModelError::Overlength { .. } | ModelError::BadToken(..))
            );
        if contract {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData {
            task,
            n,
            seed,
            out,
            max_digits,
            ops,
            test_fraction,
        } => commands::gen_data(task, n, seed, &out, max_digits, &ops, test_fraction),
        Command::Train {
            config,
            resume,
            overrides,
        } => commands::train(config.as_deref(), resume.as_deref(), &overrides),
        Command::Eval { checkpoint, data, out } => commands::eval(&checkpoint, &data, &out),
        Command::InspectLoss {
            pred,
            target,
            alpha,
            beta,
            sigma,
            lambda,
            tau,
            json,
        } => commands::inspect_loss(&pred, &target, [alpha, beta, sigma, lambda, tau], json),
        Command::Check { suite, seed } => commands::check(&suite, seed),
        Command::Sweep {
            config,
            params,
            full,
            overrides,
        } => commands::sweep(config.as_deref(), &params, full, &overrides),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

#[cfg(test)]
mod tests {
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        super::Cli::command().debug_assert();
    }
}
