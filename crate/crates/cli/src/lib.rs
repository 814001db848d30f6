//! Command-line harness: train, test, eval and cover on the gridworld family.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;

use clap::Parser;

use config::{Cli, Command, RunConfig};
use safemeta_core::Error;

/// Process exit status for a failed command.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<Error>() {
        Some(
            Error::FeasibilityFailure { .. }
            | Error::TrainingDidNotConverge { .. }
            | Error::Infeasible { .. }
            | Error::Unbounded
            | Error::IterationLimit(_)
            | Error::SingularSystem,
        ) => 2,
        _ => 1,
    }
}

/// Parses `args` and runs the command, returning the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn execute(command: &Command) -> anyhow::Result<()> {
    let cfg = RunConfig::resolve(command.common())?;
    match command {
        Command::Train(_) => {
            let b = commands::cmd_train(&cfg)?;
            println!(
                "|U| = {}, rounds = {}, final statistic = {:.6}, min v_s = {:.6}",
                b.tuples.len(),
                b.log.rounds.len(),
                b.log.final_statistic(),
                b.log.feasibility_margin
            );
            println!("bundle written to {}", cfg.bundle_path().display());
        }
        Command::Test(_) => {
            let out = commands::cmd_test(&cfg)?;
            for (alg, arm) in &out.summary.arms {
                println!(
                    "{:<13} regret_r {:.3} ± {:.3}  regret_c {:.3} ± {:.3}  violations {}",
                    alg.as_str(),
                    arm.final_regret_r.mean,
                    arm.final_regret_r.std,
                    arm.final_regret_c.mean,
                    arm.final_regret_c.std,
                    arm.safety_violations
                );
            }
        }
        Command::Eval { noise, .. } => println!("{}", commands::cmd_eval(&cfg, *noise)?),
        Command::Cover(_) => {
            println!("eps,delta,n_samples,estimate");
            for r in commands::cmd_cover(&cfg)? {
                println!("{},{},{},{}", r.eps, r.delta, r.n_samples, r.estimate);
            }
        }
    }
    Ok(())
}
