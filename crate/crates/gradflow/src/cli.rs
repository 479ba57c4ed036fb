//! Argument parsing and exit codes.
//!
//! Exit status is `0` on success, `1` when a `verify` or `validate-bsde`
//! check fails and `2` on any runtime error, including a non-finite value
//! in an output.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::{self, AppError, Check, Outcome};
use crate::config::{parse_config, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "gradflow", version, about = "Successive approximations and gradient flows for stochastic control")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory, overriding `output.directory`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `ensemble.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `ensemble.n_paths`.
    #[arg(long)]
    pub paths: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Successive approximations with backtracking; writes msa_trace.csv.
    RunMsa(Common),
    /// Discrete gradient flow; writes flow_trace.csv.
    RunFlow(Common),
    /// Runs one convergence check.
    Verify {
        #[arg(value_enum)]
        check: Check,
        #[command(flatten)]
        common: Common,
    },
    /// Compares the regression adjoint with the analytic one.
    ValidateBsde(Common),
    /// Prints the canonical config with every default filled in.
    Defaults {
        /// Problem kind to put in the printed config.
        #[arg(long, default_value = "lq_modified")]
        kind: String,
    },
}

pub fn default_config_text(kind: &str) -> Result<String, AppError> {
    let cfg = parse_config(&format!(r#"{{"problem":{{"kind":"{kind}"}}}}"#))?;
    Ok(cfg.to_canonical_json())
}

fn dispatch(command: Command) -> Result<Outcome, AppError> {
    let load = |c: &Common| -> Result<RunConfig, AppError> {
        commands::load_config(&c.config, c.out.as_deref(), c.seed, c.paths)
    };
    match command {
        Command::RunMsa(c) => commands::run_msa_cmd(&load(&c)?),
        Command::RunFlow(c) => commands::run_flow_cmd(&load(&c)?),
        Command::Verify { check, common } => commands::verify_cmd(&load(&common)?, check),
        Command::ValidateBsde(c) => commands::validate_bsde_cmd(&load(&c)?),
        Command::Defaults { kind } => {
            print!("{}", default_config_text(&kind)?);
            Ok(Outcome::Ok)
        }
    }
}

pub fn run(cli: Cli) -> ExitCode {
    match dispatch(cli.command) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => {
            eprintln!("check failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
