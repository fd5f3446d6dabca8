//! `smpctl`: configuration, commands and file output around `smp-core`.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands::Outcome;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "smpctl", version, about = "Simulate, check and optimize boundary-controlled stochastic diffusion")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML configuration file.
    pub config: PathBuf,
    /// Overrides `[rng] seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for path-level parallelism (results do not depend on it).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "smpctl-out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Audit the coefficient hypotheses on random samples.
    Validate(Common),
    /// Simulate paths under the initial control and dump path 0.
    Simulate(Common),
    /// Compare adjoint derivatives with finite differences of the cost.
    GradientCheck {
        #[command(flatten)]
        common: Common,
        /// Number of random control coordinates.
        #[arg(long, default_value_t = 20)]
        coordinates: usize,
        /// Finite-difference step.
        #[arg(long, default_value_t = 1e-5)]
        fd_step: f64,
    },
    /// Projected-gradient minimization of the cost.
    Optimize(Common),
    /// Optimality residual and sufficiency check for a control file.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Control CSV as written by `optimize`.
        #[arg(long)]
        control: PathBuf,
    },
    /// Refinement studies in time step, mesh size and perturbation size.
    Convergence {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 4)]
        levels: usize,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Validate(c) | Command::Simulate(c) | Command::Optimize(c) => c,
            Command::GradientCheck { common, .. }
            | Command::Verify { common, .. }
            | Command::Convergence { common, .. } => common,
        }
    }
}

fn dispatch(cmd: &Command) -> Result<Outcome, CliError> {
    let c = cmd.common();
    match cmd {
        Command::Validate(_) => commands::validate(&c.config, c.seed, &c.out),
        Command::Simulate(_) => commands::simulate(&c.config, c.seed, &c.out),
        Command::GradientCheck { coordinates, fd_step, .. } => {
            commands::gradient_check_cmd(&c.config, c.seed, &c.out, *coordinates, *fd_step)
        }
        Command::Optimize(_) => commands::optimize(&c.config, c.seed, &c.out),
        Command::Verify { control, .. } => commands::verify(&c.config, c.seed, &c.out, control),
        Command::Convergence { levels, .. } => commands::convergence(&c.config, c.seed, &c.out, *levels),
    }
}

fn execute(cmd: &Command) -> Result<Outcome, CliError> {
    match cmd.common().workers {
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build()?.install(|| dispatch(cmd)),
        None => dispatch(cmd),
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit status: 0 success, 1 failed check or runtime
/// error, 2 usage error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli.command) {
        Ok(Outcome::Pass) => 0,
        Ok(Outcome::Fail) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
