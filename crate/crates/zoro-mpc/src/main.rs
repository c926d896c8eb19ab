//! Command-line front end. All the actual work lives in the library
//! (`runner::run_experiment`); this binary only parses arguments, applies
//! overrides, and maps errors to exit codes (2 = bad config, 3 = solver
//! non-convergence, 1 = everything else).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use zoro_mpc::runner::{run_experiment, Command};
use zoro_mpc::scenario::{load_scenario, ControllerKind, ScenarioConfig};
use zoro_mpc::Error;

#[derive(Parser)]
#[command(
    name = "zoro-mpc",
    version,
    about = "Tube-based robust MPC for differential-drive robots"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Sub,
}

#[derive(Args)]
struct Common {
    /// Scenario config, JSON (see scenarios/ for examples).
    #[arg(long, value_name = "FILE")]
    scenario: PathBuf,

    /// Output directory, created if missing.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,

    /// Override the config's RNG seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Override the configured controller: zoro | nominal | exact | scalar-tube.
    #[arg(long, value_name = "KIND")]
    controller: Option<String>,

    /// Worker threads for Monte Carlo batches (the ZORO_THREADS environment
    /// variable takes precedence over this flag).
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Sub {
    /// Run the closed loop and write per-step CSV logs plus a metrics summary.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Number of Monte Carlo rollouts (independent noise streams).
        #[arg(long, default_value_t = 1)]
        runs: usize,
    },
    /// Solve the first optimal control problem to convergence and dump the solution.
    Solve {
        #[command(flatten)]
        common: Common,
    },
    /// Run every controller (zoro, nominal, exact, scalar-tube) on one scenario.
    Compare {
        #[command(flatten)]
        common: Common,
    },
    /// Compare the converged frozen-backoff solution against the exact-robust
    /// solver and report the disregarded gradient term.
    #[command(name = "verify-theorem1")]
    VerifyTheorem1 {
        #[command(flatten)]
        common: Common,
    },
    /// Estimate process-noise bounds from a closed-loop rollout.
    EstimateNoise {
        #[command(flatten)]
        common: Common,
    },
    /// Time the real-time step against the exact solver on a live closed loop.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Number of timed solver calls.
        #[arg(long, default_value_t = 100)]
        samples: usize,
    },
}

fn split(cmd: Sub) -> (Common, Command) {
    match cmd {
        Sub::Simulate { common, runs } => (common, Command::Simulate { runs }),
        Sub::Solve { common } => (common, Command::Solve),
        Sub::Compare { common } => (common, Command::Compare),
        Sub::VerifyTheorem1 { common } => (common, Command::VerifyTheorem1),
        Sub::EstimateNoise { common } => (common, Command::EstimateNoise),
        Sub::Bench { common, samples } => (common, Command::Bench { samples }),
    }
}

fn parse_controller(name: &str) -> Result<ControllerKind, Error> {
    match name {
        "zoro" => Ok(ControllerKind::Zoro),
        "nominal" => Ok(ControllerKind::Nominal),
        "exact" => Ok(ControllerKind::Exact),
        "scalar-tube" => Ok(ControllerKind::ScalarTube),
        other => Err(Error::Validation(format!(
            "unknown controller '{other}' (expected zoro | nominal | exact | scalar-tube)"
        ))),
    }
}

/// ZORO_THREADS wins over --threads; unset means rayon's default.
fn configure_threads(flag: Option<usize>) -> Result<(), Error> {
    let from_env = match std::env::var("ZORO_THREADS") {
        Ok(v) => Some(v.parse::<usize>().map_err(|_| {
            Error::Validation(format!("ZORO_THREADS must be a positive integer, got '{v}'"))
        })?),
        Err(_) => None,
    };
    if let Some(n) = from_env.or(flag) {
        if n == 0 {
            return Err(Error::Validation(
                "thread count must be at least 1".to_string(),
            ));
        }
        // Ignore the error from double initialization: the pool can only be
        // set once per process, and the first setting wins.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn apply_overrides(cfg: &mut ScenarioConfig, common: &Common) -> Result<(), Error> {
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(name) = &common.controller {
        cfg.controller.kind = parse_controller(name)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    let (common, command) = split(cli.cmd);
    configure_threads(common.threads)?;
    let mut cfg = load_scenario(&common.scenario)?;
    apply_overrides(&mut cfg, &common)?;
    let files = run_experiment(&cfg, &command, &common.out)?;
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
