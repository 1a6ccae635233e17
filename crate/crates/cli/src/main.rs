//! `perceptron`: command-line frontend for the RS solver, state evolution,
//! AMP, the moment functionals, exact enumeration and the constants report.
//!
//! Exit codes: 0 success, 1 usage error, 2 numerical failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{RunConfig, KEYS};

/// Failure classes mapped to exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad arguments or configuration.
    #[error("{0}")]
    Usage(String),
    /// Output could not be written.
    #[error("{0}")]
    Io(String),
    /// A numerical routine failed.
    #[error(transparent)]
    Numerical(#[from] perceptron::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) | Self::Io(_) => 1,
            Self::Numerical(_) => 2,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "perceptron", version, about = "Replica-symmetric analysis of the Ising perceptron")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat key=value config file
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (same as out_dir=...)
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,
    /// Master seed (same as seed=...)
    #[arg(short, long, global = true)]
    seed: Option<u64>,
    /// Worker threads, 0 for all cores (same as threads=...)
    #[arg(short, long, global = true)]
    threads: Option<usize>,
    /// Overrides applied after the config file
    #[arg(global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Solve the fixed point and report the RS and annealed free energies
    Rs,
    /// Run the state-evolution recursion
    Se,
    /// Run AMP on a random instance and compare with state evolution
    Amp,
    /// Evaluate the first-moment functional and its Monte Carlo estimate
    Psi,
    /// Evaluate the pair functionals on a grid of overlaps
    Pair,
    /// Enumerate the partition function exactly
    Enumerate,
    /// Estimate the activation constants and thresholds
    Constants,
    /// Solve the fixed point over a grid of densities
    Sweep,
    /// List every config key with its default
    Keys,
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if let Some(out) = &cli.out {
        cfg.set("out_dir", &out.to_string_lossy())?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(threads) = cli.threads {
        cfg.set("threads", &threads.to_string())?;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Command::Keys = cli.command {
        for (k, v, doc) in KEYS {
            println!("{k}={v}\t# {doc}");
        }
        return Ok(());
    }
    let cfg = resolve(cli)?;
    let threads: usize = cfg.get("threads")?;
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot start {threads} threads: {e}")))?;
    }
    print!("{}", cfg.effective().lines().map(|l| format!("# {l}\n")).collect::<String>());
    let written = match cli.command {
        Command::Rs => commands::cmd_rs(&cfg),
        Command::Se => commands::cmd_se(&cfg),
        Command::Amp => commands::cmd_amp(&cfg),
        Command::Psi => commands::cmd_psi(&cfg),
        Command::Pair => commands::cmd_pair(&cfg),
        Command::Enumerate => commands::cmd_enumerate(&cfg),
        Command::Constants => commands::cmd_constants(&cfg),
        Command::Sweep => commands::cmd_sweep(&cfg),
        Command::Keys => unreachable!(),
    }?;
    for path in written {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
