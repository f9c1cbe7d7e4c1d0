//! `hmc-colloc`: collocation ODE solves, HMC sampling and desk-scale
//! verification from a sectioned configuration file.

mod commands;
mod config;
mod error;
mod report;
mod target;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Flags;
use config::ExperimentConfig;
use error::{CliError, EXIT_OK};

#[derive(Debug, Parser)]
#[command(name = "hmc-colloc", version, about = "Collocation ODE solver and HMC sampler")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// Experiment configuration (TOML sections run, density, sampler, ode, verify).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides run.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; overrides run.threads (0 = available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Compare against the adaptive reference integrator.
    #[arg(long, global = true)]
    oracle: bool,
    /// Emit the summary as JSON.
    #[arg(long, global = true)]
    json: bool,
    /// Output directory; overrides run.output.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve a builtin ODE or the GLM s-space flow.
    SolveOde,
    /// Run independent HMC chains.
    Sample {
        /// Overrides run.chains.
        #[arg(long)]
        chains: Option<usize>,
    },
    /// Run the verification bundle.
    Verify {
        /// Add the checks that must trip preconditions.
        #[arg(long)]
        negative_controls: bool,
    },
    /// Measure γ for the shipped uniform bases.
    BasisCheck {
        #[arg(long, default_value_t = 12)]
        max_degree: usize,
        #[arg(long, default_value_t = 16)]
        max_pieces: usize,
        #[arg(long, default_value_t = hmc_colloc::basis::DEFAULT_GAMMA_GRID)]
        grid: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<i32, CliError> {
    let g = cli.global;
    let mut cfg = match &g.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.run.seed = seed;
    }
    if let Some(t) = g.threads {
        cfg.run.threads = t;
    }
    if let Command::Sample { chains: Some(c) } = cli.command {
        cfg.run.chains = c;
    }
    cfg.validate()?;
    if cfg.run.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.run.threads)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    let flags = Flags {
        json: g.json,
        oracle: g.oracle,
        negative_controls: matches!(cli.command, Command::Verify { negative_controls: true }),
        output: g.output.or_else(|| cfg.run.output.clone()),
    };
    let summary = match cli.command {
        Command::SolveOde => commands::solve::run(&cfg, &flags)?,
        Command::Sample { .. } => commands::sample::run(&cfg, &flags)?,
        Command::BasisCheck {
            max_degree,
            max_pieces,
            grid,
        } => {
            let s = commands::basis_check::run(max_degree, max_pieces, grid, &flags)?;
            let failed = s.get("status").and_then(|v| v.as_str()) != Some("pass");
            print!("{}", s.render(flags.json));
            return Ok(if failed { error::EXIT_NUMERIC } else { EXIT_OK });
        }
        Command::Verify { .. } => {
            let (s, checks) = commands::verify::run(&cfg, &flags)?;
            print!("{}", s.render(flags.json));
            let hard: Vec<_> = checks.iter().filter(|c| c.hard).collect();
            let failed = hard.iter().filter(|c| !c.pass).count();
            if failed > 0 {
                return Err(CliError::ChecksFailed {
                    failed,
                    total: hard.len(),
                });
            }
            return Ok(EXIT_OK);
        }
    };
    print!("{}", summary.render(flags.json));
    Ok(EXIT_OK)
}
