use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flower_core::harness::invariants::{mutant_nu, run_invariants, InvariantOptions};
use flower_core::harness::{self, ExperimentConfig};
use flower_core::Error;

/// Flow-matching posterior sampling experiments.
#[derive(Debug, Parser)]
#[command(name = "flower-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (defaults to the config's outputs.directory, then out/<name>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Suppress progress messages.
    #[arg(long)]
    quiet: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a velocity network; writes checkpoint.bin and loss.csv.
    Train(Common),
    /// Run the posterior sampler; writes samples, trajectories and metrics.
    Solve(Common),
    /// Draw from the exact posterior of a mixture prior.
    PosteriorExact(Common),
    /// Draw from the prior.
    SamplePrior(Common),
    /// Run the built-in identity and moment checks.
    Invariants {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Replace the noise schedule with a known-wrong one (mutation test).
        #[arg(long)]
        inject_nu_bug: bool,
        #[arg(long)]
        quiet: bool,
    },
}

const EXIT_INVARIANT: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn exit_code(err: &Error) -> u8 {
    if err.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_CONFIG
    }
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf), Error> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    let out = harness::resolve_output_dir(&cfg, common.out.as_deref());
    Ok((cfg, out))
}

fn run_config_command(command: &Command, common: &Common) -> Result<harness::CommandSummary, Error> {
    let (cfg, out) = load(common)?;
    let quiet = common.quiet;
    let mut progress = |msg: &str| {
        if !quiet {
            eprintln!("{msg}");
        }
    };
    let out: &Path = &out;
    match command {
        Command::Train(_) => harness::cmd_train(&cfg, out, &mut progress),
        Command::Solve(_) => harness::cmd_solve(&cfg, out, &mut progress),
        Command::PosteriorExact(_) => harness::cmd_posterior_exact(&cfg, out),
        Command::SamplePrior(_) => harness::cmd_sample_prior(&cfg, out),
        Command::Invariants { .. } => unreachable!("handled separately"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match &cli.command {
        Command::Invariants { seed, inject_nu_bug, quiet } => {
            let mut opts = InvariantOptions { seed: *seed, ..InvariantOptions::default() };
            if *inject_nu_bug {
                opts.nu = mutant_nu;
            }
            let report = run_invariants(&opts);
            if !quiet {
                print!("{report}");
            }
            if report.all_passed() {
                ExitCode::SUCCESS
            } else {
                eprintln!("failed invariants: {}", report.failures().join(", "));
                ExitCode::from(EXIT_INVARIANT)
            }
        }
        Command::Train(common) | Command::Solve(common) | Command::PosteriorExact(common) | Command::SamplePrior(common) => {
            match run_config_command(&cli.command, common) {
                Ok(summary) => {
                    if !common.quiet {
                        for line in &summary.lines {
                            println!("{line}");
                        }
                        println!("output: {}", summary.output_dir.display());
                    }
                    ExitCode::SUCCESS
                }
                Err(err) => {
                    eprintln!("error: {err}");
                    ExitCode::from(exit_code(&err))
                }
            }
        }
    }
}
