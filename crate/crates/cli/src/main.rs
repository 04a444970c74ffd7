use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use slowfast_cli::commands::{cmd_check, cmd_filter, cmd_simulate, exit_code_for, load_config};

/// Simulation and filtering experiments for slow-fast stochastic systems
/// reduced onto their random slow manifold.
#[derive(Parser)]
#[command(name = "slowfast", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Scenario config (TOML path or the built-in name "thermoelastic");
    /// the built-in scenario is used when omitted.
    #[arg(long, global = true)]
    config: Option<String>,

    /// Override the master seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (overrides the config's run.out_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Verify the standing hypotheses and the admissible scale window.
    Check,
    /// Integrate the full and reduced systems and report the pathwise gap.
    Simulate,
    /// Run the full/reduced filters, the martingale checks, and the
    /// scale-ratio sweep.
    Filter,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut cfg = match load_config(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e:#}");
            return ExitCode::from(1);
        }
    };
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    let threads = cli.threads.or(cfg.run.threads);
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let out_dir = cli
        .out
        .unwrap_or_else(|| PathBuf::from(cfg.run.out_dir.clone()));

    let result = match cli.command {
        Command::Check => cmd_check(&cfg, Some(&out_dir)).map(|rep| {
            if rep.pass {
                0
            } else {
                2
            }
        }),
        Command::Simulate => cmd_simulate(&cfg, &out_dir).map(|_| 0),
        Command::Filter => cmd_filter(&cfg, &out_dir).map(|_| 0),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e) as u8)
        }
    }
}
