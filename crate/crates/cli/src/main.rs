use std::path::PathBuf;
use std::process::ExitCode;

use brachiate_cli::commands;
use brachiate_cli::{CliError, RunConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "brachiate",
    version,
    about = "Plan, track and study swings of a three-link brachiation robot"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Output directory; defaults to the config's `output_dir`.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Dotted-path override, e.g. `tracker.alpha=0`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize the first swing; writes trajectory.csv and summary.json.
    Optimize(Common),
    /// Track a planned trajectory; writes telemetry.csv and outcome.json.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Trajectory written by `optimize`.
        #[arg(long, short)]
        trajectory: PathBuf,
    },
    /// Run the design study in the `[sweep]` section; writes sweep.csv and sweep.json.
    Sweep(Common),
    /// Swing along every bar; writes brachiation.json and telemetry.csv.
    Brachiate(Common),
}

fn load(common: &Common) -> Result<(RunConfig, PathBuf), CliError> {
    let config = RunConfig::load(&common.config, &common.overrides)?;
    let out = common
        .out
        .clone()
        .unwrap_or_else(|| config.output_dir.clone());
    Ok((config, out))
}

fn limit_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("BRACHIATE_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw.trim().parse().ok().filter(|n| *n > 0).ok_or_else(|| {
        CliError::Usage(format!(
            "BRACHIATE_THREADS must be a positive integer, got `{raw}`"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    limit_threads()?;
    match cli.command {
        Command::Optimize(common) => {
            let (config, out) = load(&common)?;
            let s = commands::optimize(&config, &out)?;
            println!(
                "cost {:.6e} -> {:.6e} in {} iterations, terminal hand error {:.4} m",
                s.initial_cost, s.final_cost, s.iterations, s.terminal_hand_error
            );
        }
        Command::Simulate { common, trajectory } => {
            let (config, out) = load(&common)?;
            let s = commands::simulate(&config, &trajectory, &out)?;
            println!(
                "{} at {:.4} m, final hand error {:.4} m, max {:.4} m",
                if s.caught { "caught" } else { "missed" },
                s.catch_distance,
                s.final_ee_error,
                s.max_ee_error
            );
        }
        Command::Sweep(common) => {
            let (config, out) = load(&common)?;
            let s = commands::sweep(&config, &out)?;
            for (case, best) in s.argmin.iter().enumerate() {
                match best {
                    Some(v) => println!("case {case}: lowest cost at {} = {v}", s.axis),
                    None => println!("case {case}: no solved point"),
                }
            }
            if s.failed_points > 0 {
                println!("{} points failed; see sweep.json", s.failed_points);
            }
        }
        Command::Brachiate(common) => {
            let (config, out) = load(&common)?;
            let s = commands::brachiate(&config, &out)?;
            for c in &s.cycles {
                println!(
                    "swing {} onto bar {}: {} at {:.4} m",
                    c.cycle,
                    c.base_bar + 1,
                    if c.caught { "caught" } else { "missed" },
                    c.catch_distance
                );
            }
        }
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
