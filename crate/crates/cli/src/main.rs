use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tocsim_core::experiment::{load_config, ExperimentConfig, Runner, TARGETS};
use tocsim_core::{Error, PlantState};

#[derive(Parser)]
#[command(name = "tocsim", version, about = "Viability-aware update scheduling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration; omitted keys take their defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: config `out_dir`, else `out`).
    #[arg(long, value_name = "PATH")]
    out_dir: Option<PathBuf>,
    /// Worker threads; 0 picks one per core. Results do not depend on it.
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Label priors at every level and write kernel CSV and summaries.
    Kernel(Common),
    /// Paired fixed vs adaptive runs with per-phase rate reductions.
    Compare(Common),
    /// State-to-control transfer entropy table.
    Te(Common),
    /// One seeded run of the cycle, written as a trajectory CSV.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Start state as `T,P` (default: the first operating point).
        #[arg(long, value_parser = parse_state)]
        start: Option<PlantState>,
        #[arg(long, default_value_t = 1)]
        cycles: usize,
    },
}

fn parse_state(s: &str) -> Result<PlantState, String> {
    let (t, p) = s.split_once(',').ok_or("expected T,P")?;
    let t: f64 = t.trim().parse().map_err(|e| format!("temperature: {e}"))?;
    let p: f64 = p.trim().parse().map_err(|e| format!("pressure: {e}"))?;
    Ok(PlantState::new(t, p))
}

fn runner(c: &Common) -> Result<Runner, Error> {
    let mut config = match &c.config {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = c.seed {
        config.seed = seed;
    }
    let out_dir = c
        .out_dir
        .clone()
        .or_else(|| config.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok(Runner::new(config, out_dir, c.workers))
}

fn run(cli: Cli) -> Result<Vec<PathBuf>, Error> {
    match cli.command {
        Command::Kernel(c) => runner(&c)?.cmd_kernel(),
        Command::Compare(c) => runner(&c)?.cmd_compare(),
        Command::Te(c) => runner(&c)?.cmd_te(),
        Command::Simulate { common, start, cycles } => {
            runner(&common)?.cmd_simulate(start.unwrap_or(TARGETS[0]), cycles)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error kind={} message={msg:?}", e.kind());
            ExitCode::FAILURE
        }
    }
}
