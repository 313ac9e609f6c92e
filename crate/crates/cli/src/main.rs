use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use strata_cli::{invariants, mfe_order, resonance_scan, simulate, CliError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "strata", version, about = "Energy strata, resonance scans and modulated Fourier expansions")]
struct Cli {
    /// `key = value` configuration file; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output CSV path; overrides `output` in the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for parallel scans (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Integrate from single-mode data and write the mode-energy trace.
    Simulate,
    /// Tabulate non-resonance margins over `tau_grid`.
    ResonanceScan,
    /// Expansion error against the integrator for each ε in `eps_list`.
    MfeOrder,
    /// Almost-invariant energies of the expansion over [0, 1].
    Invariants,
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|source| CliError::Io { path: path.display().to_string(), source })?;
            ExperimentConfig::parse(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("threads: {e}")))?;
    }
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .ok_or_else(|| CliError::Config("no output path: pass --out or set `output`".into()))?;
    let outcome = match cli.command {
        Command::Simulate => simulate(&cfg, &out),
        Command::ResonanceScan => resonance_scan(&cfg, &out),
        Command::MfeOrder => mfe_order(&cfg, &out),
        Command::Invariants => invariants(&cfg, &out),
    }?;
    println!("{}", outcome.summary);
    for f in &outcome.files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
