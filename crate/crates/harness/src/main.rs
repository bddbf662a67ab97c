use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use kcenter_harness::experiment::{
    run_experiment, to_csv, ExperimentConfig, OracleKind, PlantedSpec,
};
use kcenter_harness::HarnessError;

#[derive(Parser)]
#[command(name = "kcenter", about = "k-center experiments on a simulated bounded-memory cluster")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its report.
    Run(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON config with the same keys as the flags; flags set here override it.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Point file: one point per line, whitespace-separated coordinates.
    #[arg(long, conflicts_with = "planted")]
    input: Option<PathBuf>,

    /// Generated instance as k,n,d,rstar,sep.
    #[arg(long)]
    planted: Option<String>,

    /// Centers requested; drives the feasibility threshold.
    #[arg(long)]
    k: Option<usize>,

    /// Coarse refinement stages (clamped to what the input size supports).
    #[arg(long)]
    alpha: Option<u32>,

    /// Space exponent: machines hold on the order of n^delta words.
    #[arg(long)]
    delta: Option<f64>,

    /// Hashing replication exponent.
    #[arg(long)]
    rho: Option<f64>,

    #[arg(long)]
    seed: Option<u64>,

    /// Pipeline repetitions per radius (default scales with n).
    #[arg(long)]
    psi: Option<u32>,

    /// Baseline: brute | planted | gonzalez (default: best available).
    #[arg(long)]
    oracle: Option<String>,

    /// Report destination (JSON). Defaults to stdout.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Also append the flattened one-line summary to this CSV file.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn assemble(args: &RunArgs) -> Result<ExperimentConfig, HarnessError> {
    let mut config: ExperimentConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| HarnessError::InvalidInput(format!("config file: {e}")))?
        }
        None => {
            // without a file, k must come from the flags; other fields keep
            // their documented defaults
            let k = args.k.ok_or_else(|| {
                HarnessError::InvalidInput("--k is required without a config file".into())
            })?;
            serde_json::from_str(&format!("{{\"k\": {k}}}"))
                .expect("defaulted config deserializes")
        }
    };
    if let Some(path) = &args.input {
        config.input = Some(path.clone());
        config.planted = None;
    }
    if let Some(spec) = &args.planted {
        let spec: PlantedSpec = spec.parse().map_err(HarnessError::InvalidInput)?;
        config.planted = Some(spec);
        config.input = None;
    }
    if let Some(k) = args.k {
        config.k = k;
    }
    if let Some(alpha) = args.alpha {
        config.alpha = alpha;
    }
    if let Some(delta) = args.delta {
        config.delta = delta;
    }
    if let Some(rho) = args.rho {
        config.rho = rho;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(psi) = args.psi {
        config.psi = Some(psi);
    }
    if let Some(oracle) = &args.oracle {
        let kind: OracleKind = oracle.parse().map_err(HarnessError::InvalidInput)?;
        config.oracle = Some(kind);
    }
    Ok(config)
}

fn run(args: &RunArgs) -> Result<(), HarnessError> {
    let config = assemble(args)?;
    let report = run_experiment(&config)?;
    let json = report.to_json();
    match &args.out {
        Some(path) => std::fs::write(path, &json)
            .map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?,
        None => print!("{json}"),
    }
    if let Some(path) = &args.csv {
        std::fs::write(path, to_csv(std::slice::from_ref(&report)))
            .map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
    }
    eprintln!(
        "n = {}, centers = {} (threshold {}), cost = {:.6} <= certificate {:.6}, \
         rounds = {}, {:.2}s",
        report.n,
        report.centers_returned,
        report.threshold,
        report.cost_achieved,
        report.cost_certificate,
        report.rounds_total,
        report.wallclock_seconds,
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => match run(&args) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(e.exit_code() as u8)
            }
        },
    }
}
