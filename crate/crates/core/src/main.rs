use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use akl::harness::{
    run_experiment, ConfigFile, Experiment, ExperimentConfig, OutputFormat, Overrides,
};
use akl::{Divergence, Error};

#[derive(Debug, Parser)]
#[command(
    name = "akl",
    version,
    about = "FKL / RKL / AKL distillation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Epochs to convergence on a single toy teacher.
    Converge(Flags),
    /// Head and tail error of FKL vs RKL at early snapshots.
    HeadTail(Flags),
    /// Final errors of all five divergences.
    Compare(Flags),
    /// Token-level distillation of a tabular Markov LM.
    Sequence(Flags),
}

#[derive(Debug, Args)]
struct Flags {
    /// TOML experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Divergence to run (repeatable): fkl, rkl, akl, akl_r, fixed_mix(0.5).
    #[arg(long = "divergence", value_parser = parse_divergence)]
    divergences: Vec<Divergence>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long = "lr")]
    learning_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Seed (repeatable).
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Snapshot epoch (repeatable).
    #[arg(long = "snapshot")]
    snapshots: Vec<usize>,
    /// Output directory.
    #[arg(long = "out")]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_format)]
    format: Option<OutputFormat>,
    /// Worker threads.
    #[arg(long)]
    jobs: Option<usize>,
}

fn parse_divergence(s: &str) -> Result<Divergence, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_format(s: &str) -> Result<OutputFormat, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn exit_code(err: &Error) -> u8 {
    match err.root() {
        Error::Config(_) | Error::InvalidInput(_) => 2,
        Error::Numerical { .. } => 3,
        Error::Io { .. } => 4,
        _ => 1,
    }
}

fn run(experiment: Experiment, flags: Flags) -> Result<(), Error> {
    let file = match &flags.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    let overrides = Overrides {
        divergences: flags.divergences,
        mu: flags.mu,
        learning_rate: flags.learning_rate,
        epochs: flags.epochs,
        seeds: flags.seeds,
        snapshot_epochs: flags.snapshots,
        output_path: flags.out,
        output_format: flags.format,
        jobs: flags.jobs,
    };
    let cfg = ExperimentConfig::resolve(experiment, file, overrides)?;
    let out = run_experiment(&cfg)?;
    for row in &out.summary.runs {
        let converged = row
            .converged_at
            .map_or_else(|| "-".to_string(), |e| e.to_string());
        println!(
            "seed={} divergence={} converged_at={} final_max_abs_error={:.6e}",
            row.seed, row.divergence, converged, row.final_max_abs_error
        );
    }
    for h in &out.summary.head_tail {
        println!(
            "epoch {}: fkl head < rkl head and rkl tail < fkl tail on {}/{} seeds",
            h.epoch, h.fkl_head_and_rkl_tail.satisfied, h.fkl_head_and_rkl_tail.total
        );
    }
    if let Some(f) = out.summary.akl_within_fkl_rkl {
        println!(
            "akl final error <= max(fkl, rkl) on {}/{} seeds",
            f.satisfied, f.total
        );
    }
    println!("wrote {}", cfg.output_path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (experiment, flags) = match cli.command {
        Command::Converge(f) => (Experiment::Converge, f),
        Command::HeadTail(f) => (Experiment::HeadTail, f),
        Command::Compare(f) => (Experiment::Compare, f),
        Command::Sequence(f) => (Experiment::Sequence, f),
    };
    match run(experiment, flags) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
